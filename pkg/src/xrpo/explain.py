"""Global and per-instance explanation products built from attributions.

Every product is a plain record that serialises to JSON (``to_dict``);
``emit_svg`` renders any of them as a standalone, byte-deterministic SVG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from xrpo.shapley import ShapleyAttribution


def _phi_matrix(attributions: Sequence[ShapleyAttribution]) -> np.ndarray:
    if not attributions:
        raise ValueError("no attributions given")
    dims = {len(a.phi) for a in attributions}
    if len(dims) != 1:
        raise ValueError(f"attributions have inconsistent dimensions {sorted(dims)}")
    return np.vstack([a.phi for a in attributions])


@dataclass
class GlobalImportance:
    ranking: list[tuple[str, float]]
    output_dim: str | int | None = None
    per_output: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "product": "bar",
            "output_dim": self.output_dim,
            "ranking": [[n, v] for n, v in self.ranking],
            "per_output": {k: [[n, v] for n, v in r] for k, r in self.per_output.items()},
        }

    def top(self, k: int) -> list[str]:
        return [n for n, _ in self.ranking[:k]]


def _rank(names: Sequence[str], scores: np.ndarray) -> list[tuple[str, float]]:
    # stable sort on -score keeps feature-index order among ties
    order = np.argsort(-scores, kind="stable")
    return [(names[i], float(scores[i])) for i in order]


def global_importance(
    attributions: Sequence[ShapleyAttribution], feature_names: Sequence[str], output_dim: str | int | None = None
) -> GlobalImportance:
    """Mean |phi| per feature, largest first."""
    phi = _phi_matrix(attributions)
    if phi.shape[1] != len(feature_names):
        raise ValueError(f"{phi.shape[1]} attribution features but {len(feature_names)} names")
    if output_dim is None:
        output_dim = attributions[0].output_dim
    return GlobalImportance(_rank(feature_names, np.mean(np.abs(phi), axis=0)), output_dim)


def combined_importance(
    per_output: dict[str, Sequence[ShapleyAttribution]], feature_names: Sequence[str]
) -> GlobalImportance:
    """Sum of per-output mean |phi|; each output's own ranking is kept alongside."""
    total = np.zeros(len(feature_names))
    parts = {}
    for name, attrs in per_output.items():
        gi = global_importance(attrs, feature_names, name)
        parts[name] = gi.ranking
        total += np.mean(np.abs(_phi_matrix(attrs)), axis=0)
    return GlobalImportance(_rank(feature_names, total), "all", parts)


@dataclass
class SummaryRecord:
    feature_name: str
    pairs: list[tuple[float, float]]
    percentiles: list[float]

    def to_dict(self) -> dict:
        return {"feature_name": self.feature_name, "pairs": [list(p) for p in self.pairs], "percentiles": self.percentiles}

    @classmethod
    def from_dict(cls, d: dict) -> SummaryRecord:
        return cls(d["feature_name"], [tuple(p) for p in d["pairs"]], list(d["percentiles"]))


def _percentile_ranks(values: np.ndarray) -> np.ndarray:
    n = len(values)
    if n == 1:
        return np.array([0.5])
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n) / (n - 1)
    return ranks


def summary_records(
    attributions: Sequence[ShapleyAttribution],
    instances: np.ndarray,
    feature_names: Sequence[str],
    top_k: int = 20,
) -> list[SummaryRecord]:
    """(value, phi) scatter per top-k feature, with value percentiles for colouring."""
    if top_k > len(feature_names):
        raise ValueError(f"top_k={top_k} exceeds the {len(feature_names)} features")
    if not attributions:
        return []
    phi = _phi_matrix(attributions)
    x = np.atleast_2d(np.asarray(instances, float))
    if x.shape != phi.shape:
        raise ValueError("instances and attributions do not match")
    gi = global_importance(attributions, feature_names)
    index = {n: i for i, n in enumerate(feature_names)}
    out = []
    for name in gi.top(top_k):
        j = index[name]
        out.append(
            SummaryRecord(
                name,
                [(float(a), float(b)) for a, b in zip(x[:, j], phi[:, j])],
                [float(v) for v in _percentile_ranks(x[:, j])],
            )
        )
    return out


@dataclass
class DependenceRecords:
    feature_a: str
    feature_b: str
    triples: list[tuple[float, float, float]]
    pearson_ab: float | None

    def to_dict(self) -> dict:
        return {
            "product": "dependence",
            "feature_a": self.feature_a,
            "feature_b": self.feature_b,
            "triples": [list(t) for t in self.triples],
            "pearson_value_a_value_b": self.pearson_ab,
        }


def dependence_records(
    instances: np.ndarray,
    attributions: Sequence[ShapleyAttribution],
    feature_a: str,
    feature_b: str,
    feature_names: Sequence[str],
) -> DependenceRecords:
    """Per sample (value_a, phi_a, value_b); value_b drives the colour channel."""
    index = {n: i for i, n in enumerate(feature_names)}
    for f in (feature_a, feature_b):
        if f not in index:
            raise KeyError(f"unknown feature {f!r}")
    a, b = index[feature_a], index[feature_b]
    x = np.atleast_2d(np.asarray(instances, float))
    phi = _phi_matrix(attributions)
    triples = [(float(x[i, a]), float(phi[i, a]), float(x[i, b])) for i in range(len(x))]
    r = None
    if len(x) > 1 and np.std(x[:, a]) > 0 and np.std(x[:, b]) > 0:
        r = float(np.corrcoef(x[:, a], x[:, b])[0, 1])
    return DependenceRecords(feature_a, feature_b, triples, r)


@dataclass
class InstanceExplanation:
    index: int
    phi0: float
    contributions: list[tuple[str, float, float]]  # (name, value, phi) by |phi| descending
    prediction: float
    residual: float
    method: str = "kernel"
    output_name: str = ""
    top_n: int = 10

    def waterfall(self) -> list[dict]:
        """Steps from phi0 to the endpoint; features past ``top_n`` are rolled up."""
        steps = []
        level = self.phi0
        head = self.contributions[: self.top_n]
        tail = self.contributions[self.top_n :]
        for name, value, phi in head:
            steps.append({"label": name, "value": value, "phi": phi, "start": level, "end": level + phi})
            level += phi
        if tail:
            # accumulate one by one in the same order so the endpoint matches endpoint()
            start = level
            for _, _, phi in tail:
                level += phi
            steps.append(
                {"label": f"{len(tail)} other features", "value": None, "phi": level - start, "start": start, "end": level}
            )
        return steps

    def endpoint(self) -> float:
        level = self.phi0
        for _, _, phi in self.contributions:
            level += phi
        return level

    def force(self) -> dict:
        pos = [(n, v, p) for n, v, p in self.contributions if p > 0]
        neg = [(n, v, p) for n, v, p in self.contributions if p < 0]
        return {
            "base": self.phi0,
            "push_up": [[n, v, p] for n, v, p in pos],
            "push_down": [[n, v, p] for n, v, p in neg],
            "prediction": self.prediction,
        }

    def to_dict(self) -> dict:
        return {
            "product": "instance",
            "index": self.index,
            "output": self.output_name,
            "method": self.method,
            "phi0": self.phi0,
            "prediction": self.prediction,
            "residual": self.residual,
            "endpoint": self.endpoint(),
            "contributions": [[n, v, p] for n, v, p in self.contributions],
            "waterfall": self.waterfall(),
            "force": self.force(),
        }


def instance_explanation(
    attribution: ShapleyAttribution,
    instance: np.ndarray,
    feature_names: Sequence[str],
    index: int = 0,
    top_n: int = 10,
    output_name: str = "",
) -> InstanceExplanation:
    x = np.asarray(instance, float)
    if x.shape != attribution.phi.shape or not np.array_equal(x, attribution.instance):
        raise ValueError("attribution does not belong to this instance")
    order = np.argsort(-np.abs(attribution.phi), kind="stable")
    contrib = [(feature_names[i], float(x[i]), float(attribution.phi[i])) for i in order]
    return InstanceExplanation(
        index,
        float(attribution.phi0),
        contrib,
        float(attribution.prediction),
        float(attribution.reconstruction_residual),
        attribution.method,
        output_name,
        top_n,
    )


@dataclass
class TrustCheckResult:
    markers: np.ndarray  # (N, p) 1 = heavy, 0 = light
    signs: np.ndarray  # (N, p) +1 / -1 / 0
    agreement_fraction: float
    threshold_spec: dict

    def to_dict(self) -> dict:
        return {
            "product": "trust",
            "agreement_fraction": self.agreement_fraction,
            "threshold_spec": self.threshold_spec,
            "markers": [["heavy" if m else "light" for m in row] for row in self.markers],
            "signs": [["positive" if s > 0 else "negative" if s < 0 else "zero" for s in row] for row in self.signs],
        }


def trust_check(
    instances: np.ndarray,
    attributions: Sequence[ShapleyAttribution],
    threshold_mode: str = "median",
    reference: np.ndarray | None = None,
) -> TrustCheckResult:
    """Fraction of (sample, feature) cells where heavy <=> phi > 0 and light <=> phi < 0.

    Features above their threshold are heavy, the rest light. The threshold
    is the per-feature median of ``reference`` (the training inputs) or of
    ``instances`` when no reference is given. Zero phi always disagrees.
    """
    if not attributions or len(instances) == 0:
        raise ValueError("trust check needs at least one instance")
    x = np.atleast_2d(np.asarray(instances, float))
    phi = _phi_matrix(attributions)
    if x.shape != phi.shape:
        raise ValueError("instances and attributions do not match")
    if threshold_mode != "median":
        raise ValueError(f"unknown threshold mode {threshold_mode!r}")
    ref = x if reference is None else np.atleast_2d(np.asarray(reference, float))
    thr = np.median(ref, axis=0)
    heavy = x > thr[None, :]
    signs = np.sign(phi).astype(int)
    agree = (heavy & (signs > 0)) | (~heavy & (signs < 0))
    spec = {
        "mode": "median",
        "source": "instances" if reference is None else "reference",
        "thresholds": [float(t) for t in thr],
    }
    return TrustCheckResult(heavy.astype(int), signs, float(agree.mean()), spec)


# -- SVG rendering ------------------------------------------------------------

_W, _H = 720, 480
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 120, 30, 40, 50
_POS, _NEG = "#d62728", "#1f77b4"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Svg:
    def __init__(self, title: str, width: int = _W, height: int = _H):
        self.w, self.h = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        ]

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, anchor="start", **kw) -> None:
        extra = "".join(f' {k.replace("_", "-")}="{v}"' for k, v in kw.items())
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" text-anchor="{anchor}"{extra}>{escape(str(s))}</text>')

    def line(self, x1, y1, x2, y2, stroke="black", width=1) -> None:
        self.add(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" stroke="{stroke}" stroke-width="{width}"/>'
        )

    def rect(self, x, y, w, h, fill) -> None:
        self.add(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(max(w, 0))}" height="{_fmt(max(h, 0))}" fill="{fill}"/>')

    def circle(self, x, y, r, fill) -> None:
        self.add(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{r}" fill="{fill}" fill-opacity="0.7"/>')

    def axes(self, xlabel: str, ylabel: str) -> tuple[float, float, float, float]:
        x0, y0 = _PAD_L, self.h - _PAD_B
        x1, y1 = self.w - _PAD_R, _PAD_T
        self.line(x0, y0, x1, y0)
        self.line(x0, y0, x0, y1)
        self.text((x0 + x1) / 2, self.h - 12, xlabel, "middle")
        self.add(f'<text x="14" y="{_fmt((y0 + y1) / 2)}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {_fmt((y0 + y1) / 2)})">{escape(ylabel)}</text>')
        return x0, y0, x1, y1

    def no_data(self) -> None:
        self.text(self.w / 2, self.h / 2, "no data", "middle", font_size=16)

    def tostring(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _span(lo: float, hi: float) -> tuple[float, float]:
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return lo - 1.0, lo + 1.0
    return lo, hi


def _colour(t: float) -> str:
    """Blue (low) to red (high) for t in [0, 1]."""
    t = min(max(t, 0.0), 1.0)
    r = int(round(31 + t * (214 - 31)))
    g = int(round(119 + t * (39 - 119)))
    b = int(round(180 + t * (40 - 180)))
    return f"#{r:02x}{g:02x}{b:02x}"


def _svg_bar(gi: GlobalImportance, top_k: int = 20) -> str:
    svg = _Svg(f"Mean |SHAP| ({gi.output_dim})")
    x0, y0, x1, y1 = svg.axes("mean |phi|", "feature")
    rows = gi.ranking[:top_k]
    if not rows:
        svg.no_data()
        return svg.tostring()
    vmax = max(v for _, v in rows) or 1.0
    band = (y0 - y1) / len(rows)
    for k, (name, v) in enumerate(rows):
        y = y1 + k * band
        svg.rect(x0, y + 0.15 * band, (x1 - x0) * v / vmax, 0.7 * band, _POS)
        svg.text(x0 - 6, y + 0.65 * band, name, "end")
    svg.text(x1, y0 + 14, _fmt(vmax), "end")
    return svg.tostring()


def _svg_summary(records: Sequence[SummaryRecord]) -> str:
    svg = _Svg("SHAP summary")
    x0, y0, x1, y1 = svg.axes("phi", "feature")
    if not records or not any(r.pairs for r in records):
        svg.no_data()
        return svg.tostring()
    all_phi = [p for r in records for _, p in r.pairs]
    lo, hi = _span(min(all_phi), max(all_phi))
    band = (y0 - y1) / len(records)
    zx = x0 + (x1 - x0) * (0 - lo) / (hi - lo)
    if x0 <= zx <= x1:
        svg.line(zx, y0, zx, y1, stroke="#999999")
    for k, r in enumerate(records):
        yc = y1 + (k + 0.5) * band
        svg.text(x0 - 6, yc + 4, r.feature_name, "end")
        for (_, phi), pct in zip(r.pairs, r.percentiles):
            svg.circle(x0 + (x1 - x0) * (phi - lo) / (hi - lo), yc, 2, _colour(pct))
    svg.text(x0, y0 + 14, _fmt(lo), "start")
    svg.text(x1, y0 + 14, _fmt(hi), "end")
    return svg.tostring()


def _svg_dependence(dep: DependenceRecords) -> str:
    svg = _Svg(f"Dependence: {dep.feature_a} coloured by {dep.feature_b}")
    x0, y0, x1, y1 = svg.axes(dep.feature_a, f"phi({dep.feature_a})")
    if not dep.triples:
        svg.no_data()
        return svg.tostring()
    xs = [t[0] for t in dep.triples]
    ys = [t[1] for t in dep.triples]
    cs = [t[2] for t in dep.triples]
    xl, xh = _span(min(xs), max(xs))
    yl, yh = _span(min(ys), max(ys))
    cl, ch = min(cs), max(cs)
    for a, p, c in dep.triples:
        t = 0.5 if ch <= cl else (c - cl) / (ch - cl)
        svg.circle(x0 + (x1 - x0) * (a - xl) / (xh - xl), y0 - (y0 - y1) * (p - yl) / (yh - yl), 3, _colour(t))
    svg.text(x0, y0 + 14, _fmt(xl))
    svg.text(x1, y0 + 14, _fmt(xh), "end")
    return svg.tostring()


def _svg_waterfall(ex: InstanceExplanation) -> str:
    svg = _Svg(f"Waterfall, instance {ex.index} {ex.output_name}".strip())
    x0, y0, x1, y1 = svg.axes("model output", "")
    steps = ex.waterfall()
    if not steps:
        svg.no_data()
        return svg.tostring()
    levels = [ex.phi0] + [s["end"] for s in steps]
    lo, hi = _span(min(levels), max(levels))
    sx = lambda v: x0 + (x1 - x0) * (v - lo) / (hi - lo)  # noqa: E731
    band = (y0 - y1) / len(steps)
    for k, s in enumerate(steps):
        y = y1 + k * band
        a, b = sorted((s["start"], s["end"]))
        svg.rect(sx(a), y + 0.15 * band, sx(b) - sx(a), 0.7 * band, _POS if s["phi"] > 0 else _NEG)
        svg.text(x0 - 6, y + 0.6 * band, s["label"], "end")
    svg.line(sx(ex.phi0), y0, sx(ex.phi0), y1, stroke="#999999")
    svg.text(sx(ex.phi0), y0 + 14, f"E[f]={ex.phi0:.3f}", "middle")
    svg.text(sx(ex.endpoint()), y1 - 6, f"f(x)={ex.endpoint():.3f}", "middle")
    return svg.tostring()


def _svg_force(ex: InstanceExplanation) -> str:
    svg = _Svg(f"Force, instance {ex.index} {ex.output_name}".strip(), height=200)
    x0, x1, yc = _PAD_L, _W - _PAD_R, 100
    contrib = ex.contributions
    if not contrib:
        svg.no_data()
        return svg.tostring()
    pos = sum(p for _, _, p in contrib if p > 0)
    neg = sum(p for _, _, p in contrib if p < 0)
    lo, hi = _span(ex.phi0 + neg, ex.phi0 + pos)
    sx = lambda v: x0 + (x1 - x0) * (v - lo) / (hi - lo)  # noqa: E731
    svg.line(x0, yc + 20, x1, yc + 20)
    # positive pushes stack up to the left of the output, negative to the right
    level = ex.endpoint()
    for name, _, p in [c for c in contrib if c[2] > 0]:
        svg.rect(sx(level - p), yc - 10, sx(level) - sx(level - p), 20, _POS)
        if sx(level) - sx(level - p) > 30:
            svg.text((sx(level) + sx(level - p)) / 2, yc - 14, name, "middle")
        level -= p
    level = ex.endpoint()
    for name, _, p in [c for c in contrib if c[2] < 0]:
        svg.rect(sx(level), yc - 10, sx(level - p) - sx(level), 20, _NEG)
        if sx(level - p) - sx(level) > 30:
            svg.text((sx(level) + sx(level - p)) / 2, yc + 34, name, "middle")
        level -= p
    svg.text(sx(ex.endpoint()), yc - 30, f"f(x)={ex.endpoint():.3f}", "middle")
    svg.text(sx(ex.phi0), yc + 50, f"base={ex.phi0:.3f}", "middle")
    return svg.tostring()


def _svg_trust(tr: TrustCheckResult) -> str:
    n, p = tr.markers.shape if tr.markers.size else (0, 0)
    svg = _Svg(f"Markers vs SHAP signs (agreement {tr.agreement_fraction:.4f})")
    if n == 0:
        svg.no_data()
        return svg.tostring()
    half = (_W - 3 * 20) / 2
    cw, ch = half / p, (_H - 80) / n
    for panel, (mat, colour) in enumerate(
        [(tr.markers, lambda v: _POS if v else _NEG), (tr.signs, lambda v: _POS if v > 0 else _NEG if v < 0 else "#cccccc")]
    ):
        ox = 20 + panel * (half + 20)
        svg.text(ox + half / 2, 36, ["markers (heavy red)", "phi sign (positive red)"][panel], "middle")
        for i in range(n):
            for j in range(p):
                svg.rect(ox + j * cw, 50 + i * ch, cw, ch, colour(mat[i, j]))
    return svg.tostring()


def render_svg(product, kind: str | None = None) -> str:
    if isinstance(product, GlobalImportance):
        return _svg_bar(product)
    if isinstance(product, DependenceRecords):
        return _svg_dependence(product)
    if isinstance(product, InstanceExplanation):
        return _svg_force(product) if kind == "force" else _svg_waterfall(product)
    if isinstance(product, TrustCheckResult):
        return _svg_trust(product)
    if isinstance(product, (list, tuple)) and all(isinstance(r, SummaryRecord) for r in product):
        return _svg_summary(product)
    raise TypeError(f"cannot render {type(product).__name__}")


def emit_svg(product, path: str | Path, kind: str | None = None) -> Path:
    """Write ``product`` as SVG. ``kind='force'`` selects the force layout for instances."""
    path = Path(path)
    text = render_svg(product, kind)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path
