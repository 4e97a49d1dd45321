"""Scenario sampling, GA labelling and train/validation/test splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from xrpo.network import NetworkModel
from xrpo.powerflow import ConvergenceError, LoadScenario
from xrpo.rpo import DegenerateBaselineError, GaParams, ObjectiveWeights, solve_rpo_ga

log = logging.getLogger(__name__)

MULT_MEAN = 1.1
MULT_STD = 0.9
MULT_LO = 0.2
MULT_HI = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    mult_mean: float = MULT_MEAN
    mult_std: float = MULT_STD
    mult_lo: float = MULT_LO
    mult_hi: float = MULT_HI
    coupled_pq: bool = False
    weibull_k: float = 2.0
    weibull_scale_frac: float = 0.4
    beta_a: float = 2.0
    beta_b: float = 2.0


@dataclass
class LabeledSample:
    x: np.ndarray
    y: np.ndarray
    scenario: LoadScenario | None = None
    objective_f: float = 0.0

    def to_dict(self) -> dict:
        return {
            "x": [float(v) for v in self.x],
            "y": [float(v) for v in self.y],
            "scenario": None if self.scenario is None else self.scenario.to_dict(),
            "objective_f": float(self.objective_f),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LabeledSample:
        sc = d.get("scenario")
        return cls(
            np.asarray(d["x"], float),
            np.asarray(d["y"], float),
            None if sc is None else LoadScenario.from_dict(sc),
            float(d.get("objective_f", 0.0)),
        )


@dataclass
class DatasetSplit:
    train: list[LabeledSample]
    val: list[LabeledSample]
    test: list[LabeledSample]
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def arrays(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        return stack(getattr(self, part))


def stack(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return np.vstack([s.x for s in samples]), np.vstack([s.y for s in samples])


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit child seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# -- sampling -----------------------------------------------------------------


def sample_multiplier(rng: np.random.Generator, cfg: ScenarioConfig = ScenarioConfig()) -> float:
    """One truncated-Gaussian load multiplier, by rejection."""
    while True:
        v = rng.normal(cfg.mult_mean, cfg.mult_std)
        if cfg.mult_lo <= v <= cfg.mult_hi:
            return float(v)


def sample_multipliers(rng: np.random.Generator, size: int, cfg: ScenarioConfig = ScenarioConfig()) -> np.ndarray:
    """``size`` truncated-Gaussian draws; vectorised rejection in rounds."""
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        draw = rng.normal(cfg.mult_mean, cfg.mult_std, size=2 * need + 8)
        ok = draw[(draw >= cfg.mult_lo) & (draw <= cfg.mult_hi)][:need]
        out[filled : filled + len(ok)] = ok
        filled += len(ok)
    return out


def truncated_normal_mean(mu: float, sigma: float, lo: float, hi: float) -> float:
    """Closed-form mean of N(mu, sigma) restricted to [lo, hi]."""
    a, b = (lo - mu) / sigma, (hi - mu) / sigma
    pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)  # noqa: E731
    mass = 0.5 * (special.erf(b / math.sqrt(2)) - special.erf(a / math.sqrt(2)))
    return mu + sigma * (pdf(a) - pdf(b)) / mass


def _dg_output(rng: np.random.Generator, kind: str, cap: float, cfg: ScenarioConfig) -> float:
    if kind == "wind":
        scale = cfg.weibull_scale_frac * cap
        while True:
            v = scale * rng.weibull(cfg.weibull_k)
            if v <= cap:
                return float(v)
    return float(cap * rng.beta(cfg.beta_a, cfg.beta_b))


def expected_dg_output(net: NetworkModel, cfg: ScenarioConfig = ScenarioConfig()) -> np.ndarray:
    """Mean active output (kW) of each DG unit under the sampling model."""
    from scipy import integrate

    out = []
    for d in net.dg_units:
        if d.kind == "wind":
            lam, k = cfg.weibull_scale_frac * d.s_kva, cfg.weibull_k
            pdf = lambda x: (k / lam) * (x / lam) ** (k - 1) * math.exp(-((x / lam) ** k))  # noqa: E731
            mass = integrate.quad(pdf, 0, d.s_kva)[0]
            mean = integrate.quad(lambda x: x * pdf(x), 0, d.s_kva)[0] / mass
        else:
            mean = d.s_kva * cfg.beta_a / (cfg.beta_a + cfg.beta_b)
        out.append(mean)
    return np.array(out)


def generate_scenarios(
    net: NetworkModel, count: int, seed: int, cfg: ScenarioConfig = ScenarioConfig()
) -> list[LoadScenario]:
    """Independent per-node load multipliers on the base loads, plus DG outputs.

    Scenario ``i`` draws from its own generator seeded by ``(seed, i)``, so a
    longer run extends a shorter one.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    n_load = net.m - 1
    out = []
    for i in range(count):
        s = derive_seed(seed, i)
        rng = np.random.default_rng(s)
        mp = sample_multipliers(rng, n_load, cfg)
        mq = mp if cfg.coupled_pq else sample_multipliers(rng, n_load, cfg)
        dg = [_dg_output(rng, d.kind, d.s_kva, cfg) for d in net.dg_units]
        out.append(LoadScenario(tuple(net.base_p_kw * mp), tuple(net.base_q_kvar * mq), tuple(dg), seed=s))
    return out


# -- labelling ----------------------------------------------------------------


def encode_sample(scenario: LoadScenario, controls, objective_f: float) -> LabeledSample:
    return LabeledSample(scenario.features(), controls.to_array(), scenario, objective_f)


def _label_one(net, scenario, weights, ga, seed):
    ga_i = GaParams(**{**ga.__dict__, "seed": seed})
    try:
        sol = solve_rpo_ga(net, scenario, weights, ga_i)
    except (DegenerateBaselineError, ConvergenceError) as exc:
        return None, str(exc)
    return encode_sample(scenario, sol.controls, sol.objective_f), None


@dataclass
class LabelReport:
    samples: list[LabeledSample]
    dropped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


def label_scenarios(
    net: NetworkModel,
    scenarios: Sequence[LoadScenario],
    weights: ObjectiveWeights = ObjectiveWeights(),
    ga: GaParams = GaParams(),
    jobs: int = 1,
) -> LabelReport:
    """Label each scenario with its best-of-restarts GA control vector.

    Scenario ``i`` runs the GA with seed ``derive_seed(ga.seed, i)``.
    Degenerate or non-converging scenarios are dropped and listed.
    """
    seeds = [derive_seed(ga.seed, i) for i in range(len(scenarios))]
    if jobs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(
            delayed(_label_one)(net, sc, weights, ga, s) for sc, s in zip(scenarios, seeds)
        )
    else:
        results = [_label_one(net, sc, weights, ga, s) for sc, s in zip(scenarios, seeds)]
    report = LabelReport([])
    for i, (sample, err) in enumerate(results):
        if sample is None:
            report.dropped.append((i, err))
        else:
            report.samples.append(sample)
    if report.dropped:
        log.warning("dropped %d of %d scenarios", report.n_dropped, len(scenarios))
    return report


# -- splitting and persistence ------------------------------------------------


def split_dataset(
    samples: Sequence[LabeledSample], fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/val/test slices."""
    if not samples:
        raise ValueError("cannot split an empty dataset")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(samples)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    idx_tr, idx_va, idx_te = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return DatasetSplit(pick(idx_tr), pick(idx_va), pick(idx_te), fr, seed)


def save_jsonl(samples: Iterable[LabeledSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")


def load_jsonl(path: str | Path) -> list[LabeledSample]:
    with open(path) as fh:
        return [LabeledSample.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_scenarios(scenarios: Iterable[LoadScenario], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(json.dumps(s.to_dict()) + "\n")


def load_scenarios(path: str | Path) -> list[LoadScenario]:
    with open(path) as fh:
        return [LoadScenario.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_split(split: DatasetSplit, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for part in ("train", "val", "test"):
        save_jsonl(getattr(split, part), d / f"{part}.jsonl")
    (d / "split.json").write_text(
        json.dumps({"fractions": list(split.fractions), "seed": split.seed, "sizes": {
            p: len(getattr(split, p)) for p in ("train", "val", "test")}}, indent=2) + "\n"
    )


def load_split(directory: str | Path) -> DatasetSplit:
    d = Path(directory)
    meta = json.loads((d / "split.json").read_text()) if (d / "split.json").exists() else {}
    return DatasetSplit(
        load_jsonl(d / "train.jsonl"),
        load_jsonl(d / "val.jsonl"),
        load_jsonl(d / "test.jsonl"),
        tuple(meta.get("fractions", (0.8, 0.1, 0.1))),
        int(meta.get("seed", 0)),
    )
