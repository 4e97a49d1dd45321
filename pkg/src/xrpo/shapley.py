"""Feature attributions for any predictor output.

``exact_shapley`` enumerates every coalition; coalition values are
marginal expectations over a background set (out-of-coalition features
take background values, predictions are averaged). ``kernel_shapley``
avoids the enumeration: for each feature it swaps in the background
values of that feature alone and averages the resulting prediction drops
with normalised Gaussian-kernel weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from xrpo.regressor import Predictor

MAX_EXACT_FEATURES = 20


class ShapleyError(ValueError):
    pass


@dataclass
class ValueFunctionConfig:
    background: np.ndarray

    def __post_init__(self):
        self.background = np.atleast_2d(np.asarray(self.background, float))
        if self.background.shape[0] < 1 or self.background.size == 0:
            raise ShapleyError("background set is empty")


@dataclass
class KernelConfig:
    background: np.ndarray
    sigma: float | str = "median"

    def __post_init__(self):
        self.background = np.atleast_2d(np.asarray(self.background, float))
        if self.background.shape[0] < 1 or self.background.size == 0:
            raise ShapleyError("background set is empty")
        if not isinstance(self.sigma, str) and not self.sigma > 0:
            raise ShapleyError(f"kernel bandwidth must be positive, got {self.sigma}")
        if isinstance(self.sigma, str) and self.sigma != "median":
            raise ShapleyError(f"unknown bandwidth mode {self.sigma!r}")

    def bandwidth(self) -> float:
        if not isinstance(self.sigma, str):
            return float(self.sigma)
        return median_bandwidth(self.background)


@dataclass
class ShapleyAttribution:
    phi: np.ndarray
    phi0: float
    output_dim: int
    instance: np.ndarray
    method: str
    prediction: float
    reconstruction_residual: float
    sigma: float | None = None
    degenerate_kernel: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "phi": [float(v) for v in self.phi],
            "phi0": float(self.phi0),
            "output_dim": self.output_dim,
            "instance": [float(v) for v in self.instance],
            "method": self.method,
            "prediction": float(self.prediction),
            "reconstruction_residual": float(self.reconstruction_residual),
            "sigma": self.sigma,
            "degenerate_kernel": self.degenerate_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ShapleyAttribution:
        return cls(
            phi=np.asarray(d["phi"], float),
            phi0=float(d["phi0"]),
            output_dim=int(d["output_dim"]),
            instance=np.asarray(d["instance"], float),
            method=d["method"],
            prediction=float(d["prediction"]),
            reconstruction_residual=float(d["reconstruction_residual"]),
            sigma=d.get("sigma"),
            degenerate_kernel=bool(d.get("degenerate_kernel", False)),
        )


def median_bandwidth(background: np.ndarray) -> float:
    """Median pairwise Euclidean distance among background rows (1.0 if undefined)."""
    bg = np.asarray(background, float)
    if len(bg) < 2:
        return 1.0
    sq = np.sum(bg**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * bg @ bg.T, 0.0)
    iu = np.triu_indices(len(bg), k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def make_background(x_train: np.ndarray, size: int = 100, seed: int = 0) -> np.ndarray:
    """Seeded subsample (without replacement) of the training inputs."""
    x_train = np.asarray(x_train, float)
    if len(x_train) <= size:
        return x_train.copy()
    idx = np.random.default_rng(seed).choice(len(x_train), size=size, replace=False)
    return x_train[np.sort(idx)]


def _predict_dim(predictor: Predictor, rows: np.ndarray, output_dim: int) -> np.ndarray:
    out = np.asarray(predictor.predict(rows), float)
    if out.ndim == 1:
        out = out.reshape(len(rows), -1)
    return out[:, output_dim]


def _check_instance(predictor: Predictor, instance, background: np.ndarray) -> np.ndarray:
    x = np.asarray(instance, float).ravel()
    if background.shape[1] != x.size:
        raise ShapleyError(f"background has {background.shape[1]} features, instance has {x.size}")
    if predictor.input_dim != x.size:
        raise ShapleyError(f"predictor expects {predictor.input_dim} features, instance has {x.size}")
    return x


def value_function(
    predictor: Predictor, instance, subset: Iterable[int], config: ValueFunctionConfig, output_dim: int = 0
) -> float:
    """Mean prediction with features in ``subset`` fixed to the instance values."""
    bg = config.background
    x = _check_instance(predictor, instance, bg)
    mask = np.zeros(x.size, bool)
    idx = list(subset)
    if idx and (min(idx) < 0 or max(idx) >= x.size):
        raise ShapleyError(f"subset {idx} outside feature range 0..{x.size - 1}")
    mask[idx] = True
    rows = np.where(mask[None, :], x[None, :], bg)
    return float(np.mean(_predict_dim(predictor, rows, output_dim)))


def coalition_values(predictor: Predictor, x: np.ndarray, background: np.ndarray, output_dim: int) -> np.ndarray:
    """v[mask] for every coalition bitmask (bit j set = feature j in coalition)."""
    p = x.size
    n_mask = 1 << p
    bits = ((np.arange(n_mask)[:, None] >> np.arange(p)[None, :]) & 1).astype(bool)
    M = len(background)
    values = np.empty(n_mask)
    chunk = max(1, 200_000 // M)
    for start in range(0, n_mask, chunk):
        b = bits[start : start + chunk]
        rows = np.where(b[:, None, :], x[None, None, :], background[None, :, :]).reshape(-1, p)
        values[start : start + len(b)] = _predict_dim(predictor, rows, output_dim).reshape(len(b), M).mean(axis=1)
    return values


def exact_shapley(predictor: Predictor, instance, output_dim: int, config: ValueFunctionConfig) -> ShapleyAttribution:
    """Shapley values by summing weighted marginal contributions over all coalitions."""
    bg = config.background
    x = _check_instance(predictor, instance, bg)
    p = x.size
    if p > MAX_EXACT_FEATURES:
        raise ShapleyError(
            f"{p} features exceed the exact-enumeration limit of {MAX_EXACT_FEATURES}; use the kernel method"
        )
    v = coalition_values(predictor, x, bg, output_dim)
    masks = np.arange(1 << p)
    sizes = np.array([bin(m).count("1") for m in range(1 << p)])
    weight_by_size = np.array([math.factorial(p - s - 1) * math.factorial(s) / math.factorial(p) for s in range(p)])
    phi = np.empty(p)
    for j in range(p):
        without = masks[(masks >> j) & 1 == 0]
        phi[j] = np.sum(weight_by_size[sizes[without]] * (v[without | (1 << j)] - v[without]))
    phi0 = float(v[0])
    fx = float(_predict_dim(predictor, x[None, :], output_dim)[0])
    residual = abs(phi0 + float(np.sum(phi)) - fx)
    return ShapleyAttribution(phi, phi0, output_dim, x, "exact", fx, residual)


def _kernel_phi(predictor: Predictor, x: np.ndarray, bg: np.ndarray, sigma: float):
    """Per-feature kernel estimates for every output dimension at once.

    Returns (phi (k, p), f(x) (k,), baseline (k,), degenerate flags (p,)).
    """
    M, p = bg.shape
    # variants[i, j] = x with feature i replaced by background row j's value
    variants = np.broadcast_to(x, (p, M, p)).copy()
    ar = np.arange(p)
    variants[ar, :, ar] = bg.T
    flat = variants.reshape(-1, p)
    out = np.asarray(predictor.predict(np.vstack([x[None, :], flat, bg])), float)
    if out.ndim == 1:
        out = out[:, None]
    fx = out[0]
    f_var = out[1 : 1 + p * M].reshape(p, M, -1)
    baseline = out[1 + p * M :].mean(axis=0)

    # weight of variant j: kernel between the variant and its source background row
    d2 = np.sum((variants - bg[None, :, :]) ** 2, axis=2)  # (p, M)
    k = np.exp(d2 / (-2.0 * sigma**2))
    total = k.sum(axis=1)
    degenerate = ~(total > 0)
    w = np.where(degenerate[:, None], 1.0 / M, k / np.where(degenerate, 1.0, total)[:, None])
    drop = fx[None, None, :] - f_var
    # a swap that leaves the instance unchanged cannot move a pure predictor;
    # pin it so blocked BLAS kernels cannot leak rounding noise into phi
    drop[bg.T == x[:, None]] = 0.0
    phi = np.einsum("im,imk->ki", w, drop)
    return phi, fx, baseline, degenerate


def kernel_shapley(predictor: Predictor, instance, output_dim: int, kcfg: KernelConfig) -> ShapleyAttribution:
    """Gaussian-kernel estimate of the Shapley value of each feature.

    For feature i, the background values of i are swapped into the instance
    one row at a time; each resulting prediction drop f(x) - f(x_-i) is
    weighted by the normalised kernel between the variant and the background
    row it came from. Efficiency is not guaranteed: the gap between
    phi0 + sum(phi) and f(x) is recorded, not assumed away.
    """
    return kernel_shapley_all(predictor, instance, kcfg)[output_dim]


def kernel_shapley_all(predictor: Predictor, instance, kcfg: KernelConfig) -> list[ShapleyAttribution]:
    """``kernel_shapley`` for every output dimension from one batch of predictions."""
    bg = kcfg.background
    x = _check_instance(predictor, instance, bg)
    sigma = kcfg.bandwidth()
    phi, fx, baseline, degenerate = _kernel_phi(predictor, x, bg, sigma)
    out = []
    for d in range(phi.shape[0]):
        res = abs(float(baseline[d]) + float(np.sum(phi[d])) - float(fx[d]))
        out.append(
            ShapleyAttribution(
                phi[d].copy(), float(baseline[d]), d, x, "kernel", float(fx[d]), res, sigma, bool(degenerate.any())
            )
        )
    return out


class ExplanationError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"instance {index}: {cause}")
        self.index = index
        self.cause = cause


def explain_batch(
    predictor: Predictor,
    instances: Sequence,
    output_dim: int | None,
    method: str,
    config: ValueFunctionConfig | KernelConfig,
    jobs: int = 1,
) -> list:
    """Attributions for each instance, in order.

    With ``output_dim=None`` every output is explained and each entry is a
    list of per-output attributions.
    """
    if method not in ("exact", "kernel"):
        raise ShapleyError(f"unknown method {method!r}")
    if method == "kernel" and isinstance(config, KernelConfig) and config.sigma == "median":
        # resolve once so every instance shares the same bandwidth
        config = KernelConfig(config.background, config.bandwidth())

    def one(i, x):
        try:
            if method == "kernel":
                allo = kernel_shapley_all(predictor, x, config)
                return allo if output_dim is None else allo[output_dim]
            if output_dim is None:
                return [exact_shapley(predictor, x, d, config) for d in range(predictor.output_dim)]
            return exact_shapley(predictor, x, output_dim, config)
        except Exception as exc:  # re-raised with the instance index
            raise ExplanationError(i, exc) from exc

    if jobs > 1 and len(instances) > 1:
        from joblib import Parallel, delayed

        return list(Parallel(n_jobs=jobs, prefer="threads")(delayed(one)(i, x) for i, x in enumerate(instances)))
    return [one(i, x) for i, x in enumerate(instances)]
