"""Surrogate regressors mapping nodal loads to device setpoints.

Two model kinds share one container (``TrainedRegressor``): a ReLU MLP
trained with Adam on mean squared error, and an ordinary least squares
baseline. Inputs are standardised and targets min-max scaled with
training-split statistics; ``predict`` always returns target units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from xrpo.dataset import DatasetSplit
from xrpo.network import NetworkModel
from xrpo.powerflow import ControlVector


class TrainingError(RuntimeError):
    pass


@runtime_checkable
class Predictor(Protocol):
    name: str

    @property
    def input_dim(self) -> int: ...

    @property
    def output_dim(self) -> int: ...

    def predict(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class FunctionPredictor:
    """Wrap a vectorised callable ``(N, p) -> (N, k)`` as a Predictor."""

    fn: Callable[[np.ndarray], np.ndarray]
    input_dim: int
    output_dim: int = 1
    name: str = "function"

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        single = x.ndim == 1
        out = np.asarray(self.fn(np.atleast_2d(x)), float).reshape(-1, self.output_dim)
        return out[0] if single else out


@dataclass
class MlpHyper:
    hidden_sizes: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    epochs: int = 200
    batch: int = 32
    patience: int = 20
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class TrainedRegressor:
    kind: str
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    train_seed: int = 0
    train_metrics: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    name: str = "mlp"

    def __post_init__(self):
        sizes = self.layer_sizes
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ValueError(f"layer {k} shape {w.shape} does not chain {sizes[k]} -> {sizes[k + 1]}")
        if np.any(self.x_std <= 0) or np.any(self.y_max <= self.y_min):
            raise ValueError("scalers must be invertible")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def scale_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def scale_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_min) / (self.y_max - self.y_min)

    def unscale_y(self, ys: np.ndarray) -> np.ndarray:
        return self.y_min + ys * (self.y_max - self.y_min)

    def predict_scaled(self, xs: np.ndarray) -> np.ndarray:
        a = xs
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if k < last:
                a = np.maximum(a, 0.0)
        return a

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Raw outputs in target units. Accepts one vector or a (N, p) batch."""
        x = np.asarray(x, float)
        single = x.ndim == 1
        out = self.unscale_y(self.predict_scaled(self.scale_x(np.atleast_2d(x))))
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "architecture": list(self.layer_sizes),
            "activation": "relu",
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "x_scaler": {"mean": self.x_mean.tolist(), "std": self.x_std.tolist()},
            "y_scaler": {"min": self.y_min.tolist(), "max": self.y_max.tolist()},
            "train_seed": self.train_seed,
            "train_metrics": self.train_metrics,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainedRegressor:
        sizes = [int(s) for s in d["architecture"]]
        weights = [np.asarray(w, float).reshape(sizes[k], sizes[k + 1]) for k, w in enumerate(d["weights"])]
        return cls(
            kind=d["kind"],
            layer_sizes=sizes,
            weights=weights,
            biases=[np.asarray(b, float) for b in d["biases"]],
            x_mean=np.asarray(d["x_scaler"]["mean"], float),
            x_std=np.asarray(d["x_scaler"]["std"], float),
            y_min=np.asarray(d["y_scaler"]["min"], float),
            y_max=np.asarray(d["y_scaler"]["max"], float),
            train_seed=int(d.get("train_seed", 0)),
            train_metrics=d.get("train_metrics", {}),
            notes=list(d.get("notes", [])),
            name=d.get("name", d["kind"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> TrainedRegressor:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: not a valid model file ({exc})") from exc


# -- scaling ------------------------------------------------------------------


def _fit_scalers(x: np.ndarray, y: np.ndarray):
    x_mean = x.mean(axis=0)
    x_std = x.std(axis=0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    y_min = y.min(axis=0)
    y_max = y.max(axis=0)
    # constant targets: unit range keeps the scaler invertible, scaled target is 0
    y_max = np.where(y_max > y_min, y_max, y_min + 1.0)
    return x_mean, x_std, y_min, y_max


# -- MLP forward / backward ---------------------------------------------------


def mlp_forward(weights, biases, xs):
    """Forward pass keeping pre-activations for backprop."""
    acts = [xs]
    pre = []
    a = xs
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if k < last else z
        acts.append(a)
    return a, (acts, pre)


def mlp_backward(weights, cache, d_out):
    """Gradients of a scalar loss given dL/d(output)."""
    acts, pre = cache
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = d_out
    for k in range(len(weights) - 1, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ weights[k].T) * (pre[k - 1] > 0)
    return grads_w, grads_b


def mse_loss_and_grad(weights, biases, xs, ys):
    out, cache = mlp_forward(weights, biases, xs)
    diff = out - ys
    loss = float(np.mean(diff**2))
    d_out = 2.0 * diff / diff.size
    gw, gb = mlp_backward(weights, cache, d_out)
    return loss, gw, gb


def init_mlp(sizes: Sequence[int], rng: np.random.Generator):
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        fan_in = sizes[k]
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(sizes[k], sizes[k + 1])))
        biases.append(np.zeros(sizes[k + 1]))
    return weights, biases


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _mae_per_output(model: TrainedRegressor, x: np.ndarray, y: np.ndarray) -> dict:
    if len(x) == 0:
        return {}
    pred = model.predict(x)
    raw = np.mean(np.abs(pred - y), axis=0)
    scaled = np.mean(np.abs(model.scale_y(pred) - model.scale_y(y)), axis=0)
    return {"mae": raw.tolist(), "mae_scaled": scaled.tolist()}


def train_mlp_arrays(
    x_tr: np.ndarray, y_tr: np.ndarray, x_va: np.ndarray, y_va: np.ndarray, hyper: MlpHyper = MlpHyper()
) -> TrainedRegressor:
    if len(x_tr) == 0:
        raise TrainingError("training split is empty")
    x_mean, x_std, y_min, y_max = _fit_scalers(x_tr, y_tr)
    xs = (x_tr - x_mean) / x_std
    ys = (y_tr - y_min) / (y_max - y_min)
    has_val = len(x_va) > 0
    xv = (x_va - x_mean) / x_std if has_val else xs
    yv = (y_va - y_min) / (y_max - y_min) if has_val else ys

    rng = np.random.default_rng(hyper.seed)
    sizes = [x_tr.shape[1], *hyper.hidden_sizes, y_tr.shape[1]]
    weights, biases = init_mlp(sizes, rng)
    # constant targets get a bias-only fit: their output column is frozen at 0 (= y_min)
    const = y_tr.min(axis=0) == y_tr.max(axis=0)
    weights[-1][:, const] = 0.0
    params = weights + biases
    opt = _Adam(params, hyper.lr)
    n_layers = len(weights)

    best = (np.inf, [p.copy() for p in params], 0)
    stale = 0
    history = []
    for epoch in range(1, hyper.epochs + 1):
        perm = rng.permutation(len(xs))
        for start in range(0, len(xs), hyper.batch):
            idx = perm[start : start + hyper.batch]
            loss, gw, gb = mse_loss_and_grad(weights, biases, xs[idx], ys[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}")
            if hyper.weight_decay:
                gw = [g + hyper.weight_decay * w for g, w in zip(gw, weights)]
            gw[-1][:, const] = 0.0
            gb[-1][const] = 0.0
            opt.step(params, gw + gb)
        out, _ = mlp_forward(weights, biases, xv)
        val_loss = float(np.mean((out - yv) ** 2))
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss became {val_loss} at epoch {epoch}")
        history.append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, [p.copy() for p in params], epoch)
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break

    kept = best[1]
    model = TrainedRegressor(
        kind="mlp",
        layer_sizes=sizes,
        weights=kept[:n_layers],
        biases=kept[n_layers:],
        x_mean=x_mean,
        x_std=x_std,
        y_min=y_min,
        y_max=y_max,
        train_seed=hyper.seed,
        name="mlp",
    )
    model.train_metrics = {
        "best_epoch": best[2],
        "epochs_run": len(history),
        "val_mse_scaled": best[0],
        "val": _mae_per_output(model, x_va, y_va) if has_val else {},
        "train": _mae_per_output(model, x_tr, y_tr),
        "hyper": {**hyper.__dict__, "hidden_sizes": list(hyper.hidden_sizes)},
    }
    return model


def train_mlp(split: DatasetSplit, hyper: MlpHyper = MlpHyper()) -> TrainedRegressor:
    """Fit the MLP on ``split.train``, early-stopping on ``split.val``."""
    if not split.train:
        raise TrainingError("training split is empty")
    x_tr, y_tr = split.arrays("train")
    x_va, y_va = split.arrays("val") if split.val else (np.zeros((0, x_tr.shape[1])), np.zeros((0, y_tr.shape[1])))
    return train_mlp_arrays(x_tr, y_tr, x_va, y_va, hyper)


def train_linear_arrays(
    x_tr: np.ndarray, y_tr: np.ndarray, x_va: np.ndarray | None = None, y_va: np.ndarray | None = None
) -> TrainedRegressor:
    if len(x_tr) == 0:
        raise TrainingError("training split is empty")
    x_mean, x_std, y_min, y_max = _fit_scalers(x_tr, y_tr)
    xs = (x_tr - x_mean) / x_std
    ys = (y_tr - y_min) / (y_max - y_min)
    design = np.hstack([xs, np.ones((len(xs), 1))])
    notes = []
    if np.linalg.matrix_rank(design) < design.shape[1]:
        lam = 1e-6
        coef = np.linalg.solve(design.T @ design + lam * np.eye(design.shape[1]), design.T @ ys)
        notes.append(f"rank-deficient design matrix: ridge fallback with lambda={lam:g}")
    else:
        coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
    model = TrainedRegressor(
        kind="linear",
        layer_sizes=[x_tr.shape[1], y_tr.shape[1]],
        weights=[coef[:-1]],
        biases=[coef[-1]],
        x_mean=x_mean,
        x_std=x_std,
        y_min=y_min,
        y_max=y_max,
        notes=notes,
        name="linear",
    )
    model.train_metrics = {"train": _mae_per_output(model, x_tr, y_tr)}
    if x_va is not None and len(x_va):
        model.train_metrics["val"] = _mae_per_output(model, x_va, y_va)
    return model


def train_linear(split: DatasetSplit) -> TrainedRegressor:
    """Ordinary least squares per output through the same scaling pipeline."""
    if not split.train:
        raise TrainingError("training split is empty")
    x_tr, y_tr = split.arrays("train")
    x_va, y_va = split.arrays("val") if split.val else (None, None)
    return train_linear_arrays(x_tr, y_tr, x_va, y_va)


def linear_coefficients(model: TrainedRegressor) -> tuple[np.ndarray, np.ndarray]:
    """Raw-unit (coef (k, p), intercept (k,)) of a linear model."""
    if model.kind != "linear":
        raise ValueError("only linear models have coefficients")
    span = model.y_max - model.y_min
    coef = (model.weights[0] / model.x_std[:, None] * span[None, :]).T
    intercept = model.y_min + span * model.biases[0] - coef @ model.x_mean
    return coef, intercept


# -- decoding -----------------------------------------------------------------


def decode_outputs(raw: np.ndarray, net: NetworkModel, dg_p_kw: Sequence[float]) -> ControlVector:
    """Round and clamp raw regression outputs onto the device lattice."""
    raw = np.asarray(raw, float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite regression output")
    n_cb = len(net.capacitor_banks)
    t = net.transformer
    tap = int(np.clip(np.round(raw[0]), t.tap_min, t.tap_max)) if t else 0
    steps = tuple(int(np.clip(np.round(v), 0, c.n_steps)) for v, c in zip(raw[1 : 1 + n_cb], net.capacitor_banks))
    qs = []
    for v, dg, p in zip(raw[1 + n_cb :], net.dg_units, dg_p_kw):
        cap = dg.q_capability(p)
        qs.append(float(np.clip(v, -cap, cap)))
    return ControlVector(tap, steps, tuple(qs))


def predict_decoded(
    model: Predictor, x: np.ndarray, net: NetworkModel, dg_p_kw: Sequence[float] | None = None
) -> ControlVector:
    """Predict and decode one control vector.

    DG capability uses ``dg_p_kw`` (the evaluation scenario's active outputs)
    or, when absent, each unit's expected output under the sampling model.
    """
    x = np.asarray(x, float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input features")
    if dg_p_kw is None:
        from xrpo.dataset import expected_dg_output

        dg_p_kw = expected_dg_output(net)
    return decode_outputs(model.predict(x), net, dg_p_kw)
