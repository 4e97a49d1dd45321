"""Backward-forward sweep power flow for radial feeders.

The solver is vectorised over a batch of operating points so the genetic
algorithm can evaluate a whole population in one call; ``solve_power_flow``
is the single-case wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from xrpo.network import ControlDimensionError, NetworkModel, validate_controls

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoadScenario:
    """Nodal loads of buses 2..m plus DG active outputs for one operating point."""

    p_kw: tuple[float, ...]
    q_kvar: tuple[float, ...]
    dg_p_kw: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p_kw", tuple(float(v) for v in self.p_kw))
        object.__setattr__(self, "q_kvar", tuple(float(v) for v in self.q_kvar))
        object.__setattr__(self, "dg_p_kw", tuple(float(v) for v in self.dg_p_kw))
        if len(self.p_kw) != len(self.q_kvar):
            raise ValueError("p_kw and q_kvar differ in length")
        if min(self.p_kw + self.q_kvar, default=0.0) < 0:
            raise ValueError("loads must be non-negative")

    @classmethod
    def base(cls, net: NetworkModel, dg_p_kw: Sequence[float] | None = None) -> LoadScenario:
        """The network's own base loads; DG outputs default to each unit's ``p_kw``."""
        dg = [d.p_kw for d in net.dg_units] if dg_p_kw is None else dg_p_kw
        return cls(tuple(net.base_p_kw), tuple(net.base_q_kvar), tuple(dg))

    def scaled(self, factor: float) -> LoadScenario:
        return LoadScenario(
            tuple(v * factor for v in self.p_kw), tuple(v * factor for v in self.q_kvar), self.dg_p_kw, self.seed
        )

    @property
    def total_p_kw(self) -> float:
        return float(sum(self.p_kw))

    def features(self) -> np.ndarray:
        """Regressor input: P of buses 2..m followed by Q of buses 2..m."""
        return np.array(self.p_kw + self.q_kvar)

    def check(self, net: NetworkModel) -> None:
        if len(self.p_kw) != net.m - 1:
            raise ControlDimensionError(f"scenario has {len(self.p_kw)} loads, network has {net.m - 1} load buses")
        if len(self.dg_p_kw) != len(net.dg_units):
            raise ControlDimensionError(
                f"scenario has {len(self.dg_p_kw)} DG outputs, network has {len(net.dg_units)} units"
            )
        for d, p in zip(net.dg_units, self.dg_p_kw):
            if not 0 <= p <= d.s_kva + 1e-9:
                raise ValueError(f"DG output {p} kW at bus {d.at_bus} outside [0, {d.s_kva}]")

    def to_dict(self) -> dict:
        return {"p_kw": list(self.p_kw), "q_kvar": list(self.q_kvar), "dg_p_kw": list(self.dg_p_kw), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> LoadScenario:
        return cls(tuple(d["p_kw"]), tuple(d["q_kvar"]), tuple(d.get("dg_p_kw", ())), int(d.get("seed", 0)))


@dataclass(frozen=True)
class ControlVector:
    """Tap position, per-bank step counts and per-DG reactive output (kvar)."""

    tap: int = 0
    cb_steps: tuple[int, ...] = ()
    dg_q_kvar: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "cb_steps", tuple(int(v) for v in self.cb_steps))
        object.__setattr__(self, "dg_q_kvar", tuple(float(v) for v in self.dg_q_kvar))

    @classmethod
    def zeros(cls, net: NetworkModel) -> ControlVector:
        return cls(0, (0,) * len(net.capacitor_banks), (0.0,) * len(net.dg_units))

    def to_array(self) -> np.ndarray:
        return np.array([float(self.tap), *map(float, self.cb_steps), *self.dg_q_kvar])

    @classmethod
    def from_array(cls, net: NetworkModel, arr: Sequence[float]) -> ControlVector:
        arr = list(arr)
        n_cb, n_dg = len(net.capacitor_banks), len(net.dg_units)
        if len(arr) != 1 + n_cb + n_dg:
            raise ControlDimensionError(f"expected {1 + n_cb + n_dg} control values, got {len(arr)}")
        return cls(int(round(arr[0])), tuple(int(round(v)) for v in arr[1 : 1 + n_cb]), tuple(arr[1 + n_cb :]))

    def to_dict(self) -> dict:
        return {"tap": self.tap, "cb_steps": list(self.cb_steps), "dg_q_kvar": list(self.dg_q_kvar)}

    @classmethod
    def from_dict(cls, d: dict) -> ControlVector:
        return cls(int(d["tap"]), tuple(d.get("cb_steps", ())), tuple(d.get("dg_q_kvar", ())))


@dataclass
class PowerFlowResult:
    v_pu: np.ndarray
    theta_rad: np.ndarray
    i_a: np.ndarray
    loss_kw: float
    du_pu: float
    converged: bool
    iterations: int
    tap_ratio: float = 1.0
    branch_loss_kw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slack_p_kw: float = 0.0
    slack_q_kvar: float = 0.0

    def to_dict(self, net: NetworkModel) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "loss_kw": self.loss_kw,
            "du_pu": self.du_pu,
            "tap_ratio": self.tap_ratio,
            "slack_p_kw": self.slack_p_kw,
            "slack_q_kvar": self.slack_q_kvar,
            "v_pu": {str(b.id): float(v) for b, v in zip(net.buses, self.v_pu)},
            "theta_rad": {str(b.id): float(t) for b, t in zip(net.buses, self.theta_rad)},
            "i_a": {str(k): float(i) for k, i in enumerate(self.i_a, start=1)},
            "branch_loss_kw": {str(k): float(x) for k, x in enumerate(self.branch_loss_kw, start=1)},
        }


@dataclass
class BatchFlow:
    """Power-flow results for k operating points; bus axis covers all m buses."""

    v: np.ndarray  # (k, m) complex, p.u.
    i_branch: np.ndarray  # (k, n) complex, p.u.
    loss_kw: np.ndarray  # (k,)
    du_pu: np.ndarray  # (k,)
    converged: np.ndarray  # (k,) bool
    iterations: int
    ratio: np.ndarray  # (k,)


def _tap_step(net: NetworkModel) -> float:
    return net.transformer.tap_step_frac if net.transformer is not None else 0.0


def injection_maps(net: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """Matrices placing device quantities on non-slack buses.

    The first maps [bank steps..., DG kvar...] to injected kvar per bus, the
    second maps DG active outputs to injected kW per bus.
    """
    q_map = np.zeros((len(net.capacitor_banks) + len(net.dg_units), net.m - 1))
    for j, bank in enumerate(net.capacitor_banks):
        q_map[j, bank.at_bus - 2] = bank.kvar_per_step
    p_map = np.zeros((len(net.dg_units), net.m - 1))
    for j, dg in enumerate(net.dg_units):
        q_map[len(net.capacitor_banks) + j, dg.at_bus - 2] = 1.0
        p_map[j, dg.at_bus - 2] = 1.0
    return q_map, p_map


def demand_pu(net: NetworkModel, p_kw, q_kvar, dg_p_kw, q_devices) -> np.ndarray:
    """Net complex demand (k, m-1) in p.u. with device outputs as negative loads."""
    q_map, p_map = injection_maps(net)
    p = p_kw - dg_p_kw @ p_map
    q = q_kvar - q_devices @ q_map
    return (p + 1j * q) / (net.base_mva * 1e3)


def source_voltages(net: NetworkModel, taps: np.ndarray) -> np.ndarray:
    """Per-bus source voltage (k, m-1): the tap ratio downstream of the transformer, else 1."""
    ratio = 1.0 + np.asarray(taps, float) * _tap_step(net)
    return np.where(net.tree.tx_mask[None, :], ratio[:, None], 1.0).astype(complex)


def sweep(
    net: NetworkModel, s_pu: np.ndarray, v_src: np.ndarray, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
):
    """Core backward-forward iteration on constant-PQ demands ``s_pu`` (k, m-1).

    Returns non-slack voltages, branch currents, per-row convergence flags
    and the iteration count. The branch currents are the ones that produced
    the returned voltages, so branch drops equal Z*I exactly.
    """
    tree = net.tree
    z_pu = tree.z_pu
    v = v_src.copy()
    i_br = np.zeros((s_pu.shape[0], net.n), complex)
    active = np.ones(s_pu.shape[0], bool)
    it = 0
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            i_inj = np.conj(s_pu / v)
            i_br = i_inj @ tree.path_ct
            v_new = v_src - (i_br * z_pu) @ tree.path_c
            dv = np.max(np.abs(v_new - v), axis=1)
            v = v_new
            active = ~(dv < tol)
            if not active.any():
                break
    return v, i_br, ~active, it


def solve_batch(
    net: NetworkModel,
    p_kw: np.ndarray,
    q_kvar: np.ndarray,
    dg_p_kw: np.ndarray,
    taps: np.ndarray,
    cb_steps: np.ndarray,
    dg_q_kvar: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> BatchFlow:
    """Sweep k operating points at once. Array leading axis is the batch axis."""
    k = np.shape(taps)[0]
    s_base_kva = net.base_mva * 1e3

    p = np.broadcast_to(np.asarray(p_kw, float), (k, net.m - 1))
    q = np.broadcast_to(np.asarray(q_kvar, float), (k, net.m - 1))
    dgp = np.broadcast_to(np.asarray(dg_p_kw, float), (k, len(net.dg_units)))
    q_dev = np.hstack([np.asarray(cb_steps, float).reshape(k, -1), np.asarray(dg_q_kvar, float).reshape(k, -1)])
    s_pu = demand_pu(net, p, q, dgp, q_dev)

    v_src = source_voltages(net, taps)
    v, i_br, converged, it = sweep(net, s_pu, v_src, tol, max_iter)
    ratio = 1.0 + np.asarray(taps, float) * _tap_step(net)
    v_all = np.concatenate([np.ones((k, 1), complex), v], axis=1)
    r_pu = net.tree.z_pu.real
    loss_kw = (np.abs(i_br) ** 2 * r_pu).sum(axis=1) * s_base_kva
    du = np.abs(1.0 - np.abs(v_all)).mean(axis=1)
    return BatchFlow(v_all, i_br, loss_kw, du, converged, it, ratio)


def _check_inputs(net: NetworkModel, scenario: LoadScenario, controls: ControlVector) -> None:
    scenario.check(net)
    if len(controls.cb_steps) != len(net.capacitor_banks) or len(controls.dg_q_kvar) != len(net.dg_units):
        raise ControlDimensionError(
            f"controls need {len(net.capacitor_banks)} bank steps and {len(net.dg_units)} DG settings"
        )


def solve_power_flow(
    net: NetworkModel,
    scenario: LoadScenario,
    controls: ControlVector | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowResult:
    """Steady-state solution of one operating point.

    Capacitor and DG injections enter as negative constant-PQ loads; the tap
    scales the sending-end voltage of the transformer branch. A run that does
    not converge within ``max_iter`` returns ``converged=False`` with the last
    iterate.
    """
    controls = ControlVector.zeros(net) if controls is None else controls
    _check_inputs(net, scenario, controls)
    bf = solve_batch(
        net,
        np.array([scenario.p_kw]),
        np.array([scenario.q_kvar]),
        np.array([scenario.dg_p_kw]),
        np.array([controls.tap]),
        np.array([controls.cb_steps]),
        np.array([controls.dg_q_kvar]),
        tol=tol,
        max_iter=max_iter,
    )
    s_base_kva = net.base_mva * 1e3
    v = bf.v[0]
    i_br = bf.i_branch[0]
    r_pu = np.array([br.r_ohm for br in net.branches]) / net.z_base_ohm
    branch_loss = np.abs(i_br) ** 2 * r_pu * s_base_kva

    tree = net.tree
    roots = np.flatnonzero(tree.parent == 0)
    send = np.ones(len(roots), complex)
    if net.transformer is not None:
        send[roots == net.transformer.at_branch - 1] = bf.ratio[0]
    s_slack = (send * np.conj(i_br[roots])).sum() * s_base_kva
    return PowerFlowResult(
        v_pu=np.abs(v),
        theta_rad=np.angle(v),
        i_a=np.abs(i_br) * net.i_base_a,
        loss_kw=float(bf.loss_kw[0]),
        du_pu=float(bf.du_pu[0]),
        converged=bool(bf.converged[0]),
        iterations=bf.iterations,
        tap_ratio=float(bf.ratio[0]),
        branch_loss_kw=branch_loss,
        slack_p_kw=float(s_slack.real),
        slack_q_kvar=float(s_slack.imag),
    )


def _require_converged(result: PowerFlowResult) -> None:
    if not result.converged:
        raise ConvergenceError("power flow did not converge")


def voltage_deviation(result: PowerFlowResult, net: NetworkModel) -> float:
    """Mean absolute per-unit deviation from the 1.0 p.u. base over all m buses."""
    _require_converged(result)
    u0 = 1.0
    return float(np.mean(np.abs((u0 - result.v_pu) / u0)))


def power_loss(result: PowerFlowResult, net: NetworkModel) -> float:
    """Total active loss (kW) from branch conductances and end voltages.

    Independent of the branch currents, so it cross-checks ``result.loss_kw``
    (which is accumulated as I^2 R).
    """
    _require_converged(result)
    tree = net.tree
    z = np.array([complex(br.r_ohm, br.x_ohm) for br in net.branches]) / net.z_base_ohm
    g = (1.0 / z).real
    ui = result.v_pu[tree.parent].copy()
    if net.transformer is not None:
        ui[net.transformer.at_branch - 1] *= result.tap_ratio
    uj = result.v_pu[tree.child]
    dth = result.theta_rad[tree.parent] - result.theta_rad[tree.child]
    loss_pu = np.sum(g * (ui**2 + uj**2 - 2 * ui * uj * np.cos(dth)))
    return float(loss_pu * net.base_mva * 1e3)


def nodal_mismatch(net: NetworkModel, scenario: LoadScenario, controls: ControlVector, result: PowerFlowResult) -> float:
    """Largest complex power mismatch (p.u.) over non-slack buses."""
    tree = net.tree
    v = result.v_pu * np.exp(1j * result.theta_rad)
    z = np.array([complex(br.r_ohm, br.x_ohm) for br in net.branches]) / net.z_base_ohm
    send = v[tree.parent].copy()
    if net.transformer is not None:
        send[net.transformer.at_branch - 1] *= result.tap_ratio
    i_br = (send - v[tree.child]) / z
    # injected current into each non-slack bus = inflow - outflow
    inj = np.zeros(net.m, complex)
    np.add.at(inj, tree.child, i_br)
    np.add.at(inj, tree.parent, -i_br)
    s_drawn = v * np.conj(inj)
    p = np.array(scenario.p_kw, float)
    q = np.array(scenario.q_kvar, float)
    for bank, k in zip(net.capacitor_banks, controls.cb_steps):
        q[bank.at_bus - 2] -= k * bank.kvar_per_step
    for dg, pg, qg in zip(net.dg_units, scenario.dg_p_kw, controls.dg_q_kvar):
        p[dg.at_bus - 2] -= pg
        q[dg.at_bus - 2] -= qg
    s_load = (p + 1j * q) / (net.base_mva * 1e3)
    return float(np.max(np.abs(s_drawn[1:] - s_load)))


def check_controls(net: NetworkModel, scenario: LoadScenario, controls: ControlVector):
    """Device-bound violations using the scenario's DG active outputs."""
    return validate_controls(net, controls, scenario.dg_p_kw)
