"""Radial feeder model: buses, branches and controllable devices.

Networks are loaded from a JSON file (see ``network_to_dict`` for the
layout) or built from a Baran-Wu style branch table in CSV form.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np

if TYPE_CHECKING:
    from xrpo.powerflow import ControlVector

DEFAULT_I_MAX_A = 400.0


class NetworkError(ValueError):
    """Base class for network loading / validation errors."""

    def __init__(self, message: str, element: Any = None):
        super().__init__(message)
        self.element = element


class NetworkParseError(NetworkError):
    pass


class MissingSlackError(NetworkError):
    pass


class RadialityError(NetworkError):
    pass


class DanglingReferenceError(NetworkError):
    pass


class ControlDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = "load"
    p_load_kw: float = 0.0
    q_load_kvar: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float
    i_max_a: float = DEFAULT_I_MAX_A


@dataclass(frozen=True)
class TransformerDevice:
    at_branch: int = 1
    tap_min: int = -8
    tap_max: int = 8
    tap_step_frac: float = 0.0125

    def ratio(self, tap: float) -> float:
        return 1.0 + tap * self.tap_step_frac

    @property
    def n_taps(self) -> int:
        return self.tap_max - self.tap_min + 1


@dataclass(frozen=True)
class CapacitorBank:
    at_bus: int
    n_steps: int
    kvar_per_step: float = 100.0


@dataclass(frozen=True)
class DgUnit:
    at_bus: int
    kind: str
    s_kva: float
    p_kw: float = 0.0

    def q_capability(self, p_kw: float | None = None) -> float:
        """Largest |Q| (kvar) the inverter can deliver at active output ``p_kw``."""
        p = self.p_kw if p_kw is None else p_kw
        return math.sqrt(max(self.s_kva**2 - p**2, 0.0))


@dataclass(frozen=True)
class Violation:
    """One breached bound. ``magnitude`` is how far past ``limit`` the value is."""

    kind: str
    element: str
    value: float
    limit: float
    magnitude: float

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "element": self.element,
            "value": self.value,
            "limit": self.limit,
            "magnitude": self.magnitude,
        }


@dataclass(frozen=True)
class NetworkModel:
    base_kv: float
    base_mva: float
    v_min_pu: float
    v_max_pu: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    transformer: TransformerDevice | None = None
    capacitor_banks: tuple[CapacitorBank, ...] = ()
    dg_units: tuple[DgUnit, ...] = ()
    name: str = field(default="network", compare=True)

    @property
    def m(self) -> int:
        return len(self.buses)

    @property
    def n(self) -> int:
        return len(self.branches)

    @property
    def n_controls(self) -> int:
        return (1 if self.transformer else 0) + len(self.capacitor_banks) + len(self.dg_units)

    @property
    def z_base_ohm(self) -> float:
        return self.base_kv**2 / self.base_mva

    @property
    def i_base_a(self) -> float:
        return self.base_mva * 1e3 / (math.sqrt(3.0) * self.base_kv)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def base_p_kw(self) -> np.ndarray:
        """Base active loads of buses 2..m (the non-slack buses), in bus order."""
        return np.array([b.p_load_kw for b in self.buses[1:]], dtype=float)

    @cached_property
    def base_q_kvar(self) -> np.ndarray:
        return np.array([b.q_load_kvar for b in self.buses[1:]], dtype=float)

    @cached_property
    def bfs_order(self) -> list[int]:
        """Bus ids in breadth-first order from the slack bus."""
        adj: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        order = [1]
        seen = {1}
        queue = deque([1])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    order.append(v)
                    queue.append(v)
        return order

    @cached_property
    def tree(self) -> "TreeArrays":
        return _tree_arrays(self)

    def feature_names(self) -> list[str]:
        ids = [b.id for b in self.buses[1:]]
        return [f"P{i}" for i in ids] + [f"Q{i}" for i in ids]

    def output_names(self) -> list[str]:
        names = ["tap"] if self.transformer else []
        names += [f"cb{c.at_bus}" for c in self.capacitor_banks]
        prefix = {"wind": "qwt", "pv": "qpv"}
        names += [f"{prefix.get(d.kind, 'qdg')}{d.at_bus}" for d in self.dg_units]
        return names


@dataclass(frozen=True)
class TreeArrays:
    """Index arrays describing the radial tree, branches in file order.

    ``path[b, c]`` is 1 when branch ``b`` lies on the path from the slack bus
    to non-slack bus ``c`` (bus id ``c + 2``). The same matrix sums injected
    currents into branch currents (transpose) and accumulates branch drops
    into bus voltages.
    """

    child: np.ndarray  # bus index (0-based) of each branch's downstream end
    parent: np.ndarray  # bus index of each branch's upstream end
    path: np.ndarray
    tx_mask: np.ndarray  # non-slack buses fed through the transformer branch
    z_pu: np.ndarray  # complex series impedance per branch
    path_c: np.ndarray  # complex copy of path, avoids a cast per matmul
    path_ct: np.ndarray


def _tree_arrays(net: NetworkModel) -> TreeArrays:
    depth = {bid: k for k, bid in enumerate(net.bfs_order)}
    idx = net.bus_index
    child = np.empty(net.n, dtype=int)
    parent = np.empty(net.n, dtype=int)
    up_branch: dict[int, int] = {}
    for b, br in enumerate(net.branches):
        hi, lo = (br.to_bus, br.from_bus) if depth[br.to_bus] > depth[br.from_bus] else (br.from_bus, br.to_bus)
        child[b], parent[b] = idx[hi], idx[lo]
        up_branch[idx[hi]] = b
    path = np.zeros((net.n, net.m - 1))
    for c in range(1, net.m):
        u = c
        while u != 0:
            b = up_branch[u]
            path[b, c - 1] = 1.0
            u = parent[b]
    if net.transformer is not None:
        tx_mask = path[net.transformer.at_branch - 1].astype(bool)
    else:
        tx_mask = np.zeros(net.m - 1, dtype=bool)
    z_pu = np.array([complex(br.r_ohm, br.x_ohm) for br in net.branches]) / net.z_base_ohm
    path_c = path.astype(complex)
    return TreeArrays(child, parent, path, tx_mask, z_pu, path_c, np.ascontiguousarray(path_c.T))


def _check_radial(buses: Sequence[Bus], branches: Sequence[Branch]) -> None:
    ids = {b.id for b in buses}
    for k, br in enumerate(branches, start=1):
        for end in (br.from_bus, br.to_bus):
            if end not in ids:
                raise DanglingReferenceError(f"branch {k} references unknown bus {end}", element=k)
        if br.r_ohm < 0 or br.x_ohm < 0:
            raise NetworkParseError(f"branch {k} has negative impedance", element=k)

    # union-find: the first branch closing a loop names the cycle
    parent = {i: i for i in ids}

    def find(u: int) -> int:
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for k, br in enumerate(branches, start=1):
        a, b = find(br.from_bus), find(br.to_bus)
        if a == b:
            cycle = _cycle_through(branches[: k - 1], br.from_bus, br.to_bus)
            raise RadialityError(
                f"branch {k} ({br.from_bus}-{br.to_bus}) closes a cycle through buses {cycle}",
                element=k,
            )
        parent[a] = b

    if len(branches) != len(buses) - 1:
        raise RadialityError(
            f"network is not connected: {len(buses)} buses but {len(branches)} branches",
            element=None,
        )


def _cycle_through(branches: Sequence[Branch], start: int, goal: int) -> list[int]:
    adj: dict[int, list[int]] = {}
    for br in branches:
        adj.setdefault(br.from_bus, []).append(br.to_bus)
        adj.setdefault(br.to_bus, []).append(br.from_bus)
    prev = {start: start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if u == goal:
            break
        for v in adj.get(u, []):
            if v not in prev:
                prev[v] = u
                queue.append(v)
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


def validate_network(net: NetworkModel) -> NetworkModel:
    """Check every structural invariant; returns ``net`` unchanged on success."""
    if not net.buses:
        raise MissingSlackError("network has no buses")
    slack = [b for b in net.buses if b.kind == "slack"]
    if len(slack) != 1 or slack[0].id != 1 or net.buses[0].id != 1:
        raise MissingSlackError("exactly one slack bus with id 1 (listed first) is required", element=1)
    ids = [b.id for b in net.buses]
    if ids != list(range(1, len(ids) + 1)):
        raise NetworkParseError("bus ids must be 1..m in order")
    for b in net.buses:
        if b.kind not in ("slack", "load"):
            raise NetworkParseError(f"bus {b.id} has unknown kind {b.kind!r}", element=b.id)
        if b.p_load_kw < 0 or b.q_load_kvar < 0:
            raise NetworkParseError(f"bus {b.id} has a negative base load", element=b.id)
    if not net.v_min_pu < net.v_max_pu:
        raise NetworkParseError("v_min_pu must be below v_max_pu")
    _check_radial(net.buses, net.branches)

    idx = set(ids)
    t = net.transformer
    if t is not None:
        if not 1 <= t.at_branch <= net.n:
            raise DanglingReferenceError(
                f"transformer references unknown branch {t.at_branch}", element=f"transformer:{t.at_branch}"
            )
        if net.branches[t.at_branch - 1].from_bus != 1:
            raise NetworkParseError("transformer must sit on a branch leaving the slack bus", element=t.at_branch)
        if not t.tap_min <= 0 <= t.tap_max:
            raise NetworkParseError("transformer tap range must contain 0", element="transformer")
    for k, c in enumerate(net.capacitor_banks, start=1):
        if c.at_bus not in idx or c.at_bus == 1:
            raise DanglingReferenceError(f"capacitor bank {k} references bus {c.at_bus}", element=f"cb:{k}")
        if c.n_steps < 1:
            raise NetworkParseError(f"capacitor bank {k} needs at least one step", element=f"cb:{k}")
    for k, d in enumerate(net.dg_units, start=1):
        if d.at_bus not in idx or d.at_bus == 1:
            raise DanglingReferenceError(f"DG unit {k} references bus {d.at_bus}", element=f"dg:{k}")
        if d.kind not in ("wind", "pv"):
            raise NetworkParseError(f"DG unit {k} has unknown kind {d.kind!r}", element=f"dg:{k}")
        if not 0 <= d.p_kw <= d.s_kva:
            raise NetworkParseError(f"DG unit {k} output outside [0, s_kva]", element=f"dg:{k}")
    return net


def network_from_dict(data: dict, name: str = "network") -> NetworkModel:
    try:
        buses = tuple(
            Bus(int(b["id"]), b.get("kind", "load"), float(b.get("p_load_kw", 0.0)), float(b.get("q_load_kvar", 0.0)))
            for b in data["buses"]
        )
        branches = tuple(
            Branch(
                int(br["from_bus"]),
                int(br["to_bus"]),
                float(br["r_ohm"]),
                float(br["x_ohm"]),
                float(br.get("i_max_a", DEFAULT_I_MAX_A)),
            )
            for br in data["branches"]
        )
        t = data.get("transformer")
        transformer = (
            TransformerDevice(
                int(t.get("at_branch", 1)),
                int(t.get("tap_min", -8)),
                int(t.get("tap_max", 8)),
                float(t.get("tap_step_frac", 0.0125)),
            )
            if t
            else None
        )
        banks = tuple(
            CapacitorBank(int(c["at_bus"]), int(c["n_steps"]), float(c.get("kvar_per_step", 100.0)))
            for c in data.get("capacitor_banks", [])
        )
        dgs = tuple(
            DgUnit(int(d["at_bus"]), d["kind"], float(d["s_kva"]), float(d.get("p_kw", 0.0)))
            for d in data.get("dg_units", [])
        )
        net = NetworkModel(
            base_kv=float(data["base_kv"]),
            base_mva=float(data["base_mva"]),
            v_min_pu=float(data.get("v_min_pu", 0.9)),
            v_max_pu=float(data.get("v_max_pu", 1.1)),
            buses=buses,
            branches=branches,
            transformer=transformer,
            capacitor_banks=banks,
            dg_units=dgs,
            name=data.get("name", name),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkParseError(f"malformed network data: {exc!r}") from exc
    return validate_network(net)


def network_to_dict(net: NetworkModel) -> dict:
    return {
        "name": net.name,
        "base_kv": net.base_kv,
        "base_mva": net.base_mva,
        "v_min_pu": net.v_min_pu,
        "v_max_pu": net.v_max_pu,
        "buses": [
            {"id": b.id, "kind": b.kind, "p_load_kw": b.p_load_kw, "q_load_kvar": b.q_load_kvar} for b in net.buses
        ],
        "branches": [
            {"from_bus": br.from_bus, "to_bus": br.to_bus, "r_ohm": br.r_ohm, "x_ohm": br.x_ohm, "i_max_a": br.i_max_a}
            for br in net.branches
        ],
        "transformer": None
        if net.transformer is None
        else {
            "at_branch": net.transformer.at_branch,
            "tap_min": net.transformer.tap_min,
            "tap_max": net.transformer.tap_max,
            "tap_step_frac": net.transformer.tap_step_frac,
        },
        "capacitor_banks": [
            {"at_bus": c.at_bus, "n_steps": c.n_steps, "kvar_per_step": c.kvar_per_step} for c in net.capacitor_banks
        ],
        "dg_units": [{"at_bus": d.at_bus, "kind": d.kind, "s_kva": d.s_kva, "p_kw": d.p_kw} for d in net.dg_units],
    }


def load_network(path: str | Path) -> NetworkModel:
    """Read and validate a network JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise NetworkParseError(f"{path}: top level must be an object")
    return network_from_dict(data, name=path.stem)


def save_network(net: NetworkModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n")


def ieee33() -> NetworkModel:
    """The bundled 33-bus feeder with its tap changer, banks and DG units."""
    with resources.as_file(resources.files("xrpo.data") / "ieee33.json") as p:
        return load_network(p)


def bundled_path(name: str = "ieee33.json") -> Path:
    return Path(str(resources.files("xrpo.data") / name))


def import_branch_csv(
    path: str | Path,
    base_kv: float = 12.66,
    base_mva: float = 10.0,
    v_min_pu: float = 0.9,
    v_max_pu: float = 1.1,
    transformer: TransformerDevice | None = None,
    capacitor_banks: Sequence[CapacitorBank] = (),
    dg_units: Sequence[DgUnit] = (),
) -> NetworkModel:
    """Build a network from ``from,to,r_ohm,x_ohm,p_kw,q_kvar`` rows.

    Load columns attach to the ``to`` bus. An optional ``i_max_a`` column
    overrides the default ampacity.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise NetworkParseError(f"{path}: empty branch table")
    loads: dict[int, tuple[float, float]] = {}
    branches = []
    try:
        for row in rows:
            f, t = int(row["from"]), int(row["to"])
            branches.append(
                Branch(f, t, float(row["r_ohm"]), float(row["x_ohm"]), float(row.get("i_max_a") or DEFAULT_I_MAX_A))
            )
            loads[t] = (float(row["p_kw"]), float(row["q_kvar"]))
    except (KeyError, ValueError) as exc:
        raise NetworkParseError(f"{path}: bad branch row ({exc!r})") from exc
    bus_ids = sorted({1} | {b.from_bus for b in branches} | {b.to_bus for b in branches})
    buses = tuple(
Bus(i, "load", *loads.get(i, (0.0, 0.0))) if i != 1 else Bus(1, "slack") for i in bus_ids
    )
    net = NetworkModel(
        base_kv,
        base_mva,
        v_min_pu,
        v_max_pu,
        buses,
        tuple(branches),
        transformer,
        tuple(capacitor_banks),
        tuple(dg_units),
        name=Path(path).stem,
    )
    return validate_network(net)


def validate_controls(
    net: NetworkModel, controls: ControlVector, dg_p_kw: Sequence[float] | None = None
) -> list[Violation]:
    """Device-bound violations of ``controls``.

    DG capability is evaluated at ``dg_p_kw`` when given, otherwise at each
    unit's stored ``p_kw``.
    """
    n_cb, n_dg = len(net.capacitor_banks), len(net.dg_units)
    if len(controls.cb_steps) != n_cb or len(controls.dg_q_kvar) != n_dg:
        raise ControlDimensionError(
            f"expected {n_cb} bank steps and {n_dg} DG settings, "
            f"got {len(controls.cb_steps)} and {len(controls.dg_q_kvar)}"
        )
    if dg_p_kw is not None and len(dg_p_kw) != n_dg:
        raise ControlDimensionError(f"expected {n_dg} DG active outputs, got {len(dg_p_kw)}")

    out: list[Violation] = []
    t = net.transformer
    if t is not None:
        if controls.tap > t.tap_max:
            out.append(Violation("tap", "transformer", controls.tap, t.tap_max, controls.tap - t.tap_max))
        elif controls.tap < t.tap_min:
            out.append(Violation("tap", "transformer", controls.tap, t.tap_min, t.tap_min - controls.tap))
    elif controls.tap != 0:
        out.append(Violation("tap", "transformer", controls.tap, 0, abs(controls.tap)))

    for bank, k in zip(net.capacitor_banks, controls.cb_steps):
        name = f"cb{bank.at_bus}"
        if k > bank.n_steps:
            out.append(Violation("cb_step", name, k, bank.n_steps, k - bank.n_steps))
        elif k < 0:
            out.append(Violation("cb_step", name, k, 0, -k))
        elif k != int(k):
            out.append(Violation("cb_step", name, k, round(k), abs(k - round(k))))

    ps = [d.p_kw for d in net.dg_units] if dg_p_kw is None else list(dg_p_kw)
    for dg, q, p in zip(net.dg_units, controls.dg_q_kvar, ps):
        cap = dg.q_capability(p)
        # a hair of slack so values clipped to the circle in floating point pass
        if abs(q) > cap * (1 + 1e-12) + 1e-9:
            out.append(Violation("dg_capability", f"dg{dg.at_bus}", q, cap, abs(q) - cap))
    return out
