"""Reactive power optimisation: objective, constraint check and GA solver."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np

from xrpo.network import NetworkModel, Violation, validate_controls
from xrpo.powerflow import (
    ControlVector,
    ConvergenceError,
    LoadScenario,
    PowerFlowResult,
    demand_pu,
    injection_maps,
    solve_power_flow,
    source_voltages,
    sweep,
)


class DegenerateBaselineError(ValueError):
    """The do-nothing operating point has zero loss or zero deviation."""


@dataclass(frozen=True)
class ObjectiveWeights:
    w_loss: float = 0.5
    w_u: float = 0.5

    def __post_init__(self):
        if self.w_loss < 0 or self.w_u < 0 or abs(self.w_loss + self.w_u - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got ({self.w_loss}, {self.w_u})")

    @classmethod
    def parse(cls, text: str) -> ObjectiveWeights:
        a, b = (float(v) for v in text.split(","))
        return cls(a, b)


@dataclass(frozen=True)
class GaParams:
    population: int = 50
    generations: int = 100
    crossover_rate: float = 0.8
    mutation_rate: float = 0.05
    tournament_k: int = 3
    penalty_per_violation: float = 10.0
    restarts: int = 5
    seed: int = 0
    elite: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise ValueError("rates must lie in [0, 1]")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.tournament_k < 1:
            raise ValueError("tournament_k must be at least 1")


@dataclass
class RpoSolution:
    controls: ControlVector
    objective_f: float
    loss_before_kw: float
    loss_after_kw: float
    du_before_pu: float
    du_after_pu: float
    feasible: bool
    violations: list[Violation] = field(default_factory=list)
    restart_best: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "controls": self.controls.to_dict(),
            "objective_f": self.objective_f,
            "loss_before_kw": self.loss_before_kw,
            "loss_after_kw": self.loss_after_kw,
            "du_before_pu": self.du_before_pu,
            "du_after_pu": self.du_after_pu,
            "feasible": self.feasible,
            "violations": [v.to_dict() for v in self.violations],
            "restart_best": list(self.restart_best),
        }


def _metric(obj: Any, name: str) -> float:
    if isinstance(obj, Mapping):
        return float(obj[name])
    return float(getattr(obj, name))


def objective(before: Any, after: Any, weights: ObjectiveWeights = ObjectiveWeights()) -> float:
    """Weighted relative reduction of loss and voltage deviation.

    ``before``/``after`` are mappings or objects with ``loss_kw`` and ``du_pu``.
    """
    lb, db = _metric(before, "loss_kw"), _metric(before, "du_pu")
    if lb <= 0 or db <= 0:
        raise DegenerateBaselineError(f"baseline loss {lb} kW / deviation {db} p.u. cannot normalise the objective")
    la, da = _metric(after, "loss_kw"), _metric(after, "du_pu")
    return weights.w_loss * (lb - la) / lb + weights.w_u * (db - da) / db


def check_feasibility(
    net: NetworkModel, result: PowerFlowResult, controls: ControlVector, scenario: LoadScenario
) -> list[Violation]:
    """Every breached operating bound: voltage band, ampacity and device limits."""
    out: list[Violation] = []
    for bus, v in zip(net.buses, result.v_pu):
        if v < net.v_min_pu:
            out.append(Violation("voltage", f"bus{bus.id}", float(v), net.v_min_pu, net.v_min_pu - float(v)))
        elif v > net.v_max_pu:
            out.append(Violation("voltage", f"bus{bus.id}", float(v), net.v_max_pu, float(v) - net.v_max_pu))
    for k, (br, i) in enumerate(zip(net.branches, result.i_a), start=1):
        if i > br.i_max_a:
            out.append(Violation("current", f"branch{k}", float(i), br.i_max_a, float(i) - br.i_max_a))
    out.extend(validate_controls(net, controls, scenario.dg_p_kw))
    return out


# -- GA internals -------------------------------------------------------------


@dataclass(frozen=True)
class _Genome:
    """Gene layout: tap, bank steps (integers), DG kvar (continuous)."""

    lo: np.ndarray
    hi: np.ndarray
    n_int: int

    @classmethod
    def for_problem(cls, net: NetworkModel, scenario: LoadScenario) -> _Genome:
        t = net.transformer
        lo = [t.tap_min if t else 0] + [0] * len(net.capacitor_banks)
        hi = [t.tap_max if t else 0] + [c.n_steps for c in net.capacitor_banks]
        qmax = [d.q_capability(p) for d, p in zip(net.dg_units, scenario.dg_p_kw)]
        return cls(np.array(lo + [-q for q in qmax], float), np.array(hi + qmax, float), len(lo))

    @property
    def size(self) -> int:
        return len(self.lo)

    def random(self, rng: np.random.Generator, k: int) -> np.ndarray:
        pop = np.empty((k, self.size))
        ni = self.n_int
        pop[:, :ni] = rng.integers(self.lo[:ni].astype(int), self.hi[:ni].astype(int) + 1, size=(k, ni))
        pop[:, ni:] = rng.uniform(self.lo[ni:], self.hi[ni:], size=(k, self.size - ni))
        return pop


class _Evaluator:
    """Batched fitness: objective minus a static penalty per violation."""

    def __init__(self, net, scenario, weights, penalty, before):
        self.net = net
        self.scenario = scenario
        self.weights = weights
        self.penalty = penalty
        self.before = before
        self.q_map, _ = injection_maps(net)
        self.s_base_kva = net.base_mva * 1e3
        no_devices = np.zeros((1, self.q_map.shape[0]))
        self.s0 = demand_pu(
            net, np.array(scenario.p_kw), np.array(scenario.q_kvar), np.array(scenario.dg_p_kw), no_devices
        )
        self.i_max = np.array([br.i_max_a for br in net.branches])
        self.r_pu = net.tree.z_pu.real

    def __call__(self, pop: np.ndarray):
        net = self.net
        s_pu = self.s0 - 1j * (pop[:, 1:] @ self.q_map) / self.s_base_kva
        v, i_br, converged, _ = sweep(net, s_pu, source_voltages(net, pop[:, 0]))
        vm = np.abs(v)
        n_viol = (vm < net.v_min_pu).sum(axis=1) + (vm > net.v_max_pu).sum(axis=1)
        i_abs = np.abs(i_br)
        n_viol = n_viol + (i_abs * net.i_base_a > self.i_max).sum(axis=1)
        loss_kw = (i_abs**2 @ self.r_pu) * self.s_base_kva
        # slack bus sits at exactly 1.0 p.u. and contributes nothing to the deviation
        du = np.abs(1.0 - vm).sum(axis=1) / net.m
        lb, db = self.before
        w = self.weights
        f = w.w_loss * (lb - loss_kw) / lb + w.w_u * (db - du) / db
        fitness = f - self.penalty * n_viol
        # diverged sweeps are the worst possible individuals
        bad = ~converged | ~np.isfinite(fitness)
        fitness = np.where(bad, -np.inf, fitness)
        f = np.where(bad, -np.inf, f)
        return fitness, f, (n_viol == 0) & ~bad


def _better(a_fit: float, a_vec: np.ndarray, b_fit: float, b_vec: np.ndarray | None) -> bool:
    """Strictly better fitness, ties to lower tap then lexicographically smaller vector."""
    if b_vec is None or a_fit > b_fit:
        return True
    if a_fit < b_fit:
        return False
    return tuple(a_vec) < tuple(b_vec)


def _argbest(score: np.ndarray, pop: np.ndarray) -> int:
    top = np.flatnonzero(score == score.max())
    if len(top) == 1:
        return int(top[0])
    keys = pop[top]
    order = np.lexsort(keys.T[::-1])
    return int(top[order[0]])


def _run_once(genome: _Genome, evaluate: _Evaluator, ga: GaParams, rng: np.random.Generator):
    """One GA run. Returns (best feasible (F, genes) or None, best penalised (fitness, genes))."""
    k = ga.population
    pop = genome.random(rng, k)
    pop[0] = np.clip(0.0, genome.lo, genome.hi)  # do-nothing individual
    ni = genome.n_int
    sigma = 0.1 * (genome.hi[ni:] - genome.lo[ni:])

    best_feas: tuple[float, np.ndarray] | None = None
    best_any: tuple[float, np.ndarray] | None = None

    def record(pop, fitness, f, feas):
        nonlocal best_feas, best_any
        if feas.any():
            j = _argbest(np.where(feas, f, -np.inf), pop)
            if best_feas is None or _better(f[j], pop[j], best_feas[0], best_feas[1]):
                best_feas = (float(f[j]), pop[j].copy())
        j = _argbest(fitness, pop)
        if best_any is None or _better(fitness[j], pop[j], best_any[0], best_any[1]):
            best_any = (float(fitness[j]), pop[j].copy())

    fitness, f, feas = evaluate(pop)
    record(pop, fitness, f, feas)
    for _ in range(ga.generations):
        # tournament selection
        cand = rng.integers(0, k, size=(k, ga.tournament_k))
        winners = cand[np.arange(k), np.argmax(fitness[cand], axis=1)]
        parents = pop[winners]
        children = parents.copy()
        # uniform crossover on consecutive pairs
        half = k // 2
        do_cx = rng.random(half) < ga.crossover_rate
        swap = (rng.random((half, genome.size)) < 0.5) & do_cx[:, None]
        a, b = children[0 : 2 * half : 2], children[1 : 2 * half : 2]
        a_new = np.where(swap, b, a)
        b_new = np.where(swap, a, b)
        children[0 : 2 * half : 2], children[1 : 2 * half : 2] = a_new, b_new
        # mutation: +-1 step on integer genes, gaussian on continuous genes
        mut = rng.random((k, genome.size)) < ga.mutation_rate
        steps = rng.choice(np.array([-1.0, 1.0]), size=(k, ni))
        children[:, :ni] += np.where(mut[:, :ni], steps, 0.0)
        if genome.size > ni:
            children[:, ni:] += np.where(mut[:, ni:], rng.normal(0.0, 1.0, (k, genome.size - ni)) * sigma, 0.0)
        children = np.clip(children, genome.lo, genome.hi)
        # elitism
        if ga.elite:
            order = np.argsort(-fitness, kind="stable")[: ga.elite]
            children[: ga.elite] = pop[order]
        pop = children
        fitness, f, feas = evaluate(pop)
        record(pop, fitness, f, feas)
    return best_feas, best_any


def baseline_metrics(net: NetworkModel, scenario: LoadScenario) -> PowerFlowResult:
    base = solve_power_flow(net, scenario, ControlVector.zeros(net))
    if not base.converged:
        raise ConvergenceError("baseline power flow (zero controls) did not converge")
    return base


def _solution(net, scenario, weights, genes, before: PowerFlowResult, restart_best=()) -> RpoSolution:
    controls = ControlVector.from_array(net, genes)
    res = solve_power_flow(net, scenario, controls)
    if not res.converged:
        raise ConvergenceError("power flow at the selected controls did not converge")
    viol = check_feasibility(net, res, controls, scenario)
    return RpoSolution(
        controls=controls,
        objective_f=objective(before, res, weights),
        loss_before_kw=before.loss_kw,
        loss_after_kw=res.loss_kw,
        du_before_pu=before.du_pu,
        du_after_pu=res.du_pu,
        feasible=not viol,
        violations=viol,
        restart_best=list(restart_best),
    )


def solve_rpo_ga(
    net: NetworkModel,
    scenario: LoadScenario,
    weights: ObjectiveWeights = ObjectiveWeights(),
    ga: GaParams = GaParams(),
) -> RpoSolution:
    """Best control setting over ``ga.restarts`` independent GA runs.

    Restart ``r`` draws from a generator seeded with ``ga.seed + r``, so the
    best-of-k result only improves as k grows. Raises
    ``DegenerateBaselineError`` when the zero-control case has no loss or
    no deviation to reduce.
    """
    scenario.check(net)
    before = baseline_metrics(net, scenario)
    if before.loss_kw <= 0 or before.du_pu <= 0:
        raise DegenerateBaselineError("scenario has nothing to optimise (zero baseline loss or deviation)")
    genome = _Genome.for_problem(net, scenario)
    evaluate = _Evaluator(net, scenario, weights, ga.penalty_per_violation, (before.loss_kw, before.du_pu))

    best_feas = None
    best_any = None
    restart_best = []
    for r in range(ga.restarts):
        rng = np.random.default_rng(ga.seed + r)
        feas, anyb = _run_once(genome, evaluate, ga, rng)
        if feas is not None and (best_feas is None or _better(feas[0], feas[1], best_feas[0], best_feas[1])):
            best_feas = feas
        if best_any is None or _better(anyb[0], anyb[1], best_any[0], best_any[1]):
            best_any = anyb
        restart_best.append(best_feas[0] if best_feas is not None else best_any[0])
    genes = best_feas[1] if best_feas is not None else best_any[1]
    return _solution(net, scenario, weights, genes, before, restart_best)


def solve_rpo_exhaustive(
    net: NetworkModel, scenario: LoadScenario, weights: ObjectiveWeights = ObjectiveWeights(), limit: int = 100_000
) -> RpoSolution:
    """Enumerate every tap/bank combination (DG reactive outputs held at zero).

    Reference optimum for small discrete lattices; ties resolve like the GA.
    """
    scenario.check(net)
    before = baseline_metrics(net, scenario)
    if before.loss_kw <= 0 or before.du_pu <= 0:
        raise DegenerateBaselineError("scenario has nothing to optimise (zero baseline loss or deviation)")
    t = net.transformer
    axes = [range(t.tap_min, t.tap_max + 1) if t else [0]] + [range(c.n_steps + 1) for c in net.capacitor_banks]
    combos = np.array(list(itertools.product(*axes)), float)
    if len(combos) > limit:
        raise ValueError(f"{len(combos)} combinations exceed the enumeration limit {limit}")
    pop = np.hstack([combos, np.zeros((len(combos), len(net.dg_units)))])
    evaluate = _Evaluator(net, scenario, weights, 0.0, (before.loss_kw, before.du_pu))
    _, f, feas = evaluate(pop)
    if not feas.any():
        raise ValueError("no feasible combination")
    # plain scan, kept separate from the GA's vectorised bookkeeping
    best = None
    for j in np.flatnonzero(feas):
        if best is None or _better(f[j], pop[j], best[0], best[1]):
            best = (float(f[j]), pop[j])
    return _solution(net, scenario, weights, best[1], before)


def ga_params_dict(ga: GaParams) -> dict:
    return asdict(ga)
