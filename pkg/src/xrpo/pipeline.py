"""End-to-end experiment: gen -> label -> split -> train -> explain -> trust.

Each stage writes its outputs under the run directory together with a stamp
(``stamps/<stage>.json``). A stage's key hashes its own config slice and the
content of every input file, so a stage reruns whenever anything upstream
changed and is skipped otherwise. All randomness derives from one master
seed: stage ``s`` uses ``derive_seed(master, crc32(s))``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from xrpo import explain as ex
from xrpo.dataset import (
    ScenarioConfig,
    derive_seed,
    generate_scenarios,
    label_scenarios,
    load_jsonl,
    load_scenarios,
    load_split,
    save_jsonl,
    save_scenarios,
    save_split,
    split_dataset,
    stack,
)
from xrpo.network import NetworkModel, ieee33, load_network
from xrpo.powerflow import ConvergenceError, LoadScenario, solve_power_flow
from xrpo.regressor import MlpHyper, TrainedRegressor, predict_decoded, train_mlp
from xrpo.rpo import GaParams, ObjectiveWeights, ga_params_dict, solve_rpo_ga
from xrpo.shapley import KernelConfig, ShapleyAttribution, explain_batch, make_background

log = logging.getLogger(__name__)

STAGES = ("gen", "label", "split", "train", "explain", "trust")

PROFILES = {
    "desk": {"count": 500, "restarts": 5},
    "full": {"count": 5000, "restarts": 50},
}
DESK_MAX_COUNT = 1000
DESK_MAX_RESTARTS = 5


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    out_dir: str = "run"
    network: str | None = None  # None = bundled ieee33
    profile: str = "desk"
    seed: int = 7
    count: int | None = None
    restarts: int | None = None
    weights: tuple[float, float] = (0.5, 0.5)
    ga: dict = field(default_factory=dict)  # overrides of GaParams fields
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    coupled_pq: bool = False
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 200
    weight_decay: float = 3e-3  # chosen by validation loss on the desk split
    background: int = 100
    sigma: float | str = "median"
    jobs: int = 1

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        base = PROFILES[self.profile]
        if self.count is None:
            self.count = base["count"]
        if self.restarts is None:
            self.restarts = base["restarts"]
        self.weights = tuple(float(w) for w in self.weights)
        self.fractions = tuple(float(f) for f in self.fractions)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.profile == "desk" and (self.count > DESK_MAX_COUNT or self.restarts > DESK_MAX_RESTARTS):
            raise ValueError(
                f"desk profile allows at most {DESK_MAX_COUNT} scenarios and {DESK_MAX_RESTARTS} restarts"
            )
        ObjectiveWeights(*self.weights)

    @classmethod
    def from_mapping(cls, d: dict) -> RunConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        d.pop("jobs")  # parallelism does not change results
        return json.loads(json.dumps(d))

    def ga_params(self, seed: int) -> GaParams:
        return GaParams(**{**self.ga, "restarts": self.restarts, "seed": seed})

    def mlp_hyper(self, seed: int) -> MlpHyper:
        return MlpHyper(hidden_sizes=self.hidden, epochs=self.epochs, weight_decay=self.weight_decay, seed=seed)


def load_config(path: str | Path) -> dict:
    """Read a JSON or TOML config file into a plain mapping."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def stage_seed(master: int, stage: str) -> int:
    return derive_seed(master, zlib.crc32(stage.encode()))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class _Stage:
    name: str
    params: dict
    inputs: list[str]
    outputs: list[str]
    run: Callable[[], None]


class Pipeline:
    def __init__(self, config: RunConfig):
        self.cfg = config
        self.root = Path(config.out_dir)
        self.net = load_network(config.network) if config.network else ieee33()
        self.status: dict[str, str] = {}

    def path(self, rel: str) -> Path:
        return self.root / rel

    # -- stage bodies ---------------------------------------------------------

    def _gen(self):
        cfg = ScenarioConfig(coupled_pq=self.cfg.coupled_pq)
        scenarios = generate_scenarios(self.net, self.cfg.count, stage_seed(self.cfg.seed, "gen"), cfg)
        save_scenarios(scenarios, self.path("data/scenarios.jsonl"))

    def _label(self):
        scenarios = load_scenarios(self.path("data/scenarios.jsonl"))
        ga = self.cfg.ga_params(stage_seed(self.cfg.seed, "label"))
        rep = label_scenarios(self.net, scenarios, ObjectiveWeights(*self.cfg.weights), ga, self.cfg.jobs)
        save_jsonl(rep.samples, self.path("data/samples.jsonl"))
        write_json(self.path("data/label.json"), {"dropped": [list(d) for d in rep.dropped]})

    def _split(self):
        samples = load_jsonl(self.path("data/samples.jsonl"))
        save_split(split_dataset(samples, self.cfg.fractions, stage_seed(self.cfg.seed, "split")), self.path("split"))

    def _train(self):
        split = load_split(self.path("split"))
        model = train_mlp(split, self.cfg.mlp_hyper(stage_seed(self.cfg.seed, "train")))
        model.save(self.path("model/model.json"))

    def _load_model(self) -> TrainedRegressor:
        return TrainedRegressor.load(self.path("model/model.json"))

    def _explain(self):
        model = self._load_model()
        x_train, _ = stack(load_jsonl(self.path("split/train.jsonl")))
        test = load_jsonl(self.path("split/test.jsonl"))
        x_test, _ = stack(test)
        bg = make_background(x_train, self.cfg.background, stage_seed(self.cfg.seed, "explain"))
        per = explain_batch(model, list(x_test), None, "kernel", KernelConfig(bg, self.cfg.sigma), self.cfg.jobs)
        names = self.net.output_names()
        with open(self.path("explain/attributions.jsonl"), "w", encoding="utf-8") as fh:
            for i, attrs in enumerate(per):
                for a in attrs:
                    rec = {"index": i, "output": names[a.output_dim], **a.to_dict()}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._products(per, x_test)

    def _products(self, per: list[list[ShapleyAttribution]], x_test: np.ndarray):
        feats = self.net.feature_names()
        outs = self.net.output_names()
        by_out = {name: [attrs[d] for attrs in per] for d, name in enumerate(outs)}
        d = self.path("explain/products")
        d.mkdir(parents=True, exist_ok=True)
        bar = ex.combined_importance(by_out, feats)
        write_json(d / "bar_all.json", bar.to_dict())
        ex.emit_svg(bar, d / "bar_all.svg")
        tap = by_out["tap"]
        gi = ex.global_importance(tap, feats, "tap")
        write_json(d / "bar_tap.json", gi.to_dict())
        ex.emit_svg(gi, d / "bar_tap.svg")
        summ = ex.summary_records(tap, x_test, feats, min(20, len(feats)))
        write_json(d / "summary_tap.json", {"product": "summary", "records": [r.to_dict() for r in summ]})
        ex.emit_svg(summ, d / "summary_tap.svg")
        if "P18" in feats and "Q18" in feats:
            dep = ex.dependence_records(x_test, tap, "P18", "Q18", feats)
            write_json(d / "dependence_P18_Q18.json", dep.to_dict())
            ex.emit_svg(dep, d / "dependence_P18_Q18.svg")
        inst = ex.instance_explanation(tap[0], x_test[0], feats, 0, output_name="tap")
        write_json(d / "instance0_tap.json", inst.to_dict())
        ex.emit_svg(inst, d / "waterfall0_tap.svg")
        ex.emit_svg(inst, d / "force0_tap.svg", kind="force")

    def _trust(self):
        recs = [json.loads(l) for l in open(self.path("explain/attributions.jsonl"), encoding="utf-8")]
        tap = [ShapleyAttribution.from_dict(r) for r in recs if r["output"] == "tap"]
        x_train, _ = stack(load_jsonl(self.path("split/train.jsonl")))
        x_test = np.vstack([a.instance for a in tap])
        res = ex.trust_check(x_test, tap, "median", reference=x_train)
        write_json(self.path("trust/trust_tap.json"), res.to_dict())
        ex.emit_svg(res, self.path("trust/trust_tap.svg"))

    # -- orchestration --------------------------------------------------------

    def stages(self) -> list[_Stage]:
        c = self.cfg
        net_src = {"network": c.network or "bundled:ieee33"}
        split_files = ["split/train.jsonl", "split/val.jsonl", "split/test.jsonl"]
        return [
            _Stage("gen", {**net_src, "seed": c.seed, "count": c.count, "coupled_pq": c.coupled_pq}, [],
                   ["data/scenarios.jsonl"], self._gen),
            _Stage("label", {**net_src, "seed": c.seed, "weights": c.weights, "ga": c.ga, "restarts": c.restarts},
                   ["data/scenarios.jsonl"], ["data/samples.jsonl", "data/label.json"], self._label),
            _Stage("split", {"seed": c.seed, "fractions": c.fractions}, ["data/samples.jsonl"],
                   split_files + ["split/split.json"], self._split),
            _Stage("train", {"seed": c.seed, "hidden": c.hidden, "epochs": c.epochs, "weight_decay": c.weight_decay},
                   split_files, ["model/model.json"], self._train),
            _Stage("explain", {"seed": c.seed, "background": c.background, "sigma": c.sigma},
                   ["model/model.json", "split/train.jsonl", "split/test.jsonl"],
                   ["explain/attributions.jsonl", "explain/products/bar_all.json"], self._explain),
            _Stage("trust", {"threshold": "median:train"}, ["explain/attributions.jsonl", "split/train.jsonl"],
                   ["trust/trust_tap.json"], self._trust),
        ]

    def _key(self, st: _Stage) -> str:
        return config_hash(
            {"stage": st.name, "params": st.params, "inputs": {p: file_digest(self.path(p)) for p in st.inputs}}
        )

    def run(self) -> dict:
        self.root.mkdir(parents=True, exist_ok=True)
        for sub in ("data", "split", "model", "explain", "trust", "stamps"):
            self.path(sub).mkdir(exist_ok=True)
        write_json(self.path("config.json"), {"config": self.cfg.snapshot(), "config_hash": self.config_hash})
        for st in self.stages():
            try:
                key = self._key(st)
                stamp = self.path(f"stamps/{st.name}.json")
                fresh = (
                    stamp.exists()
                    and json.loads(stamp.read_text()).get("key") == key
                    and all(self.path(o).exists() for o in st.outputs)
                )
                if fresh:
                    self.status[st.name] = "skipped"
                    log.info("stage %s: up to date", st.name)
                    continue
                log.info("stage %s: running", st.name)
                st.run()
                write_json(stamp, {"stage": st.name, "key": key, "config_hash": self.config_hash,
                                   "outputs": {o: file_digest(self.path(o)) for o in st.outputs}})
                self.status[st.name] = "ran"
            except Exception as exc:
                raise StageError(st.name, exc) from exc
        try:
            report = self.report()
        except Exception as exc:
            raise StageError("report", exc) from exc
        write_json(self.path("report.json"), report)
        return report

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg.snapshot())

    def report(self) -> dict:
        """Aggregate metrics; contains no timings or absolute paths."""
        net = self.net
        base = LoadScenario.base(net)
        pf0 = solve_power_flow(net, base)
        if not pf0.converged:
            raise ConvergenceError("base-case power flow did not converge")
        ga = self.cfg.ga_params(stage_seed(self.cfg.seed, "report"))
        sol = solve_rpo_ga(net, base, ObjectiveWeights(*self.cfg.weights), ga)

        model = self._load_model()
        split = load_split(self.path("split"))
        x_test, y_test = split.arrays("test")
        mae = np.mean(np.abs(model.predict(x_test) - y_test), axis=0)
        ctl = predict_decoded(model, base.features(), net, base.dg_p_kw)
        pf_m = solve_power_flow(net, base, ctl)

        trust = json.loads(self.path("trust/trust_tap.json").read_text())
        label = json.loads(self.path("data/label.json").read_text())
        x_all, _ = stack(split.train + split.val + split.test)
        feats = net.feature_names()
        pq = None
        if "P18" in feats:
            a, b = feats.index("P18"), feats.index("Q18")
            pq = float(np.corrcoef(x_all[:, a], x_all[:, b])[0, 1])

        outs = net.output_names()
        r = lambda v: float(round(float(v), 10))  # noqa: E731
        return {
            "config_hash": self.config_hash,
            "config": self.cfg.snapshot(),
            "metrics": {
                "base_loss_kw": r(pf0.loss_kw),
                "base_du_pu": r(pf0.du_pu),
                "rpo_loss_kw": r(sol.loss_after_kw),
                "rpo_du_pu": r(sol.du_after_pu),
                "model_mae": {n: r(v) for n, v in zip(outs, mae)},
                "trust_agreement": r(trust["agreement_fraction"]),
            },
            "rpo_base_case": {
                "controls": sol.controls.to_dict(),
                "objective_f": r(sol.objective_f),
                "feasible": sol.feasible,
                "ga": ga_params_dict(ga),
            },
            "model_base_case": {
                "controls": ctl.to_dict(),
                "loss_kw": r(pf_m.loss_kw),
                "du_pu": r(pf_m.du_pu),
            },
            "dataset": {
                "scenarios": self.cfg.count,
                "dropped": len(label["dropped"]),
                "sizes": {p: len(getattr(split, p)) for p in ("train", "val", "test")},
                "pearson_P18_Q18": None if pq is None else r(pq),
            },
            "model": {"kind": model.kind, "layer_sizes": model.layer_sizes,
                      "best_epoch": model.train_metrics.get("best_epoch")},
        }


def run_pipeline(config: RunConfig) -> dict:
    return Pipeline(config).run()
