"""Command-line entry point (``xrpo``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from xrpo import explain as ex
from xrpo.dataset import (
    ScenarioConfig,
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
from xrpo.network import NetworkError, ieee33, load_network
from xrpo.pipeline import (
    PROFILES,
    RunConfig,
    StageError,
    load_config,
    run_pipeline,
    write_json,
)
from xrpo.powerflow import ControlVector, ConvergenceError, LoadScenario, solve_power_flow
from xrpo.regressor import MlpHyper, TrainedRegressor, TrainingError, predict_decoded, train_linear, train_mlp
from xrpo.rpo import GaParams, ObjectiveWeights, check_feasibility, solve_rpo_ga
from xrpo.shapley import (
    KernelConfig,
    ShapleyAttribution,
    ShapleyError,
    ValueFunctionConfig,
    explain_batch,
    make_background,
)

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_CONVERGENCE = 5
EXIT_TRAINING = 6

log = logging.getLogger("xrpo")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, (NetworkError, ShapleyError)):
        return EXIT_VALIDATION
    if isinstance(exc, (OSError, json.JSONDecodeError)):
        return EXIT_IO
    if isinstance(exc, (ValueError, KeyError)):
        return EXIT_VALIDATION
    return EXIT_GENERIC


def _network(args):
    return load_network(args.network) if args.network else ieee33()


def _emit(obj, out: str | None) -> None:
    if out:
        write_json(Path(out), obj)
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))


def _read_json(path: str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _restarts(args) -> int:
    if getattr(args, "restarts", None) is not None:
        return args.restarts
    return PROFILES[args.profile]["restarts"]


def _output_index(net, name: str) -> int:
    names = net.output_names()
    if name.isdigit():
        return int(name)
    if name not in names:
        raise ValueError(f"unknown output {name!r}; expected one of {names}")
    return names.index(name)


# -- net / pf / rpo -----------------------------------------------------------


def cmd_net_validate(args) -> int:
    net = _network(args)
    _emit(
        {
            "name": net.name,
            "buses": net.m,
            "branches": len(net.branches),
            "total_p_kw": float(net.base_p_kw.sum()),
            "total_q_kvar": float(net.base_q_kvar.sum()),
            "controls": net.output_names(),
            "valid": True,
        },
        args.out,
    )
    return EXIT_OK


def _scenario(args, net) -> LoadScenario:
    return LoadScenario.from_dict(_read_json(args.scenario)) if args.scenario else LoadScenario.base(net)


def cmd_pf_run(args) -> int:
    net = _network(args)
    sc = _scenario(args, net)
    ctl = ControlVector.from_dict(_read_json(args.controls)) if args.controls else ControlVector.zeros(net)
    res = solve_power_flow(net, sc, ctl)
    _emit(res.to_dict(net), args.out)
    return EXIT_OK if res.converged else EXIT_CONVERGENCE


def cmd_rpo_solve(args) -> int:
    net = _network(args)
    sc = _scenario(args, net)
    restarts = args.ga_restarts if args.ga_restarts is not None else _restarts(args)
    ga = GaParams(restarts=restarts, seed=_seed(args))
    sol = solve_rpo_ga(net, sc, ObjectiveWeights.parse(args.weights), ga)
    _emit(sol.to_dict(), args.out)
    return EXIT_OK


# -- data -----------------------------------------------------------------------


def cmd_data_gen(args) -> int:
    net = _network(args)
    count = args.count if args.count is not None else PROFILES[args.profile]["count"]
    if args.profile == "desk":
        RunConfig(count=count)  # enforces the desk bounds
    sc = generate_scenarios(net, count, _seed(args), ScenarioConfig(coupled_pq=args.coupled_pq))
    save_scenarios(sc, args.out)
    print(f"wrote {len(sc)} scenarios to {args.out}")
    return EXIT_OK


def cmd_data_label(args) -> int:
    net = _network(args)
    scenarios = load_scenarios(args.scenarios)
    ga = GaParams(restarts=_restarts(args), seed=_seed(args))
    rep = label_scenarios(net, scenarios, ObjectiveWeights.parse(args.weights), ga, args.jobs)
    save_jsonl(rep.samples, args.out)
    print(f"labelled {len(rep.samples)} scenarios, dropped {rep.n_dropped}")
    return EXIT_OK


def cmd_data_split(args) -> int:
    fr = tuple(float(v) for v in args.fractions.split(","))
    split = split_dataset(load_jsonl(args.data), fr, _seed(args))
    save_split(split, args.out)
    print(f"train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)}")
    return EXIT_OK


# -- model ----------------------------------------------------------------------


def cmd_model_train(args) -> int:
    split = load_split(args.data)
    if args.kind == "linear":
        model = train_linear(split)
    else:
        hidden = tuple(int(h) for h in args.hidden.split(",") if h)
        model = train_mlp(
            split, MlpHyper(hidden_sizes=hidden, epochs=args.epochs, weight_decay=args.weight_decay, seed=_seed(args))
        )
    model.save(args.out)
    print(json.dumps(model.train_metrics.get("val", {}), sort_keys=True))
    return EXIT_OK


def cmd_model_eval(args) -> int:
    net = _network(args)
    model = TrainedRegressor.load(args.model)
    split = load_split(args.data)
    samples = split.test if split.test else split.val
    x, y = stack(samples)
    mae = np.mean(np.abs(model.predict(x) - y), axis=0)
    feasible = 0
    for s in samples:
        sc = s.scenario
        ctl = predict_decoded(model, s.x, net, sc.dg_p_kw)
        res = solve_power_flow(net, sc, ctl)
        feasible += int(res.converged and not check_feasibility(net, res, ctl, sc))
    _emit(
        {
            "samples": len(samples),
            "mae": dict(zip(net.output_names(), (float(v) for v in mae))),
            "feasibility_rate": feasible / len(samples),
        },
        args.out,
    )
    return EXIT_OK


# -- explain / trust ------------------------------------------------------------


def _load_attributions(path: str, output: str | None = None) -> list[dict]:
    recs = [json.loads(line) for line in open(path, encoding="utf-8") if line.strip()]
    if output is not None:
        recs = [r for r in recs if r.get("output") == output]
    return recs


def cmd_explain_compute(args) -> int:
    net = _network(args)
    model = TrainedRegressor.load(args.model)
    x, _ = stack(load_jsonl(args.data))
    x_bg, _ = stack(load_jsonl(args.background_data)) if args.background_data else (x, None)
    bg = make_background(x_bg, args.background, _seed(args))
    sigma = args.sigma if args.sigma == "median" else float(args.sigma)
    dim = None if args.output_dim == "all" else _output_index(net, args.output_dim)
    cfg = KernelConfig(bg, sigma) if args.method == "kernel" else ValueFunctionConfig(bg)
    result = explain_batch(model, list(x), dim, args.method, cfg, args.jobs)
    names = net.output_names()
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, item in enumerate(result):
            for a in item if isinstance(item, list) else [item]:
                fh.write(json.dumps({"index": i, "output": names[a.output_dim], **a.to_dict()}, sort_keys=True) + "\n")
    print(f"wrote attributions for {len(result)} instances to {args.out}")
    return EXIT_OK


def _product(args, net):
    feats = net.feature_names()
    recs = _load_attributions(args.attributions, args.output_dim)
    attrs = [ShapleyAttribution.from_dict(r) for r in recs]
    x, _ = stack(load_jsonl(args.data)) if args.data else (np.vstack([a.instance for a in attrs]), None)
    p = args.product
    if p == "bar":
        return ex.global_importance(attrs, feats, args.output_dim)
    if p == "summary":
        return ex.summary_records(attrs, x[: len(attrs)], feats, args.top_k)
    if p == "dependence":
        return ex.dependence_records(x[: len(attrs)], attrs, args.feature_a, args.feature_b, feats)
    if p in ("force", "waterfall"):
        k = args.instance
        if not 0 <= k < len(attrs):
            raise ValueError(f"instance {k} out of range 0..{len(attrs) - 1}")
        return ex.instance_explanation(attrs[k], attrs[k].instance, feats, k, output_name=args.output_dim)
    if p == "trust":
        ref = stack(load_jsonl(args.reference))[0] if args.reference else None
        return ex.trust_check(np.vstack([a.instance for a in attrs]), attrs, "median", ref)
    raise ValueError(f"unknown product {p!r}")


def _product_json(obj, kind: str):
    if isinstance(obj, list):
        return {"product": "summary", "records": [r.to_dict() for r in obj]}
    d = obj.to_dict()
    if kind == "force":
        return {"product": "force", **d["force"]}
    if kind == "waterfall":
        return {"product": "waterfall", "phi0": d["phi0"], "endpoint": d["endpoint"], "steps": d["waterfall"]}
    return d


def cmd_explain_report(args) -> int:
    net = _network(args)
    obj = _product(args, net)
    if args.format == "svg":
        ex.emit_svg(obj, args.out, kind=args.product)
    else:
        write_json(Path(args.out), _product_json(obj, args.product))
    return EXIT_OK


def cmd_trust_run(args) -> int:
    args.product = "trust"
    res = _product(args, _network(args))
    _emit(res.to_dict(), args.out)
    print(f"agreement {res.agreement_fraction:.4f}", file=sys.stderr)
    return EXIT_OK


# -- pipeline -------------------------------------------------------------------


def _run_config(args, out_dir: str) -> RunConfig:
    base = load_config(args.config) if args.config else {}
    base.setdefault("out_dir", out_dir)
    base.setdefault("profile", args.profile)
    if args.seed is not None:
        base["seed"] = args.seed
    base.setdefault("jobs", args.jobs)
    if getattr(args, "count", None) is not None:
        base["count"] = args.count
    return RunConfig.from_mapping(base)


def cmd_demo(args) -> int:
    cfg = _run_config(args, args.out)
    report = run_pipeline(cfg)
    m = report["metrics"]
    print(f"base loss {m['base_loss_kw']:.2f} kW, dU {m['base_du_pu']:.4f} p.u.")
    print(f"GA     loss {m['rpo_loss_kw']:.2f} kW, dU {m['rpo_du_pu']:.4f} p.u.")
    print(f"tap MAE {m['model_mae']['tap']:.3f}, trust agreement {m['trust_agreement']:.4f}")
    print(f"report: {Path(cfg.out_dir) / 'report.json'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    g.add_argument("--profile", choices=sorted(PROFILES), default=argparse.SUPPRESS)
    g.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON run config")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="xrpo", parents=[common], description=__doc__)
    parser.set_defaults(seed=None, jobs=1, profile="desk", config=None, verbose=False)
    sub = parser.add_subparsers(dest="group", required=True)

    def group(name, help_):
        p = sub.add_parser(name, help=help_)
        return p.add_subparsers(dest="action", required=True)

    def cmd(parent, name, fn, help_, network=True):
        p = parent.add_parser(name, help=help_, parents=[common])
        if network:
            p.add_argument("--network", help="network JSON (default: bundled ieee33)")
        p.set_defaults(func=fn)
        return p

    net = group("net", "network files")
    p = cmd(net, "validate", cmd_net_validate, "validate a network file")
    p.add_argument("--out")

    pf = group("pf", "power flow")
    p = cmd(pf, "run", cmd_pf_run, "solve one power flow")
    p.add_argument("--scenario")
    p.add_argument("--controls")
    p.add_argument("--out")

    rpo = group("rpo", "reactive power optimisation")
    p = cmd(rpo, "solve", cmd_rpo_solve, "GA solve for one scenario")
    p.add_argument("--scenario")
    p.add_argument("--weights", default="0.5,0.5")
    p.add_argument("--ga-restarts", type=int)
    p.add_argument("--out")

    data = group("data", "scenario datasets")
    p = cmd(data, "gen", cmd_data_gen, "sample load scenarios")
    p.add_argument("--count", type=int)
    p.add_argument("--coupled-pq", action="store_true")
    p.add_argument("--out", required=True)
    p = cmd(data, "label", cmd_data_label, "label scenarios with GA optima")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--restarts", type=int)
    p.add_argument("--weights", default="0.5,0.5")
    p.add_argument("--out", required=True)
    p = cmd(data, "split", cmd_data_split, "train/val/test split", network=False)
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--out", required=True)

    model = group("model", "surrogate regressors")
    p = cmd(model, "train", cmd_model_train, "train a regressor", network=False)
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--kind", choices=["mlp", "linear"], default="mlp")
    p.add_argument("--hidden", default="128,128")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--weight-decay", type=float, default=3e-3)
    p.add_argument("--out", required=True)
    p = cmd(model, "eval", cmd_model_eval, "per-output MAE and feasibility rate")
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--model", required=True)
    p.add_argument("--out")

    expl = group("explain", "attributions and explanation products")
    p = cmd(expl, "compute", cmd_explain_compute, "compute attributions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="samples JSONL to explain")
    p.add_argument("--background-data", help="samples JSONL for the background (default: --data)")
    p.add_argument("--output-dim", default="tap", help="output name, index or 'all'")
    p.add_argument("--method", choices=["kernel", "exact"], default="kernel")
    p.add_argument("--background", type=int, default=100)
    p.add_argument("--sigma", default="median")
    p.add_argument("--out", required=True)
    p = cmd(expl, "report", cmd_explain_report, "render one explanation product")
    p.add_argument("--attributions", required=True)
    p.add_argument("--data")
    p.add_argument("--output-dim", default="tap")
    p.add_argument("--product", required=True,
                   choices=["bar", "summary", "dependence", "force", "waterfall", "trust"])
    p.add_argument("--format", choices=["json", "svg"], default="json")
    p.add_argument("--feature-a", default="P18")
    p.add_argument("--feature-b", default="Q18")
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--reference", help="training samples JSONL for trust thresholds")
    p.add_argument("--out", required=True)

    trust = group("trust", "sign-agreement check")
    p = cmd(trust, "run", cmd_trust_run, "marker/sign agreement for one output")
    p.add_argument("--attributions", required=True)
    p.add_argument("--data")
    p.add_argument("--reference", help="training samples JSONL for thresholds (default: the instances)")
    p.add_argument("--output-dim", default="tap")
    p.add_argument("--out")

    p = sub.add_parser("demo", help="end-to-end pipeline", parents=[common])
    p.add_argument("--out", default="demo_run", help="run directory")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # mapped to a stage-family exit code
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
