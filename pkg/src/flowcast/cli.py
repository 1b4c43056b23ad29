"""Command-line entry point: ``python -m flowcast <subcommand>``.

Subcommands run one pipeline stage each and write their artifacts to the
output directory (``--out``, else ``$FLOWCAST_OUT``, else the config's
``out_dir``).  Exit status is 0 on success, 1 on a usage error and 2 when a
stage fails at runtime.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .dlow import predict_dlow, train_dlow
from .dsf import DsfParams, TrainingDiverged, predict, train_dsf_batch
from .experiments import (RunConfig, ablation_rows, build_data, coverage_report, covers_both, iid_predictor,
                          intersection_observation, quality_diversity_monitor, run_ablation, train_backbone,
                          transductive_predictor, Bundle)
from .flow import sample_iid
from .metrics import DISTANCE_MODES, MetricsReport, evaluate
from .render import Layer, Scene, render_quality_diversity_trace, render_trajectories_svg
from .sim import SimulationError, build_multifuture_eval

METHODS = ("iid", "dsf", "dsf_td", "dlow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help="output directory (overrides $FLOWCAST_OUT)")
    common.add_argument("--seed", type=int, help="master seed")

    p = _Parser(prog="flowcast", description="Toy-intersection flow forecasting with diversity sampling.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="simulate the toy dataset")

    s = sub.add_parser("train-flow", parents=[common], help="train the flow backbone")
    s.add_argument("--epochs", type=_positive)
    s.add_argument("--weak", action="store_true", help="train the half-budget backbone instead")

    for name in ("train-dsf", "train-dlow"):
        s = sub.add_parser(name, parents=[common], help=f"train {name[6:].upper()} samplers")
        s.add_argument("--k", type=_positive, default=2)
        s.add_argument("--seeds", type=_positive)

    s = sub.add_parser("eval", parents=[common], help="evaluate methods on the multi-future eval set")
    s.add_argument("--k", type=_positive, nargs="+", default=[2])
    s.add_argument("--seeds", type=_positive)
    s.add_argument("--methods", default=",".join(METHODS))
    s.add_argument("--mode", choices=DISTANCE_MODES)

    s = sub.add_parser("ablate", parents=[common], help="run the loss-variant ablation matrix")
    s.add_argument("--k", type=_positive, default=2)
    s.add_argument("--seeds", type=_positive)

    s = sub.add_parser("plot", parents=[common], help="render SVG figures from saved artifacts")
    s.add_argument("--k", type=_positive, default=2)

    s = sub.add_parser("demo", parents=[common], help="dataset, flow, i.i.d. and DSF figures in one go")
    s.add_argument("--k", type=_positive, default=2)
    return p


# -- helpers ---------------------------------------------------------------------------------

class Context:
    def __init__(self, args):
        self.config = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            self.config = replace(self.config, master_seed=args.seed)
        if getattr(args, "seeds", None):
            self.config = replace(self.config, n_seeds=args.seeds)
        out = args.out or os.environ.get("FLOWCAST_OUT") or self.config.out_dir
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def dataset(self):
        return io.load_dataset(self.path("dataset.json"))

    def flow(self, weak: bool = False):
        return io.load_flow(self.path("flow_weak.json" if weak else "flow.json"))[0]

    def instances(self, dataset):
        return build_multifuture_eval(dataset, self.config.eval_instances, self.config.master_seed)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _sampler(ctx: Context, method: str, K: int, seed: int, flow, dataset):
    """Load a saved sampler checkpoint, or train and save one."""
    path = ctx.path(f"{method}_K{K}_s{seed}.json")
    if path.exists():
        params, doc = io.load_sampler(path)
        if doc["method"] != method or params.K != K:
            raise io.FormatError(f"{path}: checkpoint does not match {method} K={K}")
        return params
    if method == "dsf":
        cfg = replace(ctx.config.dsf, K=K)
        params, trace = train_dsf_batch(flow, dataset.history, cfg, seed=seed, futures=dataset.future)
    else:
        cfg = replace(ctx.config.dlow, K=K)
        params, trace = train_dlow(flow, dataset.history, dataset.future, cfg, seed=seed)
    io.save_sampler(path, params, cfg, method, {"seed": seed})
    io.save_trace(ctx.path(f"{method}_K{K}_s{seed}_trace.csv"), trace)
    return params


# -- subcommands ------------------------------------------------------------------------------

def cmd_gen_data(ctx: Context, args) -> None:
    dataset, _ = build_data(ctx.config)
    io.save_dataset(ctx.path("dataset.json"), dataset)
    counts = {m: int(dataset.mode_mask(m).sum()) for m in ("straight", "right")}
    _say(f"gen-data: {len(dataset)} records {counts} -> {ctx.path('dataset.json')}")


def cmd_train_flow(ctx: Context, args) -> None:
    dataset = ctx.dataset()
    epochs = args.epochs or (max(1, ctx.config.flow.epochs // 2) if args.weak else None)
    flow, curve = train_backbone(ctx.config, dataset, epochs=epochs)
    name = "flow_weak" if args.weak else "flow"
    cfg = replace(ctx.config.flow, epochs=epochs or ctx.config.flow.epochs)
    io.save_flow(ctx.path(f"{name}.json"), flow, cfg, min(curve), {"dataset_digest": dataset.digest()})
    io.save_curve(ctx.path(f"{name}_curve.csv"), curve)
    _say(f"train-flow: {cfg.epochs} epochs, best NLL {min(curve):.3f} -> {ctx.path(name + '.json')}")


def cmd_train_sampler(ctx: Context, args, method: str) -> None:
    dataset, flow = ctx.dataset(), ctx.flow()
    for seed in ctx.config.seeds:
        _sampler(ctx, method, args.k, seed, flow, dataset)
    _say(f"train-{method}: K={args.k}, seeds {ctx.config.seeds} -> {ctx.out}")


def cmd_eval(ctx: Context, args) -> None:
    dataset, flow = ctx.dataset(), ctx.flow()
    instances = ctx.instances(dataset)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = set(methods) - set(METHODS)
    if bad:
        raise UsageError(f"unknown methods: {sorted(bad)}")
    mode = args.mode or ctx.config.distance_mode
    seeds = ctx.config.seeds
    for K in args.k:
        reports: dict[str, MetricsReport] = {}
        for method in methods:
            if method == "iid":
                pred = iid_predictor(flow)
            elif method == "dsf_td":
                pred = transductive_predictor(flow, instances, ctx.config.dsf)
            else:
                pred = _saved_predictor(ctx, method, flow, dataset)
            reports[method] = evaluate(pred, instances, K, seeds, mode)
        path = ctx.path(f"report_K{K}.json")
        io.save_report(path, reports, ctx.config, {"dataset_digest": dataset.digest(), "K": K})
        io.write_csv(ctx.path(f"report_K{K}.csv"), io.report_rows(reports),
                     ["model", "metric", "K", "mode", "mean", "std"])
        for name, r in reports.items():
            cells = " ".join(f"{m}={r.mean[m]:.3f}±{r.std[m]:.3f}" for m in ("minADE", "minFDE", "minASD", "minFSD"))
            _say(f"eval K={K} {name}: {cells}")
        _say(f"eval: report -> {path}")


def _saved_predictor(ctx: Context, method: str, flow, dataset):
    run = predict if method == "dsf" else predict_dlow

    def pred(history, K, seed):
        return run(_sampler(ctx, method, K, seed, flow, dataset), flow, history, seed=seed).trajectories
    return pred


def cmd_ablate(ctx: Context, args) -> None:
    dataset, flow = ctx.dataset(), ctx.flow()
    weak_path = ctx.path("flow_weak.json")
    weak = io.load_flow(weak_path)[0] if weak_path.exists() else None
    bundle = Bundle(ctx.config, dataset, ctx.instances(dataset), flow, [], weak)
    results = run_ablation(bundle, args.k, log=lambda m: _say(f"ablate K={args.k} {m}"))
    rows = ablation_rows(results)
    io.write_csv(ctx.path("ablation.csv"), rows, ["variant", "metric", "K", "mean", "std"])
    io.save_report(ctx.path("ablation.json"), {v: r.report for v, r in results.items()}, ctx.config,
                   {"mean_loglik": {v: r.mean_loglik for v, r in results.items()}})
    _say(f"ablate: {len(results)} variants -> {ctx.path('ablation.csv')}")


def _figures(ctx: Context, flow, dsf_params: DsfParams, K: int) -> tuple[Path, Path, np.ndarray]:
    sim = ctx.config.sim
    scene = Scene.from_config(sim)
    obs = intersection_observation(sim)
    iid = sample_iid(obs, flow, 100, seed=ctx.config.master_seed)
    hist = Layer("history", obs[None], "history", mark_endpoints=False)
    iid_svg = render_trajectories_svg([hist, Layer("iid", iid.trajectories, "prediction", 0.35)], scene,
                                      "flow, 100 i.i.d. samples")
    dsf_set = predict(dsf_params, flow, obs, seed=ctx.config.master_seed)
    dsf_svg = render_trajectories_svg([hist, Layer("dsf", dsf_set.trajectories, "prediction")], scene,
                                      f"flow + DSF, K={K}")
    p1, p2 = ctx.path("iid_samples.svg"), ctx.path(f"dsf_K{K}.svg")
    p1.write_text(iid_svg, encoding="utf-8")
    p2.write_text(dsf_svg, encoding="utf-8")
    return p1, p2, dsf_set.endpoints


def cmd_plot(ctx: Context, args) -> None:
    flow = ctx.flow()
    seed = ctx.config.master_seed
    params = io.load_sampler(ctx.path(f"dsf_K{args.k}_s{seed}.json"))[0]
    p1, p2, _ = _figures(ctx, flow, params, args.k)
    _say(f"plot: {p1}, {p2}")
    trace_path = ctx.path("qd_trace.csv")
    if trace_path.exists():
        rows = io.read_csv(trace_path)
        series = [(float(r["minASD"]), float(r["minADE"])) for r in rows if r.get("minASD")]
        ctx.path("qd_trace.svg").write_text(render_quality_diversity_trace(series, "DSF training"),
                                             encoding="utf-8")
        _say(f"plot: {ctx.path('qd_trace.svg')}")


def cmd_demo(ctx: Context, args) -> int:
    cfg = ctx.config
    dataset, instances = build_data(cfg)
    io.save_dataset(ctx.path("dataset.json"), dataset)
    _say(f"demo: dataset {len(dataset)} records, digest {dataset.digest()[:12]}")
    flow, curve = train_backbone(cfg, dataset)
    io.save_flow(ctx.path("flow.json"), flow, cfg.flow, min(curve), {"dataset_digest": dataset.digest()})
    io.save_curve(ctx.path("flow_curve.csv"), curve)
    _say(f"demo: flow trained, best NLL {min(curve):.3f}")
    K = args.k
    dsf_cfg = replace(cfg.dsf, K=K)
    monitor = quality_diversity_monitor(flow, instances, cfg.distance_mode, cfg.master_seed)
    every = max(1, len(dataset) // dsf_cfg.batch_size)
    params, trace = train_dsf_batch(flow, dataset.history, dsf_cfg, seed=cfg.master_seed, futures=dataset.future,
                                    monitor=monitor, monitor_every=every)
    io.save_sampler(ctx.path(f"dsf_K{K}_s{cfg.master_seed}.json"), params, dsf_cfg, "dsf", {"seed": cfg.master_seed})
    io.save_trace(ctx.path("qd_trace.csv"), trace)
    series = [(r["minASD"], r["minADE"]) for r in trace if "minASD" in r]
    ctx.path("qd_trace.svg").write_text(render_quality_diversity_trace(series, "DSF training"), encoding="utf-8")
    p1, p2, ends = _figures(ctx, flow, params, K)
    report = coverage_report(ends, cfg.sim, cfg.mode_radius)
    io.write_json(ctx.path(f"coverage_K{K}.json"), "coverage",
                  {"K": K, "per_mode": report.per_mode, "mode_averaged": report.averaged,
                   "endpoints": report.endpoints}, cfg)
    _say(f"demo: figures {p1.name}, {p2.name}, qd_trace.svg")
    _say(f"demo: coverage {report.summary()}")
    if K == 2:
        ok = covers_both(ends, cfg.sim, cfg.mode_radius)
        _say(f"demo: both exits covered by the K=2 set: {'yes' if ok else 'NO'}")
        return 0 if ok else 2
    return 0


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        ctx = Context(args)
        if args.command == "gen-data":
            cmd_gen_data(ctx, args)
        elif args.command == "train-flow":
            cmd_train_flow(ctx, args)
        elif args.command == "train-dsf":
            cmd_train_sampler(ctx, args, "dsf")
        elif args.command == "train-dlow":
            cmd_train_sampler(ctx, args, "dlow")
        elif args.command == "eval":
            cmd_eval(ctx, args)
        elif args.command == "ablate":
            cmd_ablate(ctx, args)
        elif args.command == "plot":
            cmd_plot(ctx, args)
        elif args.command == "demo":
            return cmd_demo(ctx, args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (io.FormatError, SimulationError, TrainingDiverged, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
