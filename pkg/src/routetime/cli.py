"""Command-line front end: ``routetime <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
error. Every run writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import SimulationSpec, load_observations, save_observations, simulate_trips, split
from .estimator import (
    EstimatorConfig,
    fit,
    joint_two_arc_minimum,
    naive_alternating_fit,
    random_search,
    two_arc_expected_msle,
)
from .inference import evaluate, heldout_loglik, predict
from .mixture import JointModel, SmsleDensity
from .network import (
    load_arc_table,
    load_network,
    project_turns,
    save_arc_table,
    save_network,
    synthetic_grid,
    travel_time_bounds,
)
from .route_choice import ChoiceParams

THREADS_ENV = "ROUTETIME_THREADS"


class UsageError(Exception):
    pass


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input not found: {path}")
    return p


def _write_manifest(out: Path, args, extra: dict | None = None) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {"subcommand": args.command, "argv": args.argv, "config": config,
                "seed": getattr(args, "seed", None), "version": __version__,
                "threads_env": THREADS_ENV, **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                                       encoding="utf-8")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory not writable: {out}")
    return out


def _config(args) -> EstimatorConfig:
    return EstimatorConfig(eta=args.eta, lam=args.lam, gamma=args.gamma, K=args.samples,
                           batch_size=args.batch, max_iters=args.max_iters, seed=args.seed,
                           estimator=args.estimator, threads=args.threads)


def _load_model(net, model_dir: Path) -> JointModel:
    params = json.loads((_existing(model_dir / "params.json")).read_text(encoding="utf-8"))
    T = load_arc_table(model_dir / "times.csv", "T")
    if len(T) != net.n_arcs:
        raise UsageError("travel-time table does not match the network")
    return JointModel(project_turns(net), T, ChoiceParams(np.array(params["b"], dtype=float)),
                      SmsleDensity(params.get("gamma", 1.0)))


# -- subcommands ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    out = _outdir(args)
    try:
        rows, cols = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects RxC, got {args.grid!r}") from None
    net, T_true = synthetic_grid(rows, cols, args.spacing, profile=args.grid_profile)
    turns = project_turns(net)
    spec = SimulationSpec(net, T_true, n_trips=3 * args.trips, noise_kind=args.noise_kind, seed=args.seed)
    obs = simulate_trips(spec, turns)
    parts = split(obs, (1 / 3, 1 / 3, 1 / 3), seed=args.seed)
    save_network(net, out / "network.txt")
    bounds = travel_time_bounds(net)
    save_arc_table(out / "t_true.csv", {"T_true": T_true, "t_min": bounds.t_min, "t_max": bounds.t_max}, net)
    for part in parts:
        save_observations(out / f"{part.manifest['split']}.obs", part)
    if not args.no_figures:
        from .plotting import plot_network_times
        plot_network_times(net, T_true, out / "t_true.png", "ground-truth travel times")
    _write_manifest(out, args, {"counts": {p.manifest["split"]: len(p) for p in parts},
                                "grid_profile": args.grid_profile,
                                "noise": {"mu": spec.lognormal()[0], "sigma": spec.lognormal()[1]}})


def cmd_estimate(args) -> None:
    out = _outdir(args)
    net = load_network(_existing(args.network))
    obs = load_observations(_existing(args.obs))
    if not args.with_paths:
        obs = obs.without_paths()
    T_ref = load_arc_table(_existing(args.t_true), "T_true") if args.t_true else None
    val = load_observations(_existing(args.val)).observations if args.val else None
    turns = project_turns(net)
    bounds = travel_time_bounds(net)
    cfg = _config(args)
    res = fit(obs.observations, turns, bounds, cfg, T_reference=T_ref, validation=val,
              val_every=args.val_every if val else 0, od=obs.od)
    save_arc_table(out / "times.csv", {"T": res.T, "t_min": bounds.t_min, "t_max": bounds.t_max}, net)
    (out / "params.json").write_text(json.dumps({"b": [float(v) for v in res.b], "gamma": cfg.gamma,
                                                 "features": ["tt_nonres", "tt_res", "intersection",
                                                              "left_turn", "u_turn"]},
                                                indent=2) + "\n", encoding="utf-8")
    res.write_trace(out / "trace.csv")
    summary = {"best_iteration": res.best_iteration, "stopped": res.stopped,
               "iterations": len(res.trace), "wall_time": res.wall_time, "diagnostics": res.diagnostics}
    if T_ref is not None:
        summary["t_rmsle"] = float(np.sqrt(np.mean(np.log(res.T / T_ref) ** 2)))
    (out / "fit_summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n", encoding="utf-8")
    if not args.no_figures:
        from .plotting import plot_network_times, plot_trace
        plot_trace(res.trace, out / "trace.png")
        plot_network_times(net, res.T, out / "times.png", "estimated travel times")
    _write_manifest(out, args, {"estimator_config": cfg.summary()})
    print(json.dumps({k: v for k, v in summary.items() if k != "diagnostics"}, default=float))


def cmd_evaluate(args) -> None:
    out = _outdir(args)
    net = load_network(_existing(args.network))
    model = _load_model(net, _existing(args.model))
    obs = load_observations(_existing(args.obs))
    report = evaluate(model, obs.observations, K=args.samples, rng=args.seed)
    report.write_csv(out / "report.csv")
    summary = {f"rmsle_{k}": v for k, v in report.scores.items()}
    if any(ob.r is not None for ob in obs):
        summary["heldout_loglik"] = heldout_loglik(model, obs.observations)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if not args.no_figures:
        from .plotting import plot_predictions
        plot_predictions([r["t"] for r in report.records], [r["geomean"] for r in report.records],
                         out / "predictions.png")
    _write_manifest(out, args)
    print(json.dumps(summary))


def _read_pairs(path: Path) -> list:
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.lower().startswith("o,"):
            continue
        try:
            o, d = (int(v) for v in line.split(",")[:2])
        except ValueError:
            raise UsageError(f"{path}:{lineno}: expected 'o,d'") from None
        pairs.append((o, d))
    return pairs


def cmd_predict(args) -> None:
    out = _outdir(args)
    net = load_network(_existing(args.network))
    model = _load_model(net, _existing(args.model))
    pairs = _read_pairs(_existing(args.pairs))
    preds = predict(pairs, model, K=args.samples, seed=args.seed)
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("o,d,mean,geomean,mode,n_samples,exact\n")
        for p in preds:
            fh.write(f"{p.o},{p.d},{p.mean!r},{p.geomean!r},{p.mode!r},{p.n_samples},{int(p.exact)}\n")
    _write_manifest(out, args)


def cmd_search(args) -> None:
    out = _outdir(args)
    net = load_network(_existing(args.network))
    train = load_observations(_existing(args.obs))
    if not args.with_paths:
        train = train.without_paths()
    val = load_observations(_existing(args.val))
    res = random_search(train.observations, val.observations, project_turns(net), None,
                        budget=args.budget, base=_config(args), seed=args.seed,
                        include_default=args.include_default)
    res.write_leaderboard(out / "leaderboard.csv")
    (out / "best_config.json").write_text(json.dumps(res.best.summary(), indent=2) + "\n", encoding="utf-8")
    if not args.no_figures:
        from .plotting import plot_leaderboard
        plot_leaderboard(res.leaderboard, out / "leaderboard.png")
    _write_manifest(out, args)
    print(json.dumps({"best_val_rmsle": res.best_rmsle, "eta": res.best.eta, "lambda": res.best.lam,
                      "gamma": res.best.gamma}))


def cmd_two_arc(args) -> None:
    out = _outdir(args)
    et = naive_alternating_fit("expected_time", args.iters)
    el = naive_alternating_fit("expected_loss", args.iters)
    with open(out / "two_arc_trace.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,expected_time_x,expected_loss_x,expected_loss_msle\n")
        for k in range(args.iters + 1):
            x1 = float(et[k]) if k < len(et) else math.inf
            x2 = float(el[k]) if k < len(el) else float(el[-1])
            fh.write(f"{k},{x1!r},{x2!r},{float(two_arc_expected_msle(x2))!r}\n")
    scan = np.linspace(0.5, 5.0, 451)
    with open(out / "two_arc_scan.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,expected_msle\n")
        for x, v in zip(scan.tolist(), two_arc_expected_msle(scan).tolist()):
            fh.write(f"{x!r},{v!r}\n")
    x_opt, loss_opt = joint_two_arc_minimum()
    summary = {"fixed_point_x": float(el[-1]), "fixed_point_msle": float(two_arc_expected_msle(el[-1])),
               "joint_x": x_opt, "joint_msle": loss_opt}
    (out / "two_arc_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if not args.no_figures:
        from .plotting import plot_two_arc
        plot_two_arc(et, el, scan, two_arc_expected_msle(scan), out / "two_arc.png")
    _write_manifest(out, args)
    print(json.dumps(summary))


# -- parser --------------------------------------------------------------------------------

def _fit_flags(p: argparse.ArgumentParser) -> None:
    d = EstimatorConfig()
    p.add_argument("--eta", type=float, default=d.eta, help="learning rate")
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="regularization weight")
    p.add_argument("--gamma", type=float, default=d.gamma, help="observation density precision")
    p.add_argument("--samples", "-K", type=int, default=d.K, help="sampled paths per observation")
    p.add_argument("--batch", type=int, default=d.batch_size, help="mini-batch size")
    p.add_argument("--max-iters", type=int, default=d.max_iters)
    p.add_argument("--estimator", choices=("online", "offline"), default=d.estimator)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--with-paths", dest="with_paths", action="store_true", default=True,
                   help="use observed paths when present (default)")
    g.add_argument("--no-paths", dest="with_paths", action="store_false", help="drop observed paths")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routetime", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="synthetic grid, ground truth and datasets")
    p.add_argument("--grid", default="10x10")
    p.add_argument("--spacing", type=float, default=600.0)
    p.add_argument("--trips", type=int, default=10_000, help="observations per split")
    p.add_argument("--noise-kind", choices=("normal", "moments"), default="normal",
                   help="noise parameters describe the underlying normal or the multiplier itself")
    p.add_argument("--grid-profile", choices=("speed", "seconds"), default="speed",
                   help="read the position term as a speed (m/s) or as seconds")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("estimate", parents=[common], help="fit choice weights and travel times")
    p.add_argument("--network", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--t-true", help="arc table with a T_true column, traced as RMSLE")
    p.add_argument("--val", help="validation observations")
    p.add_argument("--val-every", type=int, default=25)
    _fit_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", parents=[common], help="RMSLE report for a fitted model")
    p.add_argument("--network", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--model", required=True, help="output directory of 'estimate'")
    p.add_argument("--samples", "-K", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="predict travel times for OD pairs")
    p.add_argument("--network", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True, help="file of 'o,d' lines")
    p.add_argument("--samples", "-K", type=int, default=100)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    p.add_argument("--network", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--budget", type=int, default=20)
    p.add_argument("--include-default", action="store_true")
    _fit_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("two-arc-demo", parents=[common], help="iterative-scheme counterexample traces")
    p.add_argument("--iters", type=int, default=10)
    p.set_defaults(func=cmd_two_arc)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
