"""Command-line entry point: ``hiest {hierarchy,synth,train,eval,gradcheck,grid}``.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines whose
keys are the long flag names (dashes or underscores).  Flags given on the
command line override the file.  Exit codes: 0 success, 1 runtime failure,
2 usage or input-format error; failures also print one
``hiest-error code=<n> kind=<type> msg=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .data import (
    DataFormatError,
    DegenerateFeatureError,
    Standardizer,
    load_distances,
    load_readings,
    split_and_window,
    standardize,
    synth_hierarchical,
)
from .graph import DegenerateKernelError, build_adjacency, build_hierarchy, write_mapping, write_summary
from .model import Hiest, HiestConfig
from .training import TrainConfig, evaluate, metric_report, persistence_forecast, train

logger = logging.getLogger("hiest")


class UsageError(Exception):
    """Bad invocation or missing input; exit code 2."""


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------
def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError("expected 'key = value'", n, str(path))
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def write_config_file(path: str | Path, values: dict) -> None:
    def fmt(v):
        return ",".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v)

    lines = [f"{k} = {fmt(v)}" for k, v in sorted(values.items())
             if v is not None and k not in ("func", "config", "command")]
    Path(path).write_text("\n".join(lines) + "\n")


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for k, v in values.items():
        if k not in actions:
            raise UsageError(f"unknown config key {k!r}")
        act = actions[k]
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            defaults[k] = act.type(v) if act.type else v
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# argument groups
# ---------------------------------------------------------------------------
def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--verbose", action="store_true", help="debug logging")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=None, help="directory with readings.csv and distances.csv")
    p.add_argument("--readings", default=None, help="readings CSV (overrides --data)")
    p.add_argument("--distances", default=None, help="distances CSV (overrides --data)")
    p.add_argument("--threshold", type=float, default=0.1, help="Gaussian kernel sparsity threshold")
    p.add_argument("--ratios", type=_floats, default=[0.7, 0.1, 0.2], help="train,val,test split ratios")
    p.add_argument("--time-of-day", action="store_true", help="add a time-of-day input channel")
    p.add_argument("--null-value", type=float, default=None,
                   help="reading value treated as missing in targets (e.g. 0 for speed data)")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    d = HiestConfig()
    p.add_argument("--blocks", type=int, default=d.blocks, help="TCN blocks")
    p.add_argument("--layers", type=int, default=d.layers_per_block, help="layers per block")
    p.add_argument("--hidden", type=int, default=d.hidden, help="hidden channels D")
    p.add_argument("--num-global", type=int, default=d.num_global, help="global nodes N_g")
    p.add_argument("--eta", type=float, default=None, help="set all four eta values at once")
    for k in range(1, 5):
        p.add_argument(f"--eta{k}", type=float, default=getattr(d, f"eta{k}"), help=f"eta{k} propagation ratio")
    p.add_argument("--horizon", type=int, default=d.horizon, help="forecast steps T")
    p.add_argument("--history", type=int, default=d.history, help="input steps H")
    p.add_argument("--kernel", type=int, default=d.tcn_kernel, help="TCN kernel size")
    p.add_argument("--skip-dim", type=int, default=d.skip_dim, help="skip/output head width")
    p.add_argument("--adjacency-norm", choices=["rownorm", "raw"], default=d.adjacency_norm,
                   help="graph-convolution adjacency normalization")
    p.add_argument("--ag-refresh", choices=["step", "epoch"], default=d.ag_refresh,
                   help="recompute the global adjacency every step or once per epoch")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--lr", type=float, default=d.lr, help="learning rate")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="decoupled weight decay")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="batch size")
    p.add_argument("--epochs", type=int, default=d.max_epochs, help="maximum epochs")
    p.add_argument("--patience", type=int, default=d.patience, help="early-stopping patience (epochs)")
    p.add_argument("--clip", type=float, default=d.clip_norm, help="global gradient-norm clip")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="hiest", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hierarchy", help="build the regional hierarchy from distances", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--distances", default=None, help="distances CSV: from_id,to_id,distance")
    p.add_argument("--threshold", type=float, default=0.1, help="Gaussian kernel sparsity threshold")
    p.add_argument("--out", default=".", help="output directory for mapping.txt and summary.txt")
    p.set_defaults(func=cmd_hierarchy)

    p = sub.add_parser("synth", help="generate a synthetic hierarchical dataset", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--regions", type=int, default=4, help="planted regions")
    p.add_argument("--nodes-per-region", type=int, default=5, help="sensors per region")
    p.add_argument("--patterns", type=int, default=2, help="planted global temporal patterns")
    p.add_argument("--steps", type=int, default=2000, help="time steps")
    p.add_argument("--noise", type=float, default=0.25, help="observation noise std")
    p.add_argument("--interval", type=int, default=5, help="minutes between steps")
    p.add_argument("--out", default="synth", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _add_common(p)
    _add_data_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--out", default="run", help="output directory for logs and checkpoints")
    p.add_argument("--resume", default=None, help="checkpoint to resume from (last.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint file (best.ckpt)")
    p.add_argument("--data", default=None, help="directory with readings.csv and distances.csv")
    p.add_argument("--readings", default=None, help="readings CSV (overrides --data)")
    p.add_argument("--distances", default=None, help="distances CSV (overrides --data)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test", help="split to score")
    p.add_argument("--batch-size", type=int, default=64, help="evaluation batch size")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.add_argument("--baseline", action="store_true", help="also report last-value persistence")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("grid", help="sweep eta4 and N_g", formatter_class=fmt)
    _add_common(p)
    _add_data_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--eta4-values", type=_floats, default=[0.0, 0.2, 0.5, 0.8, 1.0], help="eta4 grid")
    p.add_argument("--num-global-values", type=_ints, default=[10, 15, 20, 25], help="N_g grid")
    p.add_argument("--out", default="grid", help="output directory")
    p.set_defaults(func=cmd_grid)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _paths(args) -> tuple[Path, Path]:
    readings = args.readings or (Path(args.data) / "readings.csv" if args.data else None)
    distances = args.distances or (Path(args.data) / "distances.csv" if args.data else None)
    if readings is None or distances is None:
        raise UsageError("need --data DIR or both --readings and --distances")
    for f in (readings, distances):
        if not Path(f).exists():
            raise UsageError(f"no such file: {f}")
    return Path(readings), Path(distances)


def _model_config(args, in_dim: int) -> HiestConfig:
    etas = [args.eta] * 4 if args.eta is not None else [args.eta1, args.eta2, args.eta3, args.eta4]
    return HiestConfig(
        blocks=args.blocks, layers_per_block=args.layers, hidden=args.hidden, num_global=args.num_global,
        eta1=etas[0], eta2=etas[1], eta3=etas[2], eta4=etas[3], horizon=args.horizon, history=args.history,
        tcn_kernel=args.kernel, skip_dim=args.skip_dim, in_dim=in_dim, out_dim=1,
        adjacency_norm=args.adjacency_norm, ag_refresh=args.ag_refresh,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                       max_epochs=args.epochs, patience=args.patience, clip_norm=args.clip, seed=args.seed)


def _load_problem(readings: Path, distances: Path, threshold: float, ratios, history: int, horizon: int,
                  time_of_day: bool, null_value: Optional[float], scaler: Optional[Standardizer] = None):
    frame = load_readings(readings)
    graph = build_adjacency(load_distances(distances), threshold, node_ids=frame.sensor_ids)
    hier = build_hierarchy(graph)
    sets = split_and_window(frame, ratios, history, horizon, time_of_day, null_value)
    sets, scaler = standardize(sets, scaler)
    return hier, sets, scaler


def _echo(args) -> dict:
    values = {k: v for k, v in vars(args).items() if k not in ("func",)}
    for k, v in sorted(values.items()):
        logger.info("config %s = %s", k, v)
    return values


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_hierarchy(args) -> int:
    if not args.distances:
        raise UsageError("--distances is required")
    if not Path(args.distances).exists():
        raise UsageError(f"no such file: {args.distances}")
    graph = build_adjacency(load_distances(args.distances), args.threshold)
    hier = build_hierarchy(graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mapping(out / "mapping.txt", hier)
    write_summary(out / "summary.txt", hier)
    print(hier.summary())
    return 0


def cmd_synth(args) -> int:
    ds = synth_hierarchical(args.regions, args.nodes_per_region, args.patterns, args.steps, args.seed,
                            noise=args.noise, interval_minutes=args.interval)
    ds.write(args.out)
    print(f"wrote {args.out}: {ds.graph.num_nodes} sensors, {args.steps} steps, {args.regions} regions")
    return 0


def cmd_train(args) -> int:
    readings, distances = _paths(args)
    values = _echo(args)
    in_dim = 2 if args.time_of_day else 1
    cfg = _model_config(args, in_dim)
    hier, (tr, va, te), scaler = _load_problem(readings, distances, args.threshold, args.ratios, cfg.history,
                                               cfg.horizon, args.time_of_day, args.null_value)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "run_config.txt", values)
    write_mapping(out / "mapping.txt", hier)
    meta = {"threshold": args.threshold, "ratios": list(args.ratios), "time_of_day": bool(args.time_of_day),
            "null_value": args.null_value, "seed": args.seed}
    model = Hiest(cfg, hier, seed=args.seed)
    result = train(model, tr, va, _train_config(args), out_dir=out, resume=args.resume, extra_meta=meta)
    report = evaluate(model, te, args.batch_size)
    report.write_csv(out / "test_metrics.csv")
    print(f"{hier.summary()} best_epoch={result.state.best_epoch} best_val_mae={result.state.best_val_mae:.4f}")
    print(report.table())
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required (e.g. run/best.ckpt); see 'hiest eval --help'")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"no such checkpoint: {args.checkpoint}; run 'hiest train' first")
    readings, distances = _paths(args)
    cfg, arrays, extra, _ = load_checkpoint(args.checkpoint)
    scaler = Standardizer(np.asarray(extra["norm_mean"]), np.asarray(extra["norm_std"]))
    hier, sets, _ = _load_problem(readings, distances, extra.get("threshold", 0.1),
                                  extra.get("ratios", [0.7, 0.1, 0.2]), cfg.history, cfg.horizon,
                                  extra.get("time_of_day", False), extra.get("null_value"), scaler)
    data = dict(zip(("train", "val", "test"), sets))[args.split]
    model = Hiest(cfg, hier)
    model.load_arrays(arrays)
    report = evaluate(model, data, args.batch_size)
    print(report.table())
    if args.out:
        report.write_csv(args.out)
    if args.baseline:
        full = data.all()
        base = metric_report(persistence_forecast(data), full.y, full.mask)
        print("persistence baseline")
        print(base.table())
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import objective_check, primitive_checks

    ok = True
    for name, rep in primitive_checks(args.step, args.tol, args.seed).items():
        print(f"{name:24s} max_rel_err={rep.max_error:.3e} {'PASS' if rep.passed else 'FAIL'}")
        ok &= rep.passed
    rep = objective_check(args.step, args.tol, args.seed)
    print(f"{'objective(6-node toy)':24s} max_rel_err={rep.max_error:.3e} {'PASS' if rep.passed else 'FAIL'}")
    ok &= rep.passed
    return 0 if ok else 1


def cmd_grid(args) -> int:
    from dataclasses import replace

    readings, distances = _paths(args)
    _echo(args)
    in_dim = 2 if args.time_of_day else 1
    base = _model_config(args, in_dim)
    hier, (tr, va, te), _ = _load_problem(readings, distances, args.threshold, args.ratios, base.history,
                                          base.horizon, args.time_of_day, args.null_value)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    grid = [("eta4", v) for v in args.eta4_values] + [("num_global", v) for v in args.num_global_values]
    for key, value in grid:
        cfg = replace(base, **{key: value})
        model = Hiest(cfg, hier, seed=args.seed)
        train(model, tr, va, _train_config(args))
        rep = evaluate(model, te, args.batch_size)
        for h, m in rep.horizons.items():
            rows.append({"param": key, "value": value, "horizon": h, **asdict(m)})
        print(f"{key}={value} test_mae={rep.overall.mae:.4f}")
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["param", "value", "horizon", "mae", "mape", "rmse"])
        w.writeheader()
        w.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(f"hiest-error code={code} kind={type(exc).__name__} msg={msg}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            _apply_config(sub, read_config_file(args.config))
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, DataFormatError, OSError) as exc:
        return _fail(2, exc)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    np.random.seed(args.seed)
    try:
        return args.func(args)
    except (UsageError, DataFormatError, DegenerateKernelError, DegenerateFeatureError) as exc:
        return _fail(2, exc)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("failure", exc_info=True)
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
