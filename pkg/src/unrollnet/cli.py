"""Command-line entry point: train, eval, unroll, params, sweep, dynamics.

Every run logs the fully resolved model description and seed to stderr
so results are reproducible from the log alone. Results land where the
flags say: CSV metrics, graph dumps and checkpoints under --out,
one-line summaries on stdout.

Exit codes: 0 success, 1 usage error, 2 invalid model description,
3 runtime failure (I/O, divergence, incompatible checkpoint).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import dynamics
from .graph import ConfigError, parse_config, serialize_config, train_section
from .presets import PRESET_NAMES, preset
from .store import ParamStore
from .trainer import (TrainConfig, collect_bn_stats, evaluate, load_cifar10,
                      train, write_metrics_csv)
from .unroll import (MissingStats, UnreachableReadout, config_digest,
                     param_count, unroll, wall_clock_estimate)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_RUNTIME = 3

DATA_ENV = "UNROLLNET_DATA"

# desk-scale profile: narrower states, smaller subsets, fewer epochs;
# learning rates and model semantics are untouched
DESK_WIDTH_DIVISOR = 8
DESK_MIN_WIDTH = 4
DESK_EPOCHS = 5
DESK_SUBSET_TRAIN = 1500
DESK_SUBSET_TEST = 400


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we own the codes
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="unrollnet", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp, data=False, out=False):
        src = sp.add_argument_group("model source")
        src.add_argument("--config", help="JSON model description file")
        src.add_argument("--preset", help=f"one of: {', '.join(PRESET_NAMES)}")
        sp.add_argument("--t", type=int, help="readout time override")
        sp.add_argument("--seed", type=int, help="RNG seed (default 0)")
        sp.add_argument("--desk-scale", action="store_true",
                        help="shrink widths/subset/epochs for CPU-scale runs")
        if data:
            sp.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
        if out:
            sp.add_argument("--out", help="output directory (default .)")

    sp = sub.add_parser("train", help="train a model and checkpoint it")
    common(sp, data=True, out=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)

    sp = sub.add_parser("eval", help="score a checkpoint at a readout time")
    common(sp, data=True)
    sp.add_argument("--checkpoint", help="checkpoint file from train")
    sp.add_argument("--batch", type=int)

    sp = sub.add_parser("unroll", help="compile and inspect the unrolled DAG")
    common(sp)
    sp.add_argument("--dump", action="store_true", help="print one node per line")

    sp = sub.add_parser("params", help="parameter counts per readout time")
    common(sp)
    sp.add_argument("--t-list", help="comma-separated readout times")

    sp = sub.add_parser("sweep", help="train/eval across readout times, emit CSV")
    common(sp, data=True, out=True)
    sp.add_argument("--t-list", required=True, help="comma-separated readout times")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)

    sp = sub.add_parser("dynamics", help="dynamical-systems demo: classify and trace")
    sp.add_argument("--seed", type=int)

    return p


# -- shared plumbing ----------------------------------------------------------


def _parse_t_list(text: str) -> tuple[int, ...]:
    try:
        ts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise _UsageError(f"--t-list must be comma-separated integers, got {text!r}")
    if not ts:
        raise _UsageError("--t-list is empty")
    return ts


def _desk_widths(name: str) -> tuple[int, ...]:
    base = preset(name)
    return tuple(max(DESK_MIN_WIDTH, st.channels // DESK_WIDTH_DIVISOR)
                 for st in base.graph.states)


def _load_model(args, t: int | None = None):
    """Resolve --config/--preset (+ optional readout override) to
    (graph, sharing, io, t, train section)."""
    has_t = t if t is not None else getattr(args, "t", None)
    if bool(args.config) == bool(args.preset):
        raise _UsageError("exactly one of --config or --preset is required")
    if args.config:
        if args.desk_scale:
            raise _UsageError("--desk-scale only applies to --preset models")
        with open(args.config) as f:
            text = f.read()
        g, s, io = parse_config(text)
        tr = train_section(text)
        if has_t is not None:
            io = replace(io, readout_times=frozenset({has_t}))
        return g, s, io, has_t or max(io.readout_times), tr
    if args.preset not in PRESET_NAMES:
        raise _UsageError(f"unknown preset {args.preset!r}; choose from "
                          f"{', '.join(PRESET_NAMES)}")
    widths = _desk_widths(args.preset) if args.desk_scale else None
    p = preset(args.preset, t=has_t, widths=widths)
    return p.graph, p.sharing, p.io, (has_t or p.default_t), {}


def _data_dir(args) -> str:
    d = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if not d:
        raise _UsageError(f"no dataset directory: pass --data or set ${DATA_ENV}")
    return d


def _train_cfg(args, section: dict) -> TrainConfig:
    kw = dict(section)
    if args.desk_scale:
        kw["epochs"] = DESK_EPOCHS
        kw["subset_train"] = DESK_SUBSET_TRAIN
        kw["subset_test"] = DESK_SUBSET_TEST
    if getattr(args, "epochs", None) is not None:
        kw["epochs"] = args.epochs
    if getattr(args, "batch", None) is not None:
        kw["batch_size"] = args.batch
    if args.seed is not None:
        kw["seed"] = args.seed
    return TrainConfig.from_dict(kw)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _log_resolved(g, s, io, cfg: TrainConfig | None) -> None:
    tr = dataclasses.asdict(cfg) if cfg is not None else None
    _log("resolved config:")
    _log(serialize_config(g, s, io, train=tr))


def _write_meta(out_dir: str, payload: dict) -> None:
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# -- commands -----------------------------------------------------------------


def _cmd_train(args) -> int:
    g, s, io, t, section = _load_model(args)
    cfg = _train_cfg(args, section)
    _log_resolved(g, s, io, cfg)
    train_set, test_set = load_cifar10(_data_dir(args), cfg.subset_train,
                                       cfg.subset_test)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.monotonic()

    def log_row(row):
        _log(f"epoch {row['epoch']:3d}  lr {row['lr']:.5g}  "
             f"train_loss {row['train_loss']:.4f}  "
             f"test_error {row['test_error']:.4f}  "
             f"({row['wall_seconds']:.1f}s)")

    store, metrics = train(g, s, io, t, cfg, train_set, test_set, log=log_row)
    ckpt = os.path.join(out_dir, "checkpoint.npz")
    store.save(ckpt)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
    _write_meta(out_dir, {
        "command": "train",
        "preset": args.preset,
        "config": args.config,
        "t": t,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "subset_train": cfg.subset_train,
        "subset_test": cfg.subset_test,
        "desk_scale": bool(args.desk_scale),
        "param_count": param_count(unroll(g, s, io, t)),
        "wall_seconds": time.monotonic() - t0,
    })
    print(f"t={t} final_test_error={metrics[-1]['test_error']:.4f} "
          f"checkpoint={ckpt}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if not args.checkpoint:
        raise _UsageError("eval requires --checkpoint")
    g, s, io, t, section = _load_model(args)
    cfg = _train_cfg(args, section)
    _log_resolved(g, s, io, cfg)
    store = ParamStore.load(args.checkpoint)
    expected = config_digest(g, s, io)
    if store.config_hash != expected:
        _log(f"note: checkpoint config {store.config_hash} differs from "
             f"{expected}; proceeding (readout-time overrides change the digest)")
    train_set, test_set = load_cifar10(_data_dir(args), cfg.subset_train,
                                       cfg.subset_test)
    batch = args.batch or 256
    try:
        err = evaluate(store, g, s, io, t, test_set, batch_size=batch)
    except MissingStats:
        _log(f"no normalization statistics for t={t}; collecting them "
             f"from the training images")
        collect_bn_stats(store, g, s, io, t, train_set.images, batch_size=batch)
        err = evaluate(store, g, s, io, t, test_set, batch_size=batch)
    print(f"t={t} test_error={err:.4f}")
    return EXIT_OK


def _cmd_unroll(args) -> int:
    g, s, io, t, _ = _load_model(args)
    _log_resolved(g, s, io, None)
    u = unroll(g, s, io, t)
    lo, hi = wall_clock_estimate(t)
    print(f"t={t} nodes={len(u.nodes)} live={len(u.live)} "
          f"groups={len(u.live_groups())} params={param_count(u)} "
          f"readouts={sorted(u.readouts)} wall_clock_ms={lo}..{hi}")
    if u.skipped:
        print(f"skipped (source state unpopulated): "
              + ", ".join(f"{a}>{b}@t{tt}" for a, b, tt in u.skipped))
    if args.dump:
        print(u.dump())
    return EXIT_OK


def _cmd_params(args) -> int:
    ts = _parse_t_list(args.t_list) if args.t_list else None
    rows = []
    for t in ts or (None,):
        g, s, io, t_res, _ = _load_model(args, t=t)
        u = unroll(g, s, io, t_res)
        rows.append((t_res, param_count(u)))
    print("t,params")
    for t_res, n in rows:
        print(f"{t_res},{n}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    ts = _parse_t_list(args.t_list)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    print("t,params,test_error")
    for t in ts:
        g, s, io, t_res, section = _load_model(args, t=t)
        cfg = _train_cfg(args, section)
        _log_resolved(g, s, io, cfg)
        train_set, test_set = load_cifar10(_data_dir(args), cfg.subset_train,
                                           cfg.subset_test)
        store, metrics = train(g, s, io, t_res, cfg, train_set, test_set)
        n_params = param_count(unroll(g, s, io, t_res))
        err = metrics[-1]["test_error"]
        rows.append((t_res, n_params, err))
        print(f"{t_res},{n_params},{err:.4f}", flush=True)
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w") as f:
        f.write("t,params,test_error\n")
        for t, n, e in rows:
            f.write(f"{t},{n},{e:.4f}\n")
    _write_meta(out_dir, {
        "command": "sweep",
        "preset": args.preset,
        "config": args.config,
        "t_list": list(ts),
        "seed": args.seed or 0,
        "desk_scale": bool(args.desk_scale),
    })
    _log(f"wrote {path}")
    return EXIT_OK


def _cmd_dynamics(args) -> int:
    seed = args.seed or 0
    _log(f"dynamics demo, seed={seed}")
    rng = np.random.default_rng(seed)

    delta = dynamics.Schedule("delta", value=1.0)
    const = dynamics.Schedule("constant", value=1.0)
    shared = dynamics.Schedule("constant", value="w")
    per_t = dynamics.Schedule("explicit", values=("w1", "w2", "w3"))
    cases = [
        ("input at t=0 only, shared weights", dynamics.SystemDescriptor(delta, shared)),
        ("input at every t, shared weights", dynamics.SystemDescriptor(const, shared)),
        ("input at t=0 only, per-t weights", dynamics.SystemDescriptor(delta, per_t)),
    ]
    for label, d in cases:
        c = dynamics.classify(d)
        tags = [k for k, v in sorted(c.items()) if v] or ["neither"]
        print(f"# {label}: {', '.join(tags)}")

    # symmetric operators so spectral norm == spectral radius and the
    # convergence threshold is exactly where the series theory puts it
    dim = 16
    a = rng.standard_normal((dim, dim))
    a = (a + a.T) / 2
    a *= 0.9 / np.linalg.norm(a, 2)
    x = rng.standard_normal(dim)
    h, terms, converged = dynamics.power_series_solve(a, x)
    resid = np.linalg.norm((np.eye(dim) - a) @ h - x)
    print(f"# contractive operator (spectral radius 0.9): converged={converged} "
          f"terms={terms} residual={resid:.3e}")
    b = a * (1.1 / 0.9)
    _, _, conv_b = dynamics.power_series_solve(b, x)
    print(f"# expansive operator (spectral radius 1.1): converged={conv_b}")
    print("term,term_norm")
    for k, nrm in dynamics.convergence_trace(a, x, 30):
        print(f"{k},{nrm:.6e}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "unroll": _cmd_unroll,
    "params": _cmd_params,
    "sweep": _cmd_sweep,
    "dynamics": _cmd_dynamics,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise _UsageError("a command is required")
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UnreachableReadout) as e:
        print(f"invalid model description: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as e:
        print(f"invalid request: {e}", file=sys.stderr)
        return EXIT_INVALID
    except MissingStats as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyError as e:
        print(f"runtime error: checkpoint lacks weights for group {e}",
              file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
