"""Command-line front end.

Every command reads an optional JSON config (validated against the bundled
schema; unknown keys are rejected), lets flags override individual keys, and
writes a run_manifest.json next to its artifacts.  A previous manifest can be
passed straight back via --config to repeat the run.  Artifacts are never
overwritten unless --force is given.  Progress goes to stderr; stdout stays
clean except for `describe`, whose table is the output.

Exit codes: 0 success, 2 bad configuration or arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .baselines import LassoConfig, lasso_oracle
from .errors import ConfigError
from .experiments import (CurveConfig, default_scaling_builders, nmse,
                          measure_forward_scaling, run_nmse_comparison,
                          run_phase_grid, run_training_curve,
                          success_probability, write_complexity_csv,
                          write_grid_csv, write_nmse_csv, write_sample_csv)
from .networks import (build_deepcodec, build_deepinverse, describe,
                       load_checkpoint)
from .signal_core import (STREAM_MATRIX, STREAM_TRIAL, PhasePoint,
                          gaussian_matrix, generate_dataset,
                          generate_sparse_signal, load_dataset, manifest_path,
                          save_dataset, substream)
from .training import TrainConfig, train

_DEFAULT_SIZES = {
    "deepcodec": [512, 2048, 8192, 32768],
    "deepinverse": [256, 1024, 4096, 16384],
}


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _schema() -> dict:
    text = importlib.resources.files("deepcodec").joinpath(
        "schemas/run_config.schema.json").read_text()
    return json.loads(text)


def _validate(command: str, cfg: dict) -> None:
    schema = _schema()
    try:
        jsonschema.validate(instance=cfg,
                            schema={"$defs": schema["$defs"],
                                    "$ref": f"#/$defs/{command}"})
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "(top level)"
        raise ConfigError(f"config invalid at {where}: {e.message}") from e


def _load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config} is not valid JSON: {e}")
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        # a run manifest wraps the config it ran with; accept it directly
        if "command" in cfg and "config" in cfg:
            if cfg["command"] != args.command:
                raise ConfigError(f"{args.config} is a manifest for "
                                  f"{cfg['command']!r}, not {args.command!r}")
            cfg = cfg["config"]
    return cfg


def _merge_flags(cfg: dict, args, keys: tuple[str, ...]) -> dict:
    merged = dict(cfg)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _outdir(args) -> str:
    if not getattr(args, "out", None):
        raise ConfigError("this command writes files; give --out DIR")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _check_writable(targets: list[str], force: bool) -> None:
    existing = [t for t in targets if os.path.exists(t)]
    if existing and not force:
        raise ConfigError("refusing to overwrite existing artifacts "
                          f"(use --force): {', '.join(sorted(existing))}")


def _write_manifest(outdir: str, command: str, cfg: dict,
                    artifacts: list[str], wall: float,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "artifacts": sorted(os.path.basename(a) for a in artifacts),
        "versions": {"deepcodec": __version__,
                     "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wall_time_s": wall,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(outdir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _lasso_config(cfg: dict) -> LassoConfig:
    return LassoConfig(**cfg.get("lasso", {}))


def _load_networks(paths: list[str]) -> dict:
    nets: dict = {}
    for path in paths:
        spec, params, _ = load_checkpoint(path)
        name = spec.name
        idx = 2
        while name in nets:
            name = f"{spec.name}-{idx}"
            idx += 1
        nets[name] = (spec, params)
    return nets


# ---------------------------------------------------------------------------
# Command handlers.  Each returns the artifact list it wrote.

def cmd_gen_data(cfg: dict, args) -> list[str]:
    outdir = _outdir(args)
    data = os.path.join(outdir, "dataset.bin")
    targets = [data, manifest_path(data)]
    _check_writable(targets, args.force)
    ds = generate_dataset(cfg["n"], cfg["k"], cfg["train"], cfg["test"],
                          cfg.get("seed", 0))
    save_dataset(ds, data)
    _progress(f"wrote {len(ds.train)} train / {len(ds.test)} test signals "
              f"(n={ds.n}, k={ds.k}) to {data}")
    return targets


def _dataset_from(cfg: dict):
    if "dataset" in cfg:
        try:
            return load_dataset(cfg["dataset"])
        except FileNotFoundError:
            raise ConfigError(f"dataset not found: {cfg['dataset']}")
    missing = [k for k in ("n", "k", "train", "test") if k not in cfg]
    if missing:
        raise ConfigError("give a dataset path or n/k/train/test to generate "
                          f"one (missing: {', '.join(missing)})")
    return generate_dataset(cfg["n"], cfg["k"], cfg["train"], cfg["test"],
                            cfg.get("data_seed", 0))


def cmd_train(cfg: dict, args) -> list[str]:
    outdir = _outdir(args)
    targets = [os.path.join(outdir, f)
               for f in ("final.ckpt", "best.ckpt", "train_curve.csv")]
    _check_writable(targets, args.force)
    ds = _dataset_from(cfg)
    if cfg["arch"] == "deepcodec":
        if "r" not in cfg:
            raise ConfigError("deepcodec needs r (undersampling factor)")
        spec = build_deepcodec(ds.n, cfg["r"],
                               filter_len=cfg.get("filter_len", 49),
                               relu_everywhere=cfg.get("relu_everywhere", False))
    else:
        if "m" not in cfg:
            raise ConfigError("deepinverse needs m (measurement count)")
        phi = gaussian_matrix(cfg["m"], ds.n,
                              substream(ds.master_seed, STREAM_MATRIX))
        spec = build_deepinverse(phi, filter_len=cfg.get("filter_len", 125))
    tc = TrainConfig(epochs=cfg["epochs"],
                     batch_size=cfg.get("batch_size", 64),
                     optimizer=cfg.get("optimizer", "adam"),
                     lr=cfg.get("lr", 1e-3),
                     seed=cfg.get("seed", 0),
                     eval_every=cfg.get("eval_every", 1),
                     checkpoint_dir=outdir)
    every = max(1, tc.epochs // 20)

    def cb(rec):
        if rec.epoch % every == 0 or rec.epoch == tc.epochs:
            _progress(f"epoch {rec.epoch}/{tc.epochs}: "
                      f"train {rec.train_loss:.6g}, test {rec.test_mse:.6g}")

    report = train(spec, ds, tc, progress=cb)
    _progress(f"best test mse {report.best_test_mse:.6g} at epoch "
              f"{report.best_epoch}")
    return targets


def cmd_eval(cfg: dict, args) -> list[str]:
    outdir = _outdir(args)
    table = os.path.join(outdir, "nmse_table.csv")
    sample_file = os.path.join(outdir, "sample_recovery.csv")
    _check_writable([table, sample_file], args.force)
    ds = _dataset_from(cfg)
    nets = _load_networks(cfg.get("checkpoints", []))
    if not nets and "lasso_m" not in cfg:
        raise ConfigError("nothing to evaluate: give checkpoints or lasso_m")
    rows, sample = run_nmse_comparison(ds, networks=nets,
                                       lasso_m=cfg.get("lasso_m"),
                                       lasso_config=_lasso_config(cfg),
                                       threads=args.threads,
                                       progress=_progress)
    write_nmse_csv(table, rows)
    write_sample_csv(sample_file, sample)
    for r in rows:
        _progress(f"{r.method}: delta={r.delta:.4g} rho={r.rho:.4g} "
                  f"mean nmse {r.mean_nmse:.6g} over {r.count} signals")
    return [table, sample_file]


def cmd_lasso(cfg: dict, args) -> list[str]:
    outdir = _outdir(args)
    out = os.path.join(outdir, "lasso_trials.csv")
    _check_writable([out], args.force)
    n, m, k = cfg["n"], cfg["m"], cfg["k"]
    q = cfg.get("q", 10)
    seed = cfg.get("seed", 0)
    lcfg = _lasso_config(cfg)
    vals = []
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial", "nmse", "lambda", "sweeps", "converged"])
        for j in range(q):
            sig = generate_sparse_signal(n, k,
                                         substream(seed, STREAM_TRIAL, 0, j, 0))
            phi = gaussian_matrix(m, n, substream(seed, STREAM_TRIAL, 0, j, 1))
            res = lasso_oracle(phi, phi.entries @ sig.vector[:, 0],
                               sig.vector[:, 0], lcfg)
            val = nmse(res.estimate, sig.vector)
            vals.append(val)
            w.writerow([j, repr(val), repr(res.lam), res.sweeps,
                        int(res.converged)])
    _progress(f"oracle lasso n={n} m={m} k={k}: mean nmse "
              f"{float(np.mean(vals)):.6g}, success "
              f"{success_probability(vals):.3f} over {q} trials")
    return [out]


def cmd_phase_grid(cfg: dict, args) -> list[str]:
    outdir = _outdir(args)
    out = os.path.join(outdir, "grid.csv")
    _check_writable([out], args.force)
    points = [PhasePoint(n=cfg["n"], m=p["m"], k=p["k"]) for p in cfg["points"]]
    nets = _load_networks(cfg.get("checkpoints", []))
    rows = run_phase_grid(points, cfg["q"], cfg.get("seed", 0),
                          lasso_config=_lasso_config(cfg),
                          networks=nets, threads=args.threads,
                          progress=_progress)
    write_grid_csv(out, rows)
    for r in rows:
        _progress(f"n={r.n} m={r.m} k={r.k} {r.method}: "
                  f"P={r.p_success:.3f}, mean nmse {r.mean_nmse:.6g}")
    return [out]


def cmd_curve(cfg: dict, args) -> list[str]:
    outdir = _outdir(args)
    targets = [os.path.join(outdir, f)
               for f in ("curve_deepcodec.csv", "curve_deepinverse.csv",
                         "curve_meta.json")]
    for net in ("deepcodec", "deepinverse"):
        targets += [os.path.join(outdir, net, f)
                    for f in ("final.ckpt", "best.ckpt", "train_curve.csv")]
    _check_writable(targets, args.force)
    ccfg = CurveConfig(
        n=cfg["n"], k=cfg["k"], r=cfg["r"], lasso_m=cfg["lasso_m"],
        n_train=cfg["train"], n_test=cfg["test"],
        master_seed=cfg.get("seed", 0),
        epochs_deepcodec=cfg["epochs_deepcodec"],
        epochs_deepinverse=cfg["epochs_deepinverse"],
        batch_size=cfg.get("batch_size", 32),
        lr=cfg.get("lr", 1e-3),
        eval_every=cfg.get("eval_every", 1),
        filter_len_deepcodec=cfg.get("filter_len_deepcodec", 49),
        filter_len_deepinverse=cfg.get("filter_len_deepinverse", 25),
        lasso=_lasso_config(cfg))
    run_training_curve(ccfg, outdir=outdir, threads=args.threads,
                       progress=_progress)
    return targets


def cmd_complexity(cfg: dict, args) -> list[str]:
    outdir = _outdir(args)
    out = os.path.join(outdir, "complexity.csv")
    _check_writable([out], args.force)
    builders = default_scaling_builders(r=cfg.get("r", 8),
                                        delta=cfg.get("delta", 0.25),
                                        seed=cfg.get("seed", 1234))
    sizes = {"deepcodec": cfg.get("sizes_deepcodec",
                                  _DEFAULT_SIZES["deepcodec"]),
             "deepinverse": cfg.get("sizes_deepinverse",
                                    _DEFAULT_SIZES["deepinverse"])}
    specs = []
    for name, make in builders.items():
        for n in sizes[name]:
            specs.append(make(n)[0])
    write_complexity_csv(out, specs)

    extra = None
    if cfg.get("measure", True):
        exponents, timings = {}, {}
        for name, make in builders.items():
            _progress(f"timing {name} forward over sizes {sizes[name]}")
            exp, times = measure_forward_scaling(
                make, sizes[name], batch=cfg.get("batch", 8),
                repeats=cfg.get("repeats", 3))
            exponents[name] = exp
            timings[name] = {str(n): t for n, t in times.items()}
            _progress(f"{name}: wall-time exponent {exp:.3f}")
        extra = {"measured_exponents": exponents,
                 "measured_seconds": timings}
    args.manifest_extra = extra
    return [out]


def cmd_describe(cfg: dict, args) -> list[str]:
    if cfg["arch"] == "deepcodec":
        if "r" not in cfg:
            raise ConfigError("deepcodec needs r")
        spec = build_deepcodec(cfg["n"], cfg["r"],
                               filter_len=cfg.get("filter_len", 49),
                               relu_everywhere=cfg.get("relu_everywhere", False))
    else:
        if "m" not in cfg:
            raise ConfigError("deepinverse needs m")
        phi = gaussian_matrix(cfg["m"], cfg["n"],
                              substream(cfg.get("seed", 0), STREAM_MATRIX))
        spec = build_deepinverse(phi, filter_len=cfg.get("filter_len", 125))
    print(describe(spec))
    return []


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "lasso": cmd_lasso,
    "phase-grid": cmd_phase_grid,
    "curve": cmd_curve,
    "complexity": cmd_complexity,
    "describe": cmd_describe,
}

# config keys each command accepts as flag overrides
_FLAG_KEYS = {
    "gen-data": ("n", "k", "train", "test", "seed"),
    "train": ("arch", "dataset", "n", "k", "train", "test", "data_seed", "r",
              "m", "filter_len", "relu_everywhere", "epochs", "batch_size",
              "optimizer", "lr", "eval_every", "seed"),
    "eval": ("dataset", "lasso_m"),
    "lasso": ("n", "m", "k", "q", "seed"),
    "phase-grid": ("n", "q", "seed"),
    "curve": ("n", "k", "r", "lasso_m", "train", "test", "seed",
              "epochs_deepcodec", "epochs_deepinverse", "batch_size", "lr",
              "eval_every", "filter_len_deepcodec", "filter_len_deepinverse"),
    "complexity": ("r", "delta", "batch", "repeats", "measure", "seed"),
    "describe": ("arch", "n", "r", "m", "filter_len", "relu_everywhere",
                 "seed"),
}

_WRITING = ("gen-data", "train", "eval", "lasso", "phase-grid", "curve",
            "complexity")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="deepcodec",
        description="Learned undersampled sensing and sparse recovery "
                    "experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", metavar="JSON",
                        help="config file; a previous run_manifest.json works")
        sp.add_argument("--threads", type=int, default=1,
                        help="worker threads for trial-level parallelism; "
                             "results are identical at any value")
        if name in _WRITING:
            sp.add_argument("--out", metavar="DIR", help="output directory")
            sp.add_argument("--force", action="store_true",
                            help="overwrite existing artifacts")
        return sp

    def intf(sp, *names):
        for nm in names:
            sp.add_argument(f"--{nm.replace('_', '-')}", dest=nm, type=int)

    def floatf(sp, *names):
        for nm in names:
            sp.add_argument(f"--{nm.replace('_', '-')}", dest=nm, type=float)

    sp = command("gen-data", "generate a sparse-signal dataset")
    intf(sp, "n", "k", "train", "test", "seed")

    sp = command("train", "train one network on a dataset")
    sp.add_argument("--arch", choices=["deepcodec", "deepinverse"])
    sp.add_argument("--dataset")
    sp.add_argument("--optimizer", choices=["adam", "sgd"])
    sp.add_argument("--relu-everywhere", dest="relu_everywhere",
                    action="store_const", const=True)
    intf(sp, "n", "k", "train", "test", "data_seed", "r", "m", "filter_len",
         "epochs", "batch_size", "eval_every", "seed")
    floatf(sp, "lr")

    sp = command("eval", "test-set recovery quality for checkpoints and lasso")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint", action="append", dest="checkpoints",
                    metavar="CKPT")
    intf(sp, "lasso_m")

    sp = command("lasso", "oracle-tuned lasso trials on random instances")
    intf(sp, "n", "m", "k", "q", "seed")

    sp = command("phase-grid", "success probability over (m, k) phase points")
    sp.add_argument("--point", action="append", dest="points_flag",
                    metavar="M,K", help="phase point, repeatable")
    sp.add_argument("--checkpoint", action="append", dest="checkpoints",
                    metavar="CKPT")
    intf(sp, "n", "q", "seed")

    sp = command("curve", "train both nets and compare against the lasso bar")
    intf(sp, "n", "k", "r", "lasso_m", "train", "test", "seed",
         "epochs_deepcodec", "epochs_deepinverse", "batch_size", "eval_every",
         "filter_len_deepcodec", "filter_len_deepinverse")
    floatf(sp, "lr")

    sp = command("complexity", "operation counts and measured scaling")
    sp.add_argument("--no-measure", dest="measure", action="store_const",
                    const=False, help="skip wall-time measurement")
    intf(sp, "r", "batch", "repeats", "seed")
    floatf(sp, "delta")

    sp = command("describe", "print a network's layer table")
    sp.add_argument("--arch", choices=["deepcodec", "deepinverse"])
    sp.add_argument("--relu-everywhere", dest="relu_everywhere",
                    action="store_const", const=True)
    intf(sp, "n", "r", "m", "filter_len", "seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tic = time.perf_counter()
    try:
        cfg = _load_config(args)
        cfg = _merge_flags(cfg, args, _FLAG_KEYS[args.command])
        if args.command == "phase-grid" and getattr(args, "points_flag", None):
            pts = []
            for text in args.points_flag:
                try:
                    m_str, k_str = text.split(",")
                    pts.append({"m": int(m_str), "k": int(k_str)})
                except ValueError:
                    raise ConfigError(f"bad --point {text!r}, expected M,K")
            cfg["points"] = pts
        if getattr(args, "checkpoints", None):
            cfg["checkpoints"] = args.checkpoints
        _validate(args.command, cfg)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        args.manifest_extra = None
        artifacts = _HANDLERS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure after a valid config
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    if args.command in _WRITING:
        _write_manifest(args.out, args.command, cfg, artifacts,
                        time.perf_counter() - tic,
                        extra=args.manifest_extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
