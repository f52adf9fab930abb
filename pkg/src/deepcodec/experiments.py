"""Experiment harnesses: recovery-quality tables, phase grids, training-curve
comparisons, and operation-count/scaling reports.

Every Monte-Carlo trial draws from its own substream of the master seed and
results are aggregated in trial order, so numbers are identical at any thread
count.  CSV artifacts contain no wall-clock entries; measured timings are
returned to the caller instead.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import LassoConfig, lasso_oracle
from .errors import ConfigError
from .networks import NetworkSpec, build_deepcodec, build_deepinverse, forward, \
    init_params
from .signal_core import (STREAM_MATRIX, STREAM_TRIAL, Dataset, PhasePoint,
                          gaussian_matrix, generate_dataset,
                          generate_sparse_signal, substream)
from .training import TrainConfig, TrainReport, network_inputs, train, \
    write_train_curve

SUCCESS_NMSE = 0.01  # a trial succeeds when nmse <= this


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """||estimate - truth||^2 / ||truth||^2 for flat or (L, 1) vectors."""
    e = np.asarray(estimate, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
    denom = float(t @ t)
    if denom == 0.0:
        raise ValueError("truth vector is identically zero")
    d = e - t
    return float(d @ d) / denom


def success_probability(values, threshold: float = SUCCESS_NMSE) -> float:
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no trials")
    return float(np.mean(vals <= threshold))


def _batched_estimates(spec: NetworkSpec, params: dict, signals: np.ndarray,
                       chunk: int = 256) -> np.ndarray:
    inputs = network_inputs(spec, signals)
    outs = []
    for lo in range(0, inputs.shape[0], chunk):
        out, _ = forward(spec, params, inputs[lo:lo + chunk], mode="eval")
        outs.append(out)
    return np.concatenate(outs, axis=0)


def _map_trials(worker, count: int, threads: int) -> list:
    """Run worker(i) for i in range(count); results land in index order."""
    if threads <= 1:
        return [worker(i) for i in range(count)]
    results = [None] * count
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(worker, i): i for i in range(count)}
        for fut, i in futures.items():
            results[i] = fut.result()
    return results


# ---------------------------------------------------------------------------
# Recovery-quality comparison on a dataset's test split.

@dataclass
class TableRow:
    method: str
    n: int
    m: int
    k: int
    delta: float
    rho: float
    mean_nmse: float
    count: int


def _net_measurement_count(spec: NetworkSpec) -> int:
    if spec.measurement_index is not None:
        return spec.measurement_shape[0]
    first = spec.layers[0]
    if first.kind == "adjoint":
        return first.matrix.m
    raise ConfigError(f"{spec.name}: no measurement layer or adjoint front end")


def run_nmse_comparison(dataset: Dataset, networks: dict | None = None,
                        lasso_m: int | None = None,
                        lasso_config: LassoConfig | None = None,
                        threads: int = 1, progress=None
                        ) -> tuple[list[TableRow], dict[str, np.ndarray]]:
    """Mean test-set NMSE per method.

    networks maps name -> (spec, params).  When lasso_m is given, a fresh
    operator is drawn from the dataset's matrix substream and each test signal
    gets a full oracle-tuned solve.  Also returns the first test signal's
    truth and per-method estimates for a recovery-example artifact.
    """
    rows: list[TableRow] = []
    sample: dict[str, np.ndarray] = {}
    signals = dataset.test_array()
    count = signals.shape[0]
    sample["truth"] = signals[0, :, 0].copy()

    for name, (spec, params) in (networks or {}).items():
        if progress:
            progress(f"evaluating {name} on {count} test signals")
        est = _batched_estimates(spec, params, signals)
        vals = [nmse(est[i], signals[i]) for i in range(count)]
        m = _net_measurement_count(spec)
        rows.append(TableRow(method=name, n=dataset.n, m=m, k=dataset.k,
                             delta=m / dataset.n, rho=dataset.k / m,
                             mean_nmse=float(np.mean(vals)), count=count))
        sample[name] = est[0, :, 0].copy()

    if lasso_m is not None:
        if progress:
            progress(f"oracle lasso (m={lasso_m}) on {count} test signals")
        phi = gaussian_matrix(lasso_m, dataset.n,
                              substream(dataset.master_seed, STREAM_MATRIX))
        cfg = lasso_config or LassoConfig()

        def solve(i: int) -> tuple[float, np.ndarray]:
            y = phi.entries @ signals[i, :, 0]
            res = lasso_oracle(phi, y, signals[i, :, 0], cfg)
            return nmse(res.estimate, signals[i]), res.estimate[:, 0]

        solved = _map_trials(solve, count, threads)
        vals = [v for v, _ in solved]
        rows.append(TableRow(method="lasso", n=dataset.n, m=lasso_m, k=dataset.k,
                             delta=lasso_m / dataset.n, rho=dataset.k / lasso_m,
                             mean_nmse=float(np.mean(vals)), count=count))
        sample["lasso"] = solved[0][1].copy()
    return rows, sample


def write_nmse_csv(path: str, rows: list[TableRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "n", "m", "k", "delta", "rho", "mean_nmse", "count"])
        for r in rows:
            w.writerow([r.method, r.n, r.m, r.k, repr(r.delta), repr(r.rho),
                        repr(r.mean_nmse), r.count])


def write_sample_csv(path: str, sample: dict[str, np.ndarray]) -> None:
    """Columns: sample index, truth, one column per method."""
    names = [k for k in sample if k != "truth"]
    n = sample["truth"].shape[0]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "truth"] + names)
        for i in range(n):
            w.writerow([i, repr(float(sample["truth"][i]))]
                       + [repr(float(sample[name][i])) for name in names])


# ---------------------------------------------------------------------------
# Phase grid: success probability across (m, k) cells.

@dataclass
class GridRow:
    n: int
    m: int
    k: int
    delta: float
    rho: float
    method: str
    q: int
    p_success: float
    mean_nmse: float


def _net_fits_point(spec: NetworkSpec, point: PhasePoint) -> bool:
    first = spec.layers[0]
    if first.kind == "adjoint":
        return first.matrix.n == point.n and first.matrix.m == point.m
    return (spec.input_length == point.n
            and spec.measurement_index is not None
            and spec.measurement_shape[0] == point.m)


def run_phase_grid(points: list[PhasePoint], q: int, master_seed: int,
                   lasso_config: LassoConfig | None = None,
                   networks: dict | None = None,
                   threshold: float = SUCCESS_NMSE,
                   threads: int = 1, progress=None) -> list[GridRow]:
    """Monte-Carlo success probability at each phase point.

    Trial j of point i draws its signal from substream (trial, i, j, 0) and,
    for the lasso method, a fresh operator from (trial, i, j, 1).  Networks
    are evaluated on the same per-trial signals (their operator is the fixed
    one they were built around) and must match the point's (n, m) exactly.
    """
    if q < 1:
        raise ValueError("q must be positive")
    networks = networks or {}
    for name, (spec, _) in networks.items():
        for pt in points:
            if not _net_fits_point(spec, pt):
                raise ConfigError(f"network {name!r} does not fit point "
                                  f"(n={pt.n}, m={pt.m})")
    cfg = lasso_config or LassoConfig()
    rows: list[GridRow] = []
    for pi, pt in enumerate(points):
        if progress:
            progress(f"point {pi + 1}/{len(points)}: n={pt.n} m={pt.m} k={pt.k}, "
                     f"q={q} trials")

        def trial(j: int, pi=pi, pt=pt) -> dict[str, float]:
            sig = generate_sparse_signal(
                pt.n, pt.k, substream(master_seed, STREAM_TRIAL, pi, j, 0))
            out: dict[str, float] = {}
            phi = gaussian_matrix(
                pt.m, pt.n, substream(master_seed, STREAM_TRIAL, pi, j, 1))
            y = phi.entries @ sig.vector[:, 0]
            res = lasso_oracle(phi, y, sig.vector[:, 0], cfg)
            out["lasso"] = nmse(res.estimate, sig.vector)
            for name, (spec, params) in networks.items():
                est = _batched_estimates(spec, params, sig.vector[None])
                out[name] = nmse(est[0], sig.vector)
            return out

        outcomes = _map_trials(trial, q, threads)
        for method in outcomes[0]:
            vals = [o[method] for o in outcomes]
            rows.append(GridRow(n=pt.n, m=pt.m, k=pt.k, delta=pt.delta,
                                rho=pt.rho, method=method, q=q,
                                p_success=success_probability(vals, threshold),
                                mean_nmse=float(np.mean(vals))))
    return rows


def write_grid_csv(path: str, rows: list[GridRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "m", "k", "delta", "rho", "method", "q",
                    "p_success", "mean_nmse"])
        for r in rows:
            w.writerow([r.n, r.m, r.k, repr(r.delta), repr(r.rho), r.method,
                        r.q, repr(r.p_success), repr(r.mean_nmse)])


# ---------------------------------------------------------------------------
# Training-curve comparison: both nets against the oracle lasso bar.

@dataclass
class CurveConfig:
    n: int
    k: int
    r: int
    lasso_m: int
    n_train: int
    n_test: int
    master_seed: int
    epochs_deepcodec: int
    epochs_deepinverse: int
    batch_size: int = 32
    lr: float = 1e-3
    eval_every: int = 1
    filter_len_deepcodec: int = 49
    filter_len_deepinverse: int = 25
    lasso: LassoConfig | None = None

    def __post_init__(self):
        if self.n % self.r != 0:
            raise ConfigError(f"n={self.n} must be divisible by r={self.r}")
        if not (1 <= self.lasso_m <= self.n):
            raise ConfigError(f"lasso_m must be in [1, n], got {self.lasso_m}")


@dataclass
class CurveResult:
    deepcodec: TrainReport
    deepinverse: TrainReport
    baseline_mse: float
    lasso_mean_nmse: float
    deepcodec_mean_nmse: float   # at best parameters
    deepinverse_mean_nmse: float


def run_training_curve(cfg: CurveConfig, outdir: str | None = None,
                       threads: int = 1, progress=None) -> CurveResult:
    """Train both architectures on one dataset and locate where each one's
    test error first drops below the oracle lasso's.

    The lasso and the adjoint-fronted net share the same operator (drawn from
    the dataset's matrix substream), so the race is on identical data.
    """
    if progress:
        progress(f"dataset: n={cfg.n} k={cfg.k}, "
                 f"{cfg.n_train} train / {cfg.n_test} test")
    ds = generate_dataset(cfg.n, cfg.k, cfg.n_train, cfg.n_test, cfg.master_seed)
    phi = gaussian_matrix(cfg.lasso_m, cfg.n,
                          substream(cfg.master_seed, STREAM_MATRIX))
    lcfg = cfg.lasso or LassoConfig()

    if progress:
        progress(f"oracle lasso bar at m={cfg.lasso_m} over {cfg.n_test} "
                 f"test signals")
    tests = ds.test_array()

    def solve(i: int) -> tuple[float, float]:
        x = tests[i, :, 0]
        res = lasso_oracle(phi, phi.entries @ x, x, lcfg)
        return res.sq_error, nmse(res.estimate, tests[i])

    solved = _map_trials(solve, tests.shape[0], threads)
    baseline_mse = float(np.mean([s for s, _ in solved]))
    lasso_mean_nmse = float(np.mean([v for _, v in solved]))
    if progress:
        progress(f"lasso: mean test mse {baseline_mse:.6g}, "
                 f"mean nmse {lasso_mean_nmse:.6g}")

    def sub(name: str) -> str | None:
        if outdir is None:
            return None
        path = os.path.join(outdir, name)
        os.makedirs(path, exist_ok=True)
        return path

    reports = {}
    nets = {
        "deepcodec": build_deepcodec(cfg.n, cfg.r,
                                     filter_len=cfg.filter_len_deepcodec),
        "deepinverse": build_deepinverse(phi,
                                         filter_len=cfg.filter_len_deepinverse),
    }
    epochs = {"deepcodec": cfg.epochs_deepcodec,
              "deepinverse": cfg.epochs_deepinverse}
    means = {}
    for name, spec in nets.items():
        tc = TrainConfig(epochs=epochs[name], batch_size=cfg.batch_size,
                         optimizer="adam", lr=cfg.lr, seed=cfg.master_seed,
                         eval_every=cfg.eval_every, checkpoint_dir=sub(name))
        if progress:
            progress(f"training {name}: {tc.epochs} epochs, "
                     f"batch {tc.batch_size}")
        cb = None
        if progress:
            def cb(rec, name=name):
                if rec.epoch % 25 == 0:
                    progress(f"  {name} epoch {rec.epoch}: "
                             f"train {rec.train_loss:.6g}, "
                             f"test {rec.test_mse:.6g}")
        reports[name] = train(spec, ds, tc, baseline_mse=baseline_mse,
                              progress=cb)
        est = _batched_estimates(spec, reports[name].best_params, tests)
        means[name] = float(np.mean([nmse(est[i], tests[i])
                                     for i in range(tests.shape[0])]))
        if progress:
            progress(f"{name}: crossing epoch {reports[name].crossing_epoch}, "
                     f"best test mse {reports[name].best_test_mse:.6g}, "
                     f"mean nmse {means[name]:.6g}")

    result = CurveResult(deepcodec=reports["deepcodec"],
                         deepinverse=reports["deepinverse"],
                         baseline_mse=baseline_mse,
                         lasso_mean_nmse=lasso_mean_nmse,
                         deepcodec_mean_nmse=means["deepcodec"],
                         deepinverse_mean_nmse=means["deepinverse"])
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        write_train_curve(os.path.join(outdir, "curve_deepcodec.csv"),
                          result.deepcodec.records)
        write_train_curve(os.path.join(outdir, "curve_deepinverse.csv"),
                          result.deepinverse.records)
        meta = {
            "baseline_mse": baseline_mse,
            "crossing_epoch": {
                "deepcodec": result.deepcodec.crossing_epoch,
                "deepinverse": result.deepinverse.crossing_epoch,
            },
            "mean_nmse": {
                "lasso": lasso_mean_nmse,
                "deepcodec": result.deepcodec_mean_nmse,
                "deepinverse": result.deepinverse_mean_nmse,
            },
            "best_test_mse": {
                "deepcodec": result.deepcodec.best_test_mse,
                "deepinverse": result.deepinverse.best_test_mse,
            },
            "config": {
                "n": cfg.n, "k": cfg.k, "r": cfg.r, "lasso_m": cfg.lasso_m,
                "n_train": cfg.n_train, "n_test": cfg.n_test,
                "master_seed": cfg.master_seed,
                "epochs": epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
            },
        }
        with open(os.path.join(outdir, "curve_meta.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
    return result


# ---------------------------------------------------------------------------
# Operation counts and measured scaling.

@dataclass
class MacRow:
    network: str
    layer: str
    kind: str
    length: int
    channels: int
    macs: int


def mac_table(spec: NetworkSpec) -> list[MacRow]:
    """Multiply-accumulate count per layer at the spec's own geometry.

    conv: filter_len * in_ch * out_ch * out_len; adjoint: m * n;
    batchnorm: 2 * channels * length (scale and shift); permutations: 0.
    """
    rows = []
    for layer, (length, ch) in zip(spec.layers, spec.shapes[1:]):
        if layer.kind == "conv":
            macs = layer.filter_len * layer.in_channels * layer.out_channels \
                * length
        elif layer.kind == "adjoint":
            macs = layer.matrix.m * layer.matrix.n
        elif layer.kind == "batchnorm":
            macs = 2 * layer.channels * length
        else:
            macs = 0
        rows.append(MacRow(network=spec.name, layer=layer.name, kind=layer.kind,
                           length=length, channels=ch, macs=macs))
    return rows


def total_macs(spec: NetworkSpec) -> int:
    return sum(r.macs for r in mac_table(spec))


def encode_macs(spec: NetworkSpec) -> int:
    """MACs up to and including the measurement layer."""
    if spec.measurement_index is None:
        raise ValueError(f"{spec.name} has no measurement layer")
    return sum(r.macs for r in mac_table(spec)[:spec.measurement_index + 1])


def signal_length(spec: NetworkSpec) -> int:
    """Length of the signal the network reconstructs (not its input length;
    an adjoint-fronted net consumes shorter measurement vectors)."""
    first = spec.layers[0]
    if first.kind == "adjoint":
        return first.matrix.n
    return spec.input_length


def write_complexity_csv(path: str, specs: list[NetworkSpec]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["network", "n", "layer", "kind", "length", "channels",
                    "macs"])
        for spec in specs:
            n = signal_length(spec)
            for r in mac_table(spec):
                w.writerow([r.network, n, r.layer, r.kind, r.length,
                            r.channels, r.macs])
            w.writerow([spec.name, n, "TOTAL", "", "", "", total_macs(spec)])
            if spec.measurement_index is not None:
                w.writerow([spec.name, n, "ENCODE", "", "", "",
                            encode_macs(spec)])


def measure_forward_scaling(make, sizes, batch: int = 8, repeats: int = 3
                            ) -> tuple[float, dict[int, float]]:
    """Wall-time growth exponent of eval forward passes across problem sizes.

    make(n) returns (spec, params).  Each size is timed as the minimum over
    `repeats` runs after one warmup; the exponent is the log-log slope.
    Timings vary run to run, so nothing here belongs in reproducible artifacts.
    """
    if len(sizes) < 2:
        raise ValueError("need at least two sizes")
    times: dict[int, float] = {}
    for n in sizes:
        spec, params = make(n)
        x = substream(0, 97, n).standard_normal((batch, spec.input_length, 1))
        forward(spec, params, x, mode="eval")  # warmup
        best = np.inf
        for _ in range(repeats):
            tic = time.perf_counter()
            forward(spec, params, x, mode="eval")
            best = min(best, time.perf_counter() - tic)
        times[n] = best
    ns = np.array(sorted(times), dtype=np.float64)
    ts = np.array([times[int(n)] for n in ns])
    exponent = float(np.polyfit(np.log(ns), np.log(ts), 1)[0])
    return exponent, times


def default_scaling_builders(r: int = 8, delta: float = 0.25, seed: int = 1234,
                             filter_len_deepcodec: int = 49,
                             filter_len_deepinverse: int = 125
                             ) -> dict[str, callable]:
    """Size-parameterized constructors for the two architectures, used to
    measure how forward cost grows with signal length."""
    def make_codec(n: int):
        spec = build_deepcodec(n, r, filter_len=filter_len_deepcodec)
        return spec, init_params(spec, seed)

    def make_inverse(n: int):
        m = max(1, round(delta * n))
        phi = gaussian_matrix(m, n, substream(seed, STREAM_MATRIX, n))
        spec = build_deepinverse(phi, filter_len=filter_len_deepinverse)
        return spec, init_params(spec, seed)

    return {"deepcodec": make_codec, "deepinverse": make_inverse}
