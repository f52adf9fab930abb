import csv
import math
import os

import numpy as np
import pytest

from deepcodec.errors import ConfigError
from deepcodec.networks import (build_deepcodec, build_deepinverse,
                                flatten_params, load_checkpoint)
from deepcodec.signal_core import gaussian_matrix, generate_dataset, measure, \
    substream
from deepcodec.training import (AdamState, TrainConfig, adam_step, init_adam,
                                mse_loss, network_inputs, sgd_step, train,
                                write_train_curve)

from helpers import REL_TOL, grad_gap, numeric_grad


def test_mse_loss_known_values():
    out = np.array([[1.0], [2.0]])
    tgt = np.zeros((2, 1))
    loss, grad = mse_loss(out, tgt)
    assert loss == 5.0  # single sample: plain squared norm
    assert np.array_equal(grad, 2.0 * out)
    # batch of two averages per-signal energies
    outb = np.stack([out, np.zeros_like(out)])
    tgtb = np.zeros((2, 2, 1))
    lossb, gradb = mse_loss(outb, tgtb)
    assert lossb == 2.5
    assert np.array_equal(gradb, outb)  # 2/batch = 1


def test_mse_loss_gradient_fd():
    rng = substream(61)
    out = rng.standard_normal((3, 5, 1))
    tgt = rng.standard_normal((3, 5, 1))
    _, grad = mse_loss(out, tgt)
    num = numeric_grad(lambda v: mse_loss(v, tgt)[0], out.copy())
    assert grad_gap(grad, num) <= REL_TOL


def test_mse_loss_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 1)), np.zeros((3, 1)))


def test_sgd_step_exact():
    p = {"x": np.array([1.0, 2.0])}
    g = {"x": np.array([10.0, -4.0])}
    out = sgd_step(p, g, lr=0.1)
    assert np.array_equal(out["x"], [0.0, 2.4])
    assert np.array_equal(p["x"], [1.0, 2.0])  # input untouched


def test_adam_step_first_update():
    p = {"x": np.array([1.0, -1.0])}
    g = {"x": np.array([0.5, -2.0])}
    state = init_adam(p)
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    out, s1 = adam_step(p, g, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
    # recompute by hand for t = 1
    m = (1 - b1) * g["x"]
    v = (1 - b2) * g["x"] ** 2
    expect = p["x"] - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    assert np.allclose(out["x"], expect, rtol=0, atol=1e-16)
    assert s1.t == 1
    assert np.allclose(s1.m["x"], m) and np.allclose(s1.v["x"], v)


def test_optimizers_minimize_quadratic():
    target = np.array([3.0, -1.0, 0.5])

    def grad_of(p):
        return {"x": 2.0 * (p["x"] - target)}

    p = {"x": np.zeros(3)}
    for _ in range(100):
        p = sgd_step(p, grad_of(p), lr=0.3)
    assert np.max(np.abs(p["x"] - target)) < 1e-8

    p = {"x": np.zeros(3)}
    state = init_adam(p)
    for _ in range(2000):
        p, state = adam_step(p, grad_of(p), state, lr=0.05)
    assert np.max(np.abs(p["x"] - target)) < 1e-4


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, lr=-1.0)


def test_network_inputs_passthrough_and_adjoint():
    ds = generate_dataset(16, 2, 4, 2, master_seed=3)
    sigs = ds.train_array()
    codec = build_deepcodec(16, 2, filter_len=5)
    assert network_inputs(codec, sigs) is sigs
    phi = gaussian_matrix(8, 16, substream(1))
    inv = build_deepinverse(phi, filter_len=5)
    got = network_inputs(inv, sigs)
    assert np.array_equal(got, measure(phi, sigs))
    wrong = build_deepcodec(32, 2, filter_len=5)
    with pytest.raises(ConfigError):
        network_inputs(wrong, sigs)


def test_overfit_small_codec():
    # memorize 4 signals; sanity bar for the whole backprop/optimizer stack
    ds = generate_dataset(32, 4, 4, 2, master_seed=9)
    spec = build_deepcodec(32, 2, filter_len=9)
    cfg = TrainConfig(epochs=2000, batch_size=4, optimizer="adam", lr=1e-2,
                      seed=1, eval_every=2000)
    report = train(spec, ds, cfg)
    assert report.records[-1].train_loss < 1e-3
    assert len(report.records) == 2000


def test_train_deterministic_rerun():
    ds = generate_dataset(16, 2, 12, 4, master_seed=4)
    spec = build_deepcodec(16, 2, filter_len=5)
    cfg = TrainConfig(epochs=5, batch_size=4, optimizer="adam", lr=1e-3, seed=2)
    r1 = train(spec, ds, cfg)
    r2 = train(spec, ds, cfg)
    for a, b in zip(r1.records, r2.records):
        assert a.train_loss == b.train_loss
        assert a.test_mse == b.test_mse
    f1 = flatten_params(spec, r1.params)
    f2 = flatten_params(spec, r2.params)
    for k in f1:
        assert np.array_equal(f1[k], f2[k])


def test_train_eval_every_and_crossing():
    ds = generate_dataset(16, 2, 12, 4, master_seed=4)
    spec = build_deepcodec(16, 2, filter_len=5)
    cfg = TrainConfig(epochs=6, batch_size=4, seed=2, eval_every=3)
    # any test mse beats an enormous baseline at the first evaluated epoch
    report = train(spec, ds, cfg, baseline_mse=1e9)
    assert report.crossing_epoch == 3
    evaluated = [not math.isnan(r.test_mse) for r in report.records]
    assert evaluated == [False, False, True, False, False, True]


def test_train_deepinverse_smoke():
    ds = generate_dataset(16, 2, 16, 4, master_seed=6)
    phi = gaussian_matrix(8, 16, substream(5))
    spec = build_deepinverse(phi, filter_len=5)
    cfg = TrainConfig(epochs=8, batch_size=8, optimizer="adam", lr=1e-2, seed=0)
    report = train(spec, ds, cfg)
    assert report.records[-1].train_loss < report.records[0].train_loss
    assert all(np.isfinite(r.train_loss) for r in report.records)
    # batch-norm running stats moved away from their init
    assert not np.allclose(report.params["bn1"].running_var, 1.0)


def test_train_artifacts(tmp_path):
    outdir = str(tmp_path / "run")
    ds = generate_dataset(16, 2, 12, 4, master_seed=4)
    spec = build_deepcodec(16, 2, filter_len=5)
    cfg = TrainConfig(epochs=4, batch_size=4, seed=2, checkpoint_dir=outdir)
    report = train(spec, ds, cfg)
    for f in ("final.ckpt", "best.ckpt", "train_curve.csv"):
        assert os.path.exists(os.path.join(outdir, f))
    _, best_params, meta = load_checkpoint(os.path.join(outdir, "best.ckpt"))
    assert meta["epoch"] == report.best_epoch
    assert meta["test_mse"] == report.best_test_mse
    bf = flatten_params(spec, best_params)
    rf = flatten_params(spec, report.best_params)
    for k in bf:
        assert np.array_equal(bf[k], rf[k])
    with open(os.path.join(outdir, "train_curve.csv")) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert all(r["seconds"] == "0.0" for r in rows)
    assert [float(r["train_loss"]) for r in rows] \
        == [r.train_loss for r in report.records]


def test_train_curve_rewrite_identical(tmp_path):
    ds = generate_dataset(16, 2, 8, 2, master_seed=4)
    spec = build_deepcodec(16, 2, filter_len=5)
    report = train(spec, ds, TrainConfig(epochs=3, batch_size=4, seed=0))
    p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    write_train_curve(p1, report.records)
    write_train_curve(p2, report.records)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_train_rejects_wrong_length():
    ds = generate_dataset(16, 2, 4, 2, master_seed=0)
    spec = build_deepcodec(32, 2, filter_len=5)
    with pytest.raises(ConfigError):
        train(spec, ds, TrainConfig(epochs=1))


def test_adam_state_type():
    p = {"x": np.zeros(2)}
    s = init_adam(p)
    assert isinstance(s, AdamState) and s.t == 0
