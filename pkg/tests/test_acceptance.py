"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section of the terminal summary. Long training runs carry the ``slow`` marker.
"""
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import full_network_check, layer_gradcheck
from pulsegrid.data import SplitSets, build_splits, ingest, split_windows, stack, window_sequence
from pulsegrid.data import ColorSignalSequence
from pulsegrid.evaluate import coverage, evaluate, mae
from pulsegrid.gradcheck import grad_check
from pulsegrid.grid import GRID
from pulsegrid.layers import BatchNorm, Conv1d, Conv2d, Dropout, Linear, ReLU
from pulsegrid.losses import (ce_loss, class_weights, cl_loss, make_loss, smoothed_one_hot)
from pulsegrid.model import ModelSpec, build_model
from pulsegrid.synth import SynthConfig, synth_generate
from pulsegrid.train import TrainConfig, lr_range_test, one_cycle_lr, train_loop

SPECS = {"SE": ModelSpec("regression"), "CE": ModelSpec("classification"),
         "CL": ModelSpec("classification"), "CL+F": ModelSpec("classification", with_filter=True)}


# 1 -----------------------------------------------------------------------

def test_c01_parameter_counts(criterion):
    counts = {name: build_model(spec).n_params for name, spec in SPECS.items()}
    want = {"SE": 62_675, "CE": 70_676, "CL": 70_676, "CL+F": 72_017}
    criterion(1, "parameter counts", counts == want, f"{counts}")


# 2 -----------------------------------------------------------------------

def test_c02_shape_chain(criterion):
    trunk = [(16, 14, 54), (16, 10, 44), (16, 6, 34), (16, 2, 24), (16, 1, 14), (60,)]
    heads = {"SE": [(1,)], "CE": [(128,)], "CL+F": [(134,), (16, 132), (16, 130), (1, 128)]}
    ok, seen = True, {}
    for name, head in heads.items():
        model = build_model(SPECS[name]).eval()
        out = model(np.zeros((1, 1, 18, 64)))
        flat = [shape for n, shape in model.trace if n == "flatten"]
        chain = model.shape_chain()
        seen[name] = chain[-1]
        ok &= chain == trunk + head and flat == [(1, 224)]
        ok &= out.shape == (1, 1 if name == "SE" else 128)
    criterion(2, "shape chain", ok, f"final shapes {seen}")


# 3 -----------------------------------------------------------------------

def _dropout_check(seed):
    rng = np.random.default_rng(seed)
    layer = Dropout(0.5)
    x = rng.standard_normal((3, 6))
    r = rng.standard_normal((3, 6))

    def f():
        layer.rng = np.random.default_rng(seed)
        return float(np.sum(r * layer.forward(x)))

    f()
    return grad_check(f, {"input": x}, {"input": layer.backward(r)})


def _layer_reports(seed):
    rng = np.random.default_rng(seed)
    conv1, conv4 = Conv2d(1, 3, (3, 3), rng=rng), Conv2d(4, 3, (2, 3), rng=rng)
    conv1d = Conv1d(2, 3, 3, rng=rng)
    fc = Linear(5, 3, rng=rng)
    for layer in (conv1, conv4, conv1d, fc):
        layer.params["bias"][...] = rng.standard_normal(layer.params["bias"].shape)
    bn = BatchNorm(4)
    bn.params["gamma"][...] = rng.uniform(0.5, 2, 4)
    bn.params["beta"][...] = rng.standard_normal(4)
    bn2 = BatchNorm(3)
    relu_x = rng.standard_normal((3, 7))
    relu_x[np.abs(relu_x) < 1e-3] = 0.5
    return {
        "conv2d(1)": layer_gradcheck(conv1, rng.standard_normal((2, 1, 5, 7)), seed),
        "conv2d(4)": layer_gradcheck(conv4, rng.standard_normal((2, 4, 4, 6)), seed),
        "conv1d": layer_gradcheck(conv1d, rng.standard_normal((2, 2, 9)), seed),
        "linear": layer_gradcheck(fc, rng.standard_normal((2, 5)), seed),
        "batchnorm": layer_gradcheck(bn, rng.standard_normal((8, 4)), seed),
        "batchnorm2d": layer_gradcheck(bn2, rng.standard_normal((2, 3, 4, 5)), seed),
        "relu": layer_gradcheck(ReLU(), relu_x, seed),
        "dropout": _dropout_check(seed),
    }


def _loss_reports(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 128, 4)
    train = rng.integers(0, 128, 200)
    hr = GRID.hr_of(labels)
    out = {}
    for name in ("se", "ce", "cl", "cl_softmax"):
        if name == "se":
            fn, z = make_loss("se"), rng.normal(80, 10, (4, 1))
        else:
            fn = make_loss(name[:2], train, mse_on_softmax=name == "cl_softmax")
            z = rng.standard_normal((4, 128)) * 2
        _, grad = fn(z, hr, labels)
        out[name] = grad_check(lambda: fn(z, hr, labels)[0], {"z": z}, {"z": grad})
    return out


def test_c03_gradient_suite(criterion):
    start = time.perf_counter()
    isolated = pair = wide = 0.0
    for seed in range(20):
        for report in (*_layer_reports(seed).values(), *_loss_reports(seed).values()):
            isolated = max(isolated, report.worst)
        # two samples, running statistics: the two-sample batch end to end
        report = full_network_check(SPECS["CL+F"], "cl", seed, train_mode=False, max_entries=3)
        assert report.skip_fraction < 0.6
        pair = max(pair, report.worst)
    # batch statistics and dropout; see test_model for why not at two samples
    for seed in range(5):
        report = full_network_check(SPECS["CL+F"], "cl", seed, train_mode=True, batch=8,
                                    max_entries=3)
        assert report.skip_fraction < 0.6
        wide = max(wide, report.worst)
    elapsed = time.perf_counter() - start
    ok = isolated < 1e-6 and pair < 1e-4 and wide < 1e-4 and elapsed < 120
    criterion(3, "gradient suite", ok,
              f"isolated worst {isolated:.2e} < 1e-6 over 20 seeds; CL+F B=2 end-to-end worst "
              f"{pair:.2e} < 1e-4 over 20 seeds; CL+F train-mode B=8 worst {wide:.2e}; {elapsed:.0f} s")


# 4 -----------------------------------------------------------------------

def _composed_nll(z, y):
    p = np.exp(z - z.max())
    p = p / p.sum()
    return -np.log(p[y])


def test_c04_loss_identities(criterion):
    rng = np.random.default_rng(4)
    ce_err = cl_err = shift_err = sum_err = 0.0
    for _ in range(200):
        w = class_weights(rng.integers(0, 128, int(rng.integers(1, 400))))
        z = rng.standard_normal(128) * 4
        y = int(rng.integers(128))
        target = smoothed_one_hot(y)
        ce = ce_loss(z, y, w)
        ce_err = max(ce_err, abs(ce - w[y] * _composed_nll(z, y)))
        mse = float(np.mean((z - target) ** 2))
        cl_err = max(cl_err, abs(cl_loss(z, y, w) - ce - 25 * mse))
        shift_err = max(shift_err, abs(ce_loss(z + rng.uniform(-50, 50), y, w) - ce))
        sum_err = max(sum_err, abs(w.sum() - 1), abs(target.sum() - 1))
    ok = ce_err <= 1e-10 and cl_err <= 1e-10 and shift_err <= 1e-10 and sum_err <= 1e-9
    criterion(4, "loss identities", ok,
              f"CE vs softmax+NLL {ce_err:.1e}, CL-CE-25MSE {cl_err:.1e}, shift {shift_err:.1e}, "
              f"sums {sum_err:.1e}")


# 5 -----------------------------------------------------------------------

@pytest.mark.slow
def test_c05_overfit_probe(criterion):
    cfg = SynthConfig(n_sequences=8, snr_db=40.0, hr_drift_bpm=0.0, seed=0)
    samples = [w for s in synth_generate(cfg) for w in window_sequence(s)[::10][:8]]
    assert len(samples) == 64
    start = time.perf_counter()
    result = train_loop(TrainConfig(epochs=500, batch_size=16, augment=False),
                        SplitSets(train=samples, val=samples))
    elapsed = time.perf_counter() - start
    x, hr, labels = stack(samples, np.float32)
    cov = coverage(result.model.predict(x), labels, "classification")
    err = mae(result.model.predict_bpm(x), hr)
    ok = cov >= 0.95 and err <= 1.4 and elapsed < 600
    criterion(5, "overfit probe", ok,
              f"train coverage {cov:.3f} >= 0.95, train MAE {err:.2f} <= 1.4 bpm, {elapsed:.0f} s")


# 6 -----------------------------------------------------------------------

@pytest.mark.slow
def test_c06_synthetic_end_to_end(criterion):
    cfg = SynthConfig(n_sequences=12, duration_s=60.0, snr_db=15.0, hr_range=(50.0, 110.0))
    splits = build_splits(synth_generate(cfg))
    start = time.perf_counter()
    result = train_loop(TrainConfig(epochs=300, batch_size=64), splits)
    elapsed = time.perf_counter() - start
    full = evaluate(result.model, splits.test).rows["Full"]
    ok = full.mae <= 5.0 and full.coverage >= 0.60 and elapsed < 1800
    criterion(6, "synthetic end-to-end", ok,
              f"test MAE {full.mae:.2f} <= 5 bpm, coverage {full.coverage:.3f} >= 0.60, "
              f"n={full.n}, {elapsed:.0f} s")


# 7 -----------------------------------------------------------------------

def test_c07_metric_oracles(criterion):
    rng = np.random.default_rng(7)
    refs = rng.uniform(40, 125, 1000)
    preds = refs + rng.normal(0, 4, 1000)
    loop_mae = sum(abs(p - r) for p, r in zip(preds, refs)) / 1000
    loop_cov = sum(abs(p - r) < 3 for p, r in zip(preds, refs)) / 1000
    lp = rng.integers(0, 128, 1000)
    lr = np.clip(lp + rng.integers(-8, 9, 1000), 0, 127)
    loop_lcov = sum(abs(int(a) - int(b)) <= 4 for a, b in zip(lp, lr)) / 1000
    base = np.arange(10, 110)
    edge = (coverage(base + 4, base, "classification") == 1.0
            and coverage(base - 4, base, "classification") == 1.0
            and coverage(base + 5, base, "classification") == 0.0)
    ok = (abs(mae(preds, refs) - loop_mae) < 1e-12 and coverage(preds, refs) == loop_cov
          and coverage(lp, lr, "classification") == loop_lcov and edge)
    criterion(7, "metric oracles", ok, f"1000 pairs, |dlabel| 4 hit / 5 miss: {edge}")


# 8 -----------------------------------------------------------------------

def test_c08_schedule_and_lr_test(criterion):
    total, lo, hi = 1000, 1e-5, 1e-3
    trace = np.array([one_cycle_lr(s, total, lo, hi) for s in range(total)])
    ends = (trace[0] == lo and trace[total // 2] == hi and trace[-1] == lo)
    up, down = np.diff(trace[:total // 2 + 1]), np.diff(trace[total // 2:])
    linear = np.allclose(up, up[0], rtol=1e-9) and np.allclose(down, down[0], rtol=1e-9)
    lrs = np.logspace(-6, 0, 25)
    argmin = lrs[12]
    result = lr_range_test(lambda lr: (np.log10(lr) - np.log10(argmin)) ** 2 + 1.0, lrs)
    found = np.isclose(result.lr_max, argmin) and np.isclose(result.lr_min, argmin / 100)
    criterion(8, "one-cycle schedule and LR range test", ends and linear and found,
              f"endpoints {ends}, piecewise linear {linear}, "
              f"(lr_min, lr_max)=({result.lr_min:.1e}, {result.lr_max:.1e})")


# 9 -----------------------------------------------------------------------

_split_failures: list[int] = []


@settings(max_examples=50, deadline=None, database=None)
@given(st.integers(0, 3000))
def _split_property(frames):
    seq = ColorSignalSequence("p", "Cam1", "stationary", np.zeros((18, frames)), np.full(frames, 70.0))
    parts = split_windows(window_sequence(seq))
    last_train = max((s.frames[1] for s in parts.train), default=-1)
    if any(s.frames[0] <= last_train for s in parts.val + parts.test):
        _split_failures.append(frames)
    assert frames not in _split_failures


def test_c09_split_safety(criterion):
    _split_failures.clear()
    try:
        _split_property()
    except AssertionError:
        pass
    criterion(9, "split safety", not _split_failures,
              f"50 random lengths, overlapping lengths {_split_failures[:3]}")


# 10 ----------------------------------------------------------------------

REFERENCE_FULL = {"mae": 4.9, "coverage": 0.481}


def test_c10_reference_numbers_informational(criterion):
    path = os.environ.get("PULSEGRID_REFERENCE_DATA")
    if not path:
        criterion(10, "reference-number reproduction", True,
                  "not claimed; set PULSEGRID_REFERENCE_DATA to a published color-signal "
                  "directory for an optional deviation report", gating=False)
        return
    sequences, _ = ingest(path)
    splits = build_splits(sequences)
    result = train_loop(TrainConfig(), splits)
    full = evaluate(result.model, splits.test).rows["Full"]
    criterion(10, "reference-number reproduction", True,
              f"CL+F Full MAE {full.mae:.2f} vs {REFERENCE_FULL['mae']}, coverage "
              f"{full.coverage:.3f} vs {REFERENCE_FULL['coverage']}", gating=False)


# 11 ----------------------------------------------------------------------

ABLATION_EPOCHS = 40


@pytest.mark.slow
def test_c11_ablation_direction(criterion):
    results = {"CL+F": [], "CE": [], "SE": []}
    for seed in range(3):
        splits = build_splits(synth_generate(SynthConfig(seed=seed)))
        for name, (loss, filt) in {"CL+F": ("cl", True), "CE": ("ce", False),
                                   "SE": ("se", False)}.items():
            cfg = TrainConfig(loss=loss, with_filter=filt, epochs=ABLATION_EPOCHS, seed=seed)
            model = train_loop(cfg, splits).model
            results[name].append(evaluate(model, splits.test).rows["Full"].mae)
    means = {k: float(np.mean(v)) for k, v in results.items()}
    ok = means["CL+F"] <= means["CE"] + 0.5 and means["CE"] <= means["SE"] + 0.5
    detail = ", ".join(f"{k} {v:.2f}" for k, v in means.items())
    criterion(11, "ablation direction", ok,
              f"mean Full test MAE over 3 seeds, {ABLATION_EPOCHS} epochs: {detail}")
