"""Oracle verification battery for the `selftest` CLI verb.

Each check re-derives an expected value with an independent method
(finite differences, dense eigendecomposition, closed forms) and
compares. Prints one PASS/FAIL line per check; exit 0 iff all pass.
"""

from __future__ import annotations

import math

import numpy as np

from sparselab import autodiff as ad
from sparselab import diagnostics, ghost, layers, masks, training


def _check_op_gradients():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=12)
    x0[np.abs(x0) < 1e-3] += 0.1
    proj = rng.normal(size=12)
    for op in (ad.relu, lambda t: ad.pswish(t, 2.0), ad.mish):
        def f(flat, op=op):
            return float((op(ad.Tensor(flat)).data * proj).sum())
        leaf = ad.Tensor(x0, requires_grad=True)
        out = op(leaf)
        ad.backward(out, seed=proj)
        fd = ad.finite_diff_grad(f, x0)
        if np.linalg.norm(leaf.grad - fd) / max(np.linalg.norm(fd), 1e-12) > 1e-6:
            return False
    return True


def _check_hvp_vs_dense():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(6, 6))
    a = (m + m.T) / 2
    theta = rng.normal(size=6)
    v = rng.normal(size=6)
    got = ad.hvp_finite_diff(lambda t: a @ t, theta, v)
    return np.linalg.norm(got - a @ v) / np.linalg.norm(a @ v) <= 1e-6


def _check_power_iteration():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(10, 10))
    a = (m + m.T) / 2
    want = np.sort(np.linalg.eigvalsh(a))[::-1][:2]
    rec, _ = diagnostics.top_hessian_eigs(lambda t: a @ t, np.zeros(10), k=2,
                                          iters=400, tol=1e-10, seed=3)
    return np.allclose(rec.eigenvalues, want, rtol=1e-3)


def _check_schedules():
    ok = training.lr_at(89, 0.1, (90, 135)) == 0.1
    ok &= abs(training.lr_at(90, 0.1, (90, 135)) - 0.01) < 1e-15
    ok &= ghost.beta_at(15, 30) == 5.5
    ok &= ghost.beta_at(30, 30) == math.inf
    ok &= ghost.alpha_at(15, 30) == 0.5
    ok &= ghost.alpha_at(30, 30) == 0.0
    return bool(ok)


def _check_mask_counts():
    model = layers.build_model({"layers": [{"kind": "dense", "width": 10}],
                                "in_shape": [10], "classes": 10}, seed=4)
    mask = masks.random_mask(model, 0.9, seed=5)
    return mask.survivors() == 10 and mask.total() == 100


def _check_label_smoothing():
    row = training.smooth_labels(3, 10, 0.1)
    return abs(row[3] - 0.91) < 1e-15 and abs(row.sum() - 1.0) < 1e-12


def _check_bn_scale_absorption():
    model = layers.build_model({"preset": "resnet-tiny", "in_shape": [1, 8, 8],
                                "classes": 2}, seed=6)
    x = np.random.default_rng(7).normal(size=(4, 1, 8, 8))
    base = model.forward(x, training=True, update_stats=False).logits.data
    scaled = model.clone()
    scaled.blocks["L00.conv3x3.w"].value *= 3.0
    scaled.blocks["L00.conv3x3.b"].value *= 3.0
    got = scaled.forward(x, training=True, update_stats=False).logits.data
    return float(np.abs(got - base).max()) <= 1e-9


CHECKS = [
    ("op gradients vs finite differences", _check_op_gradients),
    ("hvp vs dense quadratic", _check_hvp_vs_dense),
    ("power iteration vs eigendecomposition", _check_power_iteration),
    ("lr/beta/alpha schedule closed forms", _check_schedules),
    ("mask survivor counting", _check_mask_counts),
    ("label smoothing formula", _check_label_smoothing),
    ("batchnorm scale absorption", _check_bn_scale_absorption),
]


def run_selftest():
    failures = 0
    for name, fn in CHECKS:
        try:
            ok = fn()
        except Exception as exc:   # a crashed check is a failed check
            ok = False
            print(f"FAIL {name}: {exc}")
            failures += 1
            continue
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        failures += 0 if ok else 1
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1
