"""Acceptance criteria 1 to 10.

MNIST models are trained once and cached under ``$MINMAX_LENET_CACHE``
(default ``~/.cache/minmax_lenet/models``), keyed on the full training
config and a hash of the training data. Delete that directory to force
retraining. The determinism check always trains from scratch.
"""

import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import max_rel_error, numeric_grad
from minmax_lenet.analysis import analyze_params, fuzziness, near_zero_ratio
from minmax_lenet.attacks import (
    AttackConfig, InputDomain, LinearSoftmaxClassifier, bim, cw_l2, default_attack_config, evaluate_robustness,
    fgsm, mim, pgd, run_attack,
)
from minmax_lenet.data import MNIST_NORM, data_root, load_mnist, normalize
from minmax_lenet.model import PARAM_NAMES, accuracy, conv_weights_flat, init_params, load_checkpoint, logits_graph, save_checkpoint
from minmax_lenet.objectives import RegWeights, loss_and_grads, penalty_descent
from minmax_lenet.tensor import (
    Tape, Tensor, absolute, add, conv2d, cross_entropy_from_logits, flatten, linear, maxpool2d, relu, reshape, scale,
    softmax, square, tsum,
)
from minmax_lenet.theorem import ToyModelSpec, draw_problem, run_grid, verify_gradient_bound
from minmax_lenet.training import TrainConfig, train

EPS = 0.3
needs_mnist = pytest.mark.skipif(not (data_root() / "mnist").is_dir(), reason="MNIST not in the data root")


def cache_dir() -> Path:
    return Path(os.environ.get("MINMAX_LENET_CACHE", Path.home() / ".cache" / "minmax_lenet" / "models"))


@pytest.fixture(scope="module")
def mnist():
    return (normalize(load_mnist("train"), MNIST_NORM), normalize(load_mnist("test"), MNIST_NORM))


_trained: dict[str, tuple] = {}


def trained(mode: str, mnist):
    """(params, wall seconds or None when loaded from the cache)."""
    if mode in _trained:
        return _trained[mode]
    tr, te = mnist
    config = TrainConfig.defaults("mnist", mode, seed=0)
    key = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()
                         + tr.images.tobytes() + tr.labels.tobytes()).hexdigest()[:16]
    path = cache_dir() / f"{mode}-{key}.json"
    if path.is_file():
        _trained[mode] = (load_checkpoint(path), None)
    else:
        t0 = time.perf_counter()
        params, _ = train(config, tr, te)
        wall = time.perf_counter() - t0
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, path)
        _trained[mode] = (params, wall)
    return _trained[mode]


def detail(record_property, text):
    record_property("detail", text)


# 1 -------------------------------------------------------------------------

def _tape_grads(fn, arrays):
    with Tape() as tape:
        ts = [tape.watch(Tensor(a, dtype=np.float64)) for a in arrays]
        out = fn(*ts)
        return tape.gradient(out, ts)


def _fd_error(fn, arrays):
    grads = _tape_grads(fn, arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(v, i=i):
            return float(fn(*[Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]).data)
        worst = max(worst, max_rel_error(grads[i], numeric_grad(f, a)))
    return worst


def test_criterion_01_gradient_correctness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    away = rng.normal(size=(3, 4))
    away[np.abs(away) < 0.05] = 0.5
    ops = {
        "add": (lambda a, b: tsum(square(add(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "scale": (lambda a: tsum(square(scale(a, -1.7))), [rng.normal(size=5)]),
        "abs": (lambda a: tsum(absolute(a)), [away]),
        "square": (lambda a: tsum(square(a)), [rng.normal(size=6)]),
        "reshape": (lambda a: tsum(square(reshape(a, (4, 3)))), [rng.normal(size=(3, 4))]),
        "flatten": (lambda a: tsum(square(flatten(a))), [rng.normal(size=(2, 3, 2))]),
        "relu": (lambda a: tsum(square(relu(a))), [away]),
        "linear": (lambda x, w, b: tsum(square(linear(x, w, b))),
                   [rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)]),
        "conv2d": (lambda x, k, b: tsum(square(conv2d(x, k, b))),
                   [rng.normal(size=(2, 2, 8, 8)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        "maxpool2d": (lambda x: tsum(square(maxpool2d(x, 2, 2)[0])), [rng.normal(size=(2, 3, 6, 6))]),
        "softmax": (lambda z: tsum(square(softmax(z))), [rng.normal(size=(3, 5))]),
        "cross_entropy": (lambda z: cross_entropy_from_logits(z, [0, 4, 2]), [rng.normal(size=(3, 5))]),
    }
    errors = {name: _fd_error(fn, arrays) for name, (fn, arrays) in ops.items()}

    # full LeNet loss, sampled coordinates of every parameter tensor
    p = init_params(1, 1, np.float64)
    for k in p.arrays:
        if k.endswith("_b"):
            p.arrays[k] = rng.normal(0, 0.1, p.arrays[k].shape)
    x = rng.normal(size=(3, 1, 28, 28))
    y = np.array([2, 5, 9])
    _, grads = loss_and_grads(p, x, y, RegWeights())

    def loss(q):
        ps = {k: Tensor(a) for k, a in q.arrays.items()}
        return float(cross_entropy_from_logits(logits_graph(ps, Tensor(x)), y).data)

    lenet = 0.0
    h = 1e-5
    for name in PARAM_NAMES:
        for fi in rng.choice(p[name].size, size=min(16, p[name].size), replace=False):
            idx = np.unravel_index(fi, p[name].shape)
            qp, qm = p.copy(), p.copy()
            qp.arrays[name][idx] += h
            qm.arrays[name][idx] -= h
            lenet = max(lenet, max_rel_error(grads[name][idx], (loss(qp) - loss(qm)) / (2 * h)))
    errors["lenet"] = lenet

    W, xs = rng.normal(size=(4, 7)), rng.normal(size=(5, 7))
    ys = rng.integers(0, 4, 5)
    z = xs @ W.T
    sig = np.exp(z - z.max(axis=1, keepdims=True))
    sig /= sig.sum(axis=1, keepdims=True)
    closed = (sig - np.eye(4)[ys]) @ W / len(ys)
    lin = float(np.max(np.abs(LinearSoftmaxClassifier(W).loss_gradient(xs, ys) - closed)))
    wall = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    detail(record_property, f"max rel err {errors[worst]:.2e} ({worst}); linear-softmax {lin:.1e}; {wall:.1f}s")
    assert all(e < 1e-4 for e in errors.values()), errors
    assert lin < 1e-10
    assert wall < 60


# 2 to 5 ---------------------------------------------------------------------

@needs_mnist
def test_criterion_02_clean_accuracy(mnist, record_property):
    _, te = mnist
    std, t_std = trained("standard", mnist)
    mm, t_mm = trained("minmax", mnist)
    a_std = accuracy(std, te.images, te.labels)
    a_mm = accuracy(mm, te.images, te.labels)
    walls = [t for t in (t_std, t_mm) if t is not None]
    timing = f"; train {max(walls) / 60:.1f} min" if walls else "; cached models"
    detail(record_property, f"std {a_std:.4f} minmax {a_mm:.4f}{timing}")
    assert a_std >= 0.980
    assert a_mm >= 0.975
    assert all(t <= 20 * 60 for t in walls)


_robust: dict[str, object] = {}


def robustness(mode, mnist):
    if mode not in _robust:
        params, _ = trained(mode, mnist)
        cfgs = [default_attack_config(f, "mnist", EPS) for f in ("FGSM", "PGD", "BIM_L2", "BIM_Linf")]
        _robust[mode] = evaluate_robustness(params, mnist[1], cfgs, mode)
    return _robust[mode]


@needs_mnist
def test_criterion_03_robustness_orderings(mnist, record_property):
    std, mm = robustness("standard", mnist), robustness("minmax", mnist)
    gaps = {a: mm.accuracy(a) - std.accuracy(a) for a in ("FGSM", "PGD", "LinfBIA")}
    l2 = (std.accuracy("L2BIA"), mm.accuracy("L2BIA"))
    detail(record_property, " ".join(f"{a}+{g:.3f}" for a, g in gaps.items()) + f" L2BIA {l2[0]:.4f}/{l2[1]:.4f}")
    assert gaps["FGSM"] >= 0.05
    assert gaps["PGD"] >= 0.10
    assert gaps["LinfBIA"] >= 0.10
    assert min(l2) >= 0.95


@needs_mnist
def test_criterion_04_fuzziness_ordering(mnist, record_property):
    models = {m: trained(m, mnist)[0] for m in ("standard", "adversarial", "minmax")}
    lines = []
    ok = True
    for base in ("natural", "base2"):
        f = {m: analyze_params(p, m, base).fuzziness for m, p in models.items()}
        ratio = f["minmax"] / f["standard"]
        lines.append(f"{base}: std {f['standard']:.4f} adv {f['adversarial']:.4f} mm {f['minmax']:.4f} "
                     f"ratio {ratio:.3f}")
        ok &= f["minmax"] < f["adversarial"] < f["standard"] and ratio <= 0.2
    detail(record_property, "; ".join(lines))
    assert ok


@needs_mnist
def test_criterion_05_near_zero_concentration(mnist, record_property):
    r = {m: near_zero_ratio(conv_weights_flat(trained(m, mnist)[0], ("conv1_w",)), 1e-2)
         for m in ("standard", "minmax")}
    detail(record_property, f"std {r['standard']:.4f} minmax {r['minmax']:.4f}")
    assert r["minmax"] >= 10 * r["standard"]


# 6 -------------------------------------------------------------------------

def test_criterion_06_gradient_inequality_monte_carlo(record_property):
    t0 = time.perf_counter()
    results = run_grid(trials=10_000, seed=0)
    violations = sum(r.violations for r in results)
    bad = sorted({r.p1 for r in results if r.violations})
    equality = []
    for mi, m in enumerate((2, 10)):
        for ni, n in enumerate((5, 50)):
            x, y = draw_problem(m, n, [0, mi, ni])
            r = verify_gradient_bound(ToyModelSpec(m, n), ToyModelSpec(m, n, "bernoulli", 0.5), x, y, 10_000,
                                      seed=50 + 10 * mi + ni)
            equality.append(r.max_abs_z)
    wall = time.perf_counter() - t0
    detail(record_property, f"{violations} violating coordinates (p1 in {bad}); p1=0.5 max|z| "
                            f"{max(equality):.1f}; {wall:.0f}s")
    assert violations == 0
    assert max(equality) < 3
    assert wall < 300


# 7 -------------------------------------------------------------------------

def test_criterion_07_attack_identities_and_budgets(record_property):
    p = init_params(0, 1)
    dom = InputDomain.from_norm(MNIST_NORM)
    rng = np.random.default_rng(0)
    x = ((rng.random((1000, 1, 28, 28)) - 0.1307) / 0.3081).astype(np.float32)
    y = rng.integers(0, 10, 1000)
    a = fgsm(p, x[:200], y[:200], EPS, dom)
    b = pgd(p, x[:200], y[:200], AttackConfig("PGD", epsilon=EPS, step_size=EPS, steps=1, random_start=False), dom)
    pgd_fgsm = np.array_equal(a.x_adv, b.x_adv)
    c = mim(p, x[:200], y[:200], AttackConfig("MIM", epsilon=EPS, steps=10, momentum_decay=0.0), dom)
    d = bim(p, x[:200], y[:200], AttackConfig("BIM_Linf", epsilon=EPS, steps=10), "Linf", dom)
    mim_bim = np.array_equal(c.x_adv, d.x_adv)
    excess = {}
    for fam, eps in (("FGSM", EPS), ("PGD", EPS), ("MIM", EPS), ("BIM_Linf", EPS), ("BIM_L2", 1.5)):
        out = run_attack(p, x, y, default_attack_config(fam, "mnist", eps, steps=10), dom)
        delta = (out.x_adv.astype(np.float64) - x).reshape(len(x), -1)
        size = np.linalg.norm(delta, axis=1) if fam == "BIM_L2" else np.abs(delta).max(axis=1)
        excess[fam] = float(size.max() - eps)
    detail(record_property, f"PGD1==FGSM {pgd_fgsm}; MIM0==BIMinf {mim_bim}; max budget excess "
                            f"{max(excess.values()):.1e}")
    assert pgd_fgsm and mim_bim
    assert all(e <= 1e-6 for e in excess.values()), excess


# 8 -------------------------------------------------------------------------

def test_criterion_08_penalty_dynamics(record_property):
    rng = np.random.default_rng(0)
    reg = RegWeights(1.0, 1.0)
    worst_rise = -np.inf
    ok = True
    for _ in range(5):
        w0 = rng.uniform(-2, 2, 1000)
        inside = np.abs(w0) < 0.5
        outside = np.abs(w0) > 0.5
        prev, prev_f = np.abs(w0), fuzziness(w0)
        for w in penalty_descent(w0, reg, lr=0.01, steps=300):
            a, f = np.abs(w), fuzziness(w)
            ok &= bool(np.all(a[inside] <= prev[inside]) and np.all(a[outside] >= prev[outside]))
            worst_rise = max(worst_rise, f - prev_f)
            prev, prev_f = a, f
    detail(record_property, f"coordinate drift monotone {ok}; largest fuzziness change per step {worst_rise:.2e}")
    assert ok
    assert worst_rise <= 0


# 9 -------------------------------------------------------------------------

@needs_mnist
def test_criterion_09_cw_success(mnist, record_property):
    std, _ = trained("standard", mnist)
    te = mnist[1]
    idx = np.sort(np.random.default_rng(0).choice(len(te), 200, replace=False))
    t0 = time.perf_counter()
    out = cw_l2(std, te.images[idx], te.labels[idx], default_attack_config("CW_L2", "mnist"),
                InputDomain.from_norm(te.norm))
    wall = time.perf_counter() - t0
    rate = float(out.success_mask.mean())
    detail(record_property, f"success {rate:.3f}; median L2 {np.median(out.l2[out.success_mask]):.3f}; "
                            f"{wall / 60:.1f} min")
    assert rate >= 0.90
    assert wall <= 15 * 60


# 10 ------------------------------------------------------------------------

@needs_mnist
def test_criterion_10_deterministic_training(tmp_path, record_property):
    digests = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        cmd = [sys.executable, "-m", "minmax_lenet", "train", "--dataset", "mnist", "--mode", "minmax",
               "--seed", "7", "--deterministic", "--out", str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        (ckpt,) = out.glob("*/checkpoint.json")
        digests.append(hashlib.sha256(ckpt.read_bytes()).hexdigest())
    detail(record_property, f"sha256 {digests[0][:12]} / {digests[1][:12]}")
    assert digests[0] == digests[1]
