"""White-box evasion attacks: FGSM, PGD, BIM (L2 / Linf), MIM and Carlini-Wagner L2.

Attacks take inputs in the model's (normalized) space and return adversarial
inputs in that same space. Budgets and clipping are applied in an *attack
space* described by :class:`InputDomain`: by default raw pixel units, so that
``epsilon=0.3`` means 0.3 of the [0, 1] pixel range whatever the
normalization constants are.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .model import LeNetParams, forward, input_gradient, input_vjp
from .tensor import log_softmax_array

FAMILIES = ("FGSM", "PGD", "MIM", "BIM_L2", "BIM_Linf", "CW_L2")
# row labels used in the reported robustness tables
TABLE_NAMES = {
    "FGSM": "FGSM", "PGD": "PGD", "CW_L2": "CW", "MIM": "MIA",
    "BIM_L2": "L2BIA", "BIM_Linf": "LinfBIA",
}
TABLE_ORDER = ("FGSM", "PGD", "CW_L2", "MIM", "BIM_L2", "BIM_Linf")


class Classifier(Protocol):
    def logits(self, x: np.ndarray) -> np.ndarray: ...

    def loss_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def logits_vjp(self, x: np.ndarray, fn) -> tuple[np.ndarray, np.ndarray]: ...


class LeNetClassifier:
    """Adapter giving attacks a uniform view of frozen LeNet weights."""

    def __init__(self, params: LeNetParams):
        self.params = params

    def logits(self, x):
        return forward(self.params, x)

    def loss_gradient(self, x, y):
        return input_gradient(self.params, x, y)[0]

    def logits_vjp(self, x, fn):
        return input_vjp(self.params, x, fn)


class LinearSoftmaxClassifier:
    """``logits = x @ W.T + b`` with analytic input gradients; a small test target."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(self.weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)

    def logits(self, x):
        return x.reshape(len(x), -1) @ self.weight.T + self.bias

    def loss_gradient(self, x, y):
        z = self.logits(x)
        p = np.exp(log_softmax_array(z))
        p[np.arange(len(y)), y] -= 1
        return ((p / len(y)) @ self.weight).reshape(x.shape)

    def logits_vjp(self, x, fn):
        z = self.logits(x)
        return (fn(z) @ self.weight).reshape(x.shape), z


def as_classifier(model) -> Classifier:
    return LeNetClassifier(model) if isinstance(model, LeNetParams) else model


@dataclass(frozen=True)
class CWConfig:
    confidence: float = 0.0
    binary_search_steps: int = 9
    max_iter: int = 1000
    initial_const: float = 1e-3
    lr: float = 5e-3
    abort_early: bool = True


@dataclass(frozen=True)
class AttackConfig:
    family: str
    epsilon: float = 0.3
    step_size: float | None = None
    steps: int = 40
    random_start: bool = False
    momentum_decay: float = 1.0
    cw: CWConfig = field(default_factory=CWConfig)
    pixel_domain: bool = False  # True: epsilon in raw pixel units; default: normalized-input units
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; choose from {FAMILIES}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.family not in ("FGSM", "CW_L2") and self.steps < 1:
            raise ValueError("iterative attacks need steps >= 1")
        if self.momentum_decay < 0:
            raise ValueError("momentum_decay must be >= 0")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["cw"] = CWConfig(**d.get("cw", {}))
        return cls(**d)


def default_attack_config(family: str, dataset: str = "mnist", epsilon: float | None = None, **overrides) -> AttackConfig:
    """Toolbox-style defaults: MNIST 40 steps of eps/10, CIFAR-10 10 steps of eps/4."""
    eps = epsilon if epsilon is not None else (0.3 if dataset == "mnist" else 0.03)
    steps, frac = (40, 10) if dataset == "mnist" else (10, 4)
    kw = dict(family=family, epsilon=eps, steps=steps, step_size=eps / frac,
              random_start=family == "PGD")
    kw.update(overrides)
    return AttackConfig(**kw)


@dataclass(frozen=True)
class InputDomain:
    """Affine map between model inputs and attack space, plus the valid box.

    ``attack = model_input * scale + offset``; the box is given in attack space.
    """

    scale: np.ndarray
    offset: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_norm(cls, norm, pixel_domain: bool = False, dtype=np.float32) -> "InputDomain":
        mean, std = norm.arrays(dtype)
        if pixel_domain:
            return cls(std, mean, np.zeros_like(mean), np.ones_like(mean))
        one = np.ones_like(mean)
        return cls(one, np.zeros_like(mean), (0 - mean) / std, (1 - mean) / std)

    @classmethod
    def identity(cls, lo=-np.inf, hi=np.inf) -> "InputDomain":
        return cls(np.float64(1.0), np.float64(0.0), np.float64(lo), np.float64(hi))

    def cast(self, dtype) -> "InputDomain":
        return InputDomain(*(np.asarray(a, dtype=dtype) for a in (self.scale, self.offset, self.lo, self.hi)))

    def to_attack(self, x):
        return x * self.scale + self.offset

    def model_input(self, x, xa, x0):
        """Model-space input whose attack-space image is ``xa``; exact when ``xa == x0``."""
        return x + (xa - x0) / self.scale

    def model_box(self):
        return (self.lo - self.offset) / self.scale, (self.hi - self.offset) / self.scale


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    success_mask: np.ndarray
    linf: np.ndarray
    l2: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(self.success_mask.mean()) if self.success_mask.size else float("nan")


def _domain(domain, cfg: AttackConfig, x):
    if domain is None:
        domain = InputDomain.identity()
    elif not isinstance(domain, InputDomain):
        domain = InputDomain.from_norm(domain, cfg.pixel_domain)
    return domain.cast(x.dtype)


def _finish(clf, x, y, xa, x0, domain) -> AdversarialBatch:
    x_adv = domain.model_input(x, xa, x0)
    lo, hi = domain.model_box()
    x_adv = np.clip(x_adv, lo, hi).astype(x.dtype, copy=False)
    delta = ((x_adv - x) * domain.scale).reshape(len(x), -1).astype(np.float64)
    pred = clf.logits(x_adv).argmax(axis=1)
    return AdversarialBatch(x_adv, pred != y, np.abs(delta).max(axis=1, initial=0.0),
                            np.sqrt((delta * delta).sum(axis=1)))


def _grad(clf, x, y, xa, x0, domain):
    return clf.loss_gradient(domain.model_input(x, xa, x0), y) / domain.scale


def _per_sample(a: np.ndarray, fn) -> np.ndarray:
    return fn(a.reshape(len(a), -1), axis=1).reshape((len(a),) + (1,) * (a.ndim - 1))


def fgsm(model, x, y, epsilon: float, domain=None) -> AdversarialBatch:
    """One signed-gradient step of size ``epsilon``, clipped to the valid box."""
    clf = as_classifier(model)
    y = np.asarray(y)
    cfg = AttackConfig("FGSM", epsilon=epsilon)
    domain = _domain(domain, cfg, x)
    x0 = domain.to_attack(x)
    g = _grad(clf, x, y, x0, x0, domain)
    xa = np.clip(x0 + x.dtype.type(epsilon) * np.sign(g), domain.lo, domain.hi)
    return _finish(clf, x, y, xa, x0, domain)


def _linf_iterate(clf, x, y, cfg: AttackConfig, domain, rng, random_start: bool, momentum: float | None):
    x0 = domain.to_attack(x)
    eps = x.dtype.type(cfg.epsilon)
    alpha = x.dtype.type(cfg.alpha)
    lower, upper = x0 - eps, x0 + eps
    xa = x0
    if random_start:
        xa = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype), domain.lo, domain.hi)
    acc = np.zeros_like(x0) if momentum is not None else None
    tiny = np.finfo(x.dtype).tiny
    for _ in range(cfg.steps):
        g = _grad(clf, x, y, xa, x0, domain)
        if momentum is not None:
            l1 = np.maximum(_per_sample(np.abs(g), np.sum), tiny)
            acc = x.dtype.type(momentum) * acc + g / l1
            direction = np.sign(acc)
        else:
            direction = np.sign(g)
        xa = np.clip(xa + alpha * direction, lower, upper)
        xa = np.clip(xa, domain.lo, domain.hi)
    return xa, x0


def pgd(model, x, y, cfg: AttackConfig, domain=None, rng=None) -> AdversarialBatch:
    """L-inf projected gradient ascent, optionally from a uniform random start."""
    clf = as_classifier(model)
    y = np.asarray(y)
    domain = _domain(domain, cfg, x)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    xa, x0 = _linf_iterate(clf, x, y, cfg, domain, rng, cfg.random_start, None)
    return _finish(clf, x, y, xa, x0, domain)


def mim(model, x, y, cfg: AttackConfig, domain=None) -> AdversarialBatch:
    """Momentum iterative method: sign of an accumulated L1-normalised gradient."""
    clf = as_classifier(model)
    y = np.asarray(y)
    domain = _domain(domain, cfg, x)
    xa, x0 = _linf_iterate(clf, x, y, cfg, domain, None, False, cfg.momentum_decay)
    return _finish(clf, x, y, xa, x0, domain)


def bim(model, x, y, cfg: AttackConfig, norm: str = "Linf", domain=None) -> AdversarialBatch:
    """Basic iterative method in the L-inf or L2 ball; never uses a random start.

    The L2 variant steps along the per-sample unit-L2 gradient and projects
    back onto the eps-ball; samples with a zero gradient stay put.
    """
    clf = as_classifier(model)
    y = np.asarray(y)
    domain = _domain(domain, cfg, x)
    if norm == "Linf":
        xa, x0 = _linf_iterate(clf, x, y, cfg, domain, None, False, None)
        return _finish(clf, x, y, xa, x0, domain)
    if norm != "L2":
        raise ValueError(f"norm must be 'L2' or 'Linf', got {norm!r}")
    x0 = domain.to_attack(x)
    eps = x.dtype.type(cfg.epsilon)
    alpha = x.dtype.type(cfg.alpha)
    xa = x0
    for _ in range(cfg.steps):
        g = _grad(clf, x, y, xa, x0, domain)
        gn = np.sqrt(_per_sample(g * g, np.sum))
        step = np.where(gn > 0, g / np.where(gn > 0, gn, 1), 0)
        xa = xa + alpha * step
        delta = xa - x0
        dn = np.sqrt(_per_sample(delta * delta, np.sum))
        factor = np.where(dn > eps, eps / np.where(dn > 0, dn, 1), 1).astype(x.dtype)
        xa = np.clip(x0 + delta * factor, domain.lo, domain.hi)
    return _finish(clf, x, y, xa, x0, domain)


def cw_l2(model, x, y, cfg: AttackConfig, domain=None) -> AdversarialBatch:
    """Untargeted Carlini-Wagner L2 attack.

    Optimises ``w`` with Adam where the candidate is the tanh image of ``w``
    inside the valid box, minimising ``||delta||_2^2 + c * max(Z_y - max_{j!=y} Z_j, -confidence)``.
    ``c`` is tuned per sample by binary search; the smallest successful
    perturbation is kept, otherwise the original input is returned.
    """
    clf = as_classifier(model)
    y = np.asarray(y)
    cw = cfg.cw
    domain = _domain(domain, cfg, x)
    dt = np.float64
    xd = x.astype(dt)
    dom = domain.cast(dt)
    x0 = dom.to_attack(xd)
    lo, hi = np.broadcast_to(dom.lo, x0.shape), np.broadcast_to(dom.hi, x0.shape)
    half = (hi - lo) / 2
    n = len(x)
    rows = np.arange(n)
    kappa = cw.confidence

    def success(z):
        z = z.copy()
        z[rows, y] += kappa
        return z.argmax(axis=1) != y

    w0 = np.arctanh(np.clip((x0 - lo) / half - 1, -1 + 1e-6, 1 - 1e-6))
    best_l2 = np.full(n, np.inf)
    best = x0.copy()
    z0 = clf.logits(x)
    already = z0.argmax(axis=1) != y
    if kappa == 0:
        best_l2[already] = 0.0  # the clean input is already a solution

    const = np.full(n, cw.initial_const)
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    axes = tuple(range(1, x.ndim))
    for _ in range(cw.binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, bool)
        prev = np.inf
        for it in range(cw.max_iter):
            xa = lo + half * (np.tanh(w) + 1)
            diff = xa - x0
            l2sq = (diff * diff).sum(axis=axes)
            state = {}

            def dlogits(z):
                other = z.copy()
                other[rows, y] = -np.inf
                j = other.argmax(axis=1)
                margin = z[rows, y] - z[rows, j]
                active = margin > -kappa
                g = np.zeros_like(z)
                g[rows, y] = const * active
                g[rows, j] -= const * active
                state["f"] = np.maximum(margin, -kappa)
                return g.astype(x.dtype)

            xm = dom.model_input(xd, xa, x0).astype(x.dtype)
            gz, z = clf.logits_vjp(xm, dlogits)
            loss = l2sq + const * state["f"]
            ok = success(z)
            better = ok & (l2sq < best_l2)
            best_l2[better] = l2sq[better]
            best[better] = xa[better]
            found |= ok
            g_xa = 2 * diff + gz.astype(dt) / dom.scale
            g_w = g_xa * half * (1 - np.tanh(w) ** 2)
            t = it + 1
            m = 0.9 * m + 0.1 * g_w
            v = 0.999 * v + 0.001 * g_w * g_w
            w = w - cw.lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            if cw.abort_early and it % max(cw.max_iter // 10, 1) == 0:
                total = loss.sum()
                if total > prev * 0.9999:
                    break
                prev = total
        upper = np.where(found, np.minimum(upper, const), upper)
        lower = np.where(found, lower, np.maximum(lower, const))
        const = np.where(upper < 1e9, (lower + upper) / 2, const * 10)

    x0_native = domain.to_attack(x)
    moved = np.isfinite(best_l2) & (best_l2 > 0)
    x_adv_att = x0_native.copy()
    x_adv_att[moved] = best[moved].astype(x.dtype)
    return _finish(clf, x, y, x_adv_att, x0_native, domain)


def run_attack(model, x, y, cfg: AttackConfig, domain=None, rng=None) -> AdversarialBatch:
    if cfg.family == "FGSM":
        return fgsm(model, x, y, cfg.epsilon, domain)
    if cfg.family == "PGD":
        return pgd(model, x, y, cfg, domain, rng)
    if cfg.family == "MIM":
        return mim(model, x, y, cfg, domain)
    if cfg.family == "BIM_L2":
        return bim(model, x, y, cfg, "L2", domain)
    if cfg.family == "BIM_Linf":
        return bim(model, x, y, cfg, "Linf", domain)
    return cw_l2(model, x, y, cfg, domain)


def attack_dataset(model, x, y, cfg: AttackConfig, domain=None, batch_size: int = 500) -> AdversarialBatch:
    """Run an attack over a large array in chunks with one seeded generator."""
    rng = np.random.default_rng(cfg.seed)
    parts = [run_attack(model, x[i:i + batch_size], y[i:i + batch_size], cfg, domain, rng)
             for i in range(0, len(x), batch_size)]
    if not parts:
        e = np.zeros(0)
        return AdversarialBatch(x[:0], np.zeros(0, bool), e, e)
    return AdversarialBatch(*(np.concatenate([getattr(p, f) for p in parts])
                              for f in ("x_adv", "success_mask", "linf", "l2")))


# ---------------------------------------------------------------- reports


@dataclass
class RobustnessRow:
    attack: str
    epsilon: float
    accuracy: float
    success_rate: float
    mean_linf: float
    mean_l2: float
    runtime_s: float
    n: int


@dataclass
class RobustnessReport:
    model_tag: str
    dataset: str
    rows: list[RobustnessRow] = field(default_factory=list)
    configs: dict = field(default_factory=dict)

    def accuracy(self, attack: str) -> float:
        for r in self.rows:
            if r.attack == attack:
                return r.accuracy
        raise KeyError(attack)

    def to_dict(self) -> dict:
        return {"schema": "robustness-report/1", "model_tag": self.model_tag, "dataset": self.dataset,
                "rows": [asdict(r) for r in self.rows], "configs": self.configs}

    def write(self, directory: str | Path, stem: str = "robustness") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(directory / f"{stem}.csv", "w") as fh:
            fh.write("attack,epsilon,accuracy,success_rate,mean_linf,mean_l2,runtime_s,n\n")
            for r in self.rows:
                fh.write(f"{r.attack},{r.epsilon},{r.accuracy:.4f},{r.success_rate:.4f},"
                         f"{r.mean_linf:.6f},{r.mean_l2:.6f},{r.runtime_s:.2f},{r.n}\n")


def evaluate_robustness(model, dataset, cfgs, model_tag: str = "model", batch_size: int = 500,
                        keep: dict | None = None) -> RobustnessReport:
    """Accuracy of ``model`` on ``dataset`` (normalized) with no attack and under each config.

    Rows come out in the order given, after the leading "No attack" row. If
    ``keep`` is a dict, the adversarial batches are stored in it by row name.
    """
    if isinstance(cfgs, AttackConfig):
        cfgs = [cfgs]
    clf = as_classifier(model)
    x, y = dataset.images, dataset.labels
    report = RobustnessReport(model_tag, dataset.name)
    t = time.perf_counter()
    clean = np.concatenate([clf.logits(x[i:i + 1000]).argmax(axis=1) for i in range(0, len(x), 1000)]) == y
    report.rows.append(RobustnessRow("No attack", 0.0, float(clean.mean()), 0.0, 0.0, 0.0,
                                     time.perf_counter() - t, len(y)))
    for cfg in cfgs:
        domain = InputDomain.from_norm(dataset.norm, cfg.pixel_domain) if dataset.norm is not None else None
        t = time.perf_counter()
        adv = attack_dataset(clf, x, y, cfg, domain, batch_size)
        name = TABLE_NAMES[cfg.family]
        if keep is not None:
            keep[name] = adv
        report.rows.append(RobustnessRow(
            name, cfg.epsilon, float(np.mean(~adv.success_mask)), adv.success_rate,
            float(adv.linf.mean()) if len(y) else 0.0, float(adv.l2.mean()) if len(y) else 0.0,
            time.perf_counter() - t, len(y)))
        report.configs[name] = cfg.to_dict()
    return report


def export_adversarial(batch: AdversarialBatch, cfg: AttackConfig, directory: str | Path, extra: dict | None = None) -> Path:
    """Write ``x_adv.npy``, ``success_mask.npy``, ``linf.npy``, ``l2.npy`` and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("x_adv", "success_mask", "linf", "l2"):
        np.save(directory / f"{name}.npy", getattr(batch, name))
    manifest = {
        "schema": "adversarial-batch/1",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "n": int(len(batch.success_mask)),
        "success_rate": batch.success_rate,
        "files": ["x_adv.npy", "success_mask.npy", "linf.npy", "l2.npy"],
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_adversarial(directory: str | Path) -> tuple[AdversarialBatch, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = [np.load(directory / f"{n}.npy") for n in ("x_adv", "success_mask", "linf", "l2")]
    return AdversarialBatch(*arrays), manifest
