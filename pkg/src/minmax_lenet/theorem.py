"""Monte Carlo comparison of input-gradient magnitudes for two random linear-softmax models.

Model A has i.i.d. ``U(0, 1)`` weights, model B i.i.d. ``{0, 1}`` weights with
``P(1) = p1``. For a fixed input ``x`` and one-hot label ``y`` we estimate
``|E d L / d x_i|`` for both families and count coordinates where model B's
magnitude exceeds model A's by more than three combined standard errors.

The closed-form values ``1/2 (1 - sum sigma)`` and ``p1 (1 - sum sigma)``
obtained by moving the expectation inside the softmax are reported next to
the estimates; since softmax outputs sum to one they are identically zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import log_softmax_array

FAMILIES = ("uniform01", "bernoulli")
DEFAULT_CHUNK = 2000


@dataclass(frozen=True)
class ToyModelSpec:
    m: int
    n: int
    family: str = "uniform01"
    p1: float = 0.05

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")
        if self.family == "bernoulli" and not 0 <= self.p1 <= 1:
            raise ValueError("p1 must lie in [0, 1]")


@dataclass
class TheoremResult:
    m: int
    n: int
    p1: float
    trials: int
    seed: int
    side_a: list[float]        # |E dL_a/dx_i|, uniform weights
    side_b: list[float]        # |E dL_b/dx_i|, Bernoulli weights
    stderr_a: list[float]
    stderr_b: list[float]
    z: list[float]             # (side_b - side_a) / combined stderr
    violations: int
    closed_form_a: float
    closed_form_b: float
    x: list[float] = field(default_factory=list)
    label: int = 0

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory: str | Path, stem: str | None = None) -> None:
        """CSV (coordinate, side_a, side_b, stderr_a, stderr_b, violation) and a JSON summary."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"theorem_m{self.m}_n{self.n}_p{self.p1:g}"
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coordinate", "side_a", "side_b", "stderr_a", "stderr_b", "violation"])
            for i in range(self.n):
                w.writerow([i, repr(self.side_a[i]), repr(self.side_b[i]), repr(self.stderr_a[i]),
                            repr(self.stderr_b[i]), int(self.z[i] > 3)])
        summary = {k: v for k, v in self.to_dict().items()
                   if k not in ("side_a", "side_b", "stderr_a", "stderr_b", "z")}
        summary["max_z"] = float(np.max(self.z))
        (directory / f"{stem}.json").write_text(json.dumps(summary, indent=2))


def softmax_rows(a: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_array(a.reshape(-1, a.shape[-1]))).reshape(a.shape)


def analytic_input_gradient(W, x, y) -> np.ndarray:
    """``W^T (softmax(W x) - y)``, the input gradient of ``-y^T log softmax(W x)``.

    ``W`` may carry leading batch axes: (..., m, n) with ``x`` of shape (..., n).
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a = np.einsum("...mn,...n->...m", W, x)
    return np.einsum("...mn,...m->...n", W, softmax_rows(a) - y)


def sample_weights(spec: ToyModelSpec, seed_or_rng, trials: int | None = None) -> np.ndarray:
    """Draw one (m, n) matrix, or ``trials`` of them stacked, from the family described by ``spec``."""
    rng = np.random.default_rng(seed_or_rng)
    shape = (spec.m, spec.n) if trials is None else (trials, spec.m, spec.n)
    if spec.family == "uniform01":
        return rng.uniform(0.0, 1.0, size=shape)
    return (rng.random(size=shape) < spec.p1).astype(np.float64)


def _gradient_moments(spec: ToyModelSpec, x, y, trials: int, rng, chunk: int = DEFAULT_CHUNK):
    total = np.zeros(spec.n)
    total_sq = np.zeros(spec.n)
    done = 0
    while done < trials:
        k = min(chunk, trials - done)
        g = analytic_input_gradient(sample_weights(spec, rng, k), x, y)
        total += g.sum(axis=0)
        total_sq += (g * g).sum(axis=0)
        done += k
    mean = total / trials
    var = np.maximum(total_sq / trials - mean * mean, 0.0) * trials / max(trials - 1, 1)
    return mean, np.sqrt(var / trials)


def expected_input_gradient(spec: ToyModelSpec, x, y, trials: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate ``|E dL/dx_i|`` over weight draws and its standard error."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    mean, se = _gradient_moments(spec, x, y, trials, np.random.default_rng(seed))
    return np.abs(mean), se


def verify_gradient_bound(spec_a: ToyModelSpec, spec_b: ToyModelSpec, x, y, trials: int, seed: int) -> TheoremResult:
    """Estimate both sides of ``|dE L_b/dx_i| <= |dE L_a/dx_i|`` and count 3-sigma violations."""
    if spec_a.family != "uniform01" or spec_b.family != "bernoulli":
        raise ValueError("spec_a must be uniform01 and spec_b bernoulli")
    if (spec_a.m, spec_a.n) != (spec_b.m, spec_b.n):
        raise ValueError("both models need the same shape")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ss_a, ss_b = np.random.SeedSequence(seed).spawn(2)
    a, se_a = expected_input_gradient(spec_a, x, y, trials, ss_a)
    b, se_b = expected_input_gradient(spec_b, x, y, trials, ss_b)
    combined = np.sqrt(se_a ** 2 + se_b ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(combined > 0, (b - a) / combined, np.where(b > a, np.inf, 0.0))
    # closed forms with sigma taken at the mean logits of each family
    mean_w_a = 0.5 * np.ones((spec_a.m, spec_a.n))
    mean_w_b = spec_b.p1 * np.ones((spec_b.m, spec_b.n))
    sig_a = softmax_rows((mean_w_a @ x)[None])[0]
    sig_b = softmax_rows((mean_w_b @ x)[None])[0]
    return TheoremResult(
        m=spec_a.m, n=spec_a.n, p1=spec_b.p1, trials=trials, seed=seed,
        side_a=a.tolist(), side_b=b.tolist(), stderr_a=se_a.tolist(), stderr_b=se_b.tolist(),
        z=z.tolist(), violations=int(np.sum(z > 3)),
        closed_form_a=float(0.5 * (1 - sig_a.sum())),
        closed_form_b=float(spec_b.p1 * (1 - sig_b.sum())),
        x=x.tolist(), label=int(np.argmax(y)),
    )


def draw_problem(m: int, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random ``x ~ U(0,1)^n`` and a uniformly chosen one-hot ``y`` of length ``m``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    y = np.zeros(m)
    y[rng.integers(m)] = 1.0
    return x, y


def run_grid(p1s=(0.01, 0.05, 0.1, 0.25), ms=(2, 10), ns=(5, 50), trials: int = 10_000,
             seed: int = 0) -> list[TheoremResult]:
    """One comparison per (p1, m, n); ``x``/``y`` fixed per (m, n) so all p1 share a problem."""
    results = []
    for mi, m in enumerate(ms):
        for ni, n in enumerate(ns):
            x, y = draw_problem(m, n, [seed, mi, ni])
            for pi, p1 in enumerate(p1s):
                results.append(verify_gradient_bound(ToyModelSpec(m, n, "uniform01"),
                                                     ToyModelSpec(m, n, "bernoulli", p1),
                                                     x, y, trials, seed * 1_000_003 + 7919 * (mi * 97 + ni * 13 + pi)))
    return results
