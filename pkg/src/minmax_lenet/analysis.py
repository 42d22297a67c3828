"""Parameter-uncertainty measurements: membership values, fuzziness, near-zero ratios, histograms."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import entr

from .model import LeNetParams, conv_weights_flat
from .objectives import minmax_penalty

REPORT_SCHEMA = "fuzziness-report/1"
LOG_BASES = ("natural", "base2")
DEFAULT_TAUS = (1e-3, 1e-2)


def rho(w) -> np.ndarray:
    """Membership value ``1 / (1 + |w|)``, in (0, 1]."""
    return 1.0 / (1.0 + np.abs(np.asarray(w, dtype=np.float64)))


def fuzziness(w, log_base: str = "natural") -> float:
    """Mean binary entropy of the membership values of ``w``.

    Terms with membership exactly 0 or 1 contribute 0. The maximum is
    ``ln 2`` (natural) or 1 (base2), reached when every ``|w_i| = 1``.
    """
    if log_base not in LOG_BASES:
        raise ValueError(f"log_base must be one of {LOG_BASES}")
    a = np.abs(np.asarray(w, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("fuzziness of an empty vector is undefined")
    r = 1.0 / (1.0 + a)
    s = a / (1.0 + a)  # 1 - r without cancellation
    h = float(np.mean(entr(r) + entr(s)))
    return h / math.log(2) if log_base == "base2" else h


def max_fuzziness(log_base: str = "natural") -> float:
    return 1.0 if log_base == "base2" else math.log(2)


def near_zero_ratio(w, tau: float) -> float:
    """Fraction of entries with ``|w_i| < tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    w = np.asarray(w).ravel()
    return float(np.mean(np.abs(w) < tau)) if w.size else float("nan")


@dataclass
class Histogram:
    edges: list[float]
    counts: list[int]

    @property
    def n(self) -> int:
        return int(sum(self.counts))


def histogram(w, bins: int | None = 50, value_range: tuple[float, float] | None = None,
              edges=None) -> Histogram:
    """Counts over half-open bins ``[e_i, e_{i+1})``; the last bin is closed.

    Either ``bins`` uniform bins over ``value_range`` (default: data min/max)
    or explicit ``edges``. Values outside the edges are not counted.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    if edges is None:
        if bins is None or bins < 1:
            raise ValueError("need at least one bin")
        counts, e = np.histogram(w, bins=bins, range=value_range)
    else:
        e = np.asarray(edges, dtype=np.float64)
        if e.size < 2:
            raise ValueError("need at least one bin")
        counts, e = np.histogram(w, bins=e)
    return Histogram([float(v) for v in e], [int(c) for c in counts])


@dataclass
class FuzzinessReport:
    model_tag: str
    fuzziness: float
    log_base: str
    n: int
    rho_min: float
    rho_max: float
    rho_mean: float
    near_zero: dict[str, float]
    m_value: float
    layers: list[str] = field(default_factory=lambda: ["conv1_w"])
    histogram: Histogram | None = None
    rho_values: list[float] | None = None

    def to_dict(self, with_arrays: bool = False) -> dict:
        d = asdict(self)
        if not with_arrays:
            d.pop("rho_values")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FuzzinessReport":
        d = dict(d)
        if d.get("histogram") is not None:
            d["histogram"] = Histogram(**d["histogram"])
        return cls(**d)


def analyze_weights(w, model_tag: str, log_base: str = "natural", taus=DEFAULT_TAUS,
                    bins: int = 50, value_range=None, layers=("conv1_w",)) -> FuzzinessReport:
    w = np.asarray(w, dtype=np.float64).ravel()
    r = rho(w)
    return FuzzinessReport(
        model_tag=model_tag,
        fuzziness=fuzziness(w, log_base),
        log_base=log_base,
        n=int(w.size),
        rho_min=float(r.min()), rho_max=float(r.max()), rho_mean=float(r.mean()),
        near_zero={f"{t:g}": near_zero_ratio(w, t) for t in taus},
        m_value=minmax_penalty(w),
        layers=list(layers),
        histogram=histogram(w, bins, value_range),
        rho_values=[float(v) for v in r],
    )


def analyze_params(p: LeNetParams, model_tag: str, log_base: str = "natural", taus=DEFAULT_TAUS,
                   bins: int = 50, value_range=None, all_conv: bool = False) -> FuzzinessReport:
    """Report on conv1 weights (default) or on both conv layers' weights."""
    layers = ("conv1_w", "conv2_w") if all_conv else ("conv1_w",)
    return analyze_weights(conv_weights_flat(p, layers), model_tag, log_base, taus, bins, value_range, layers)


def emit_reports(reports: list[FuzzinessReport], path: str | Path) -> dict[str, Path]:
    """Write ``fuzziness.json``, ``summary.csv`` and per-model histogram / rho CSVs into ``path``.

    Histogram CSV: ``left,right,count`` (one row per bin). Rho CSV:
    ``index,rho`` in parameter order.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    doc = {"schema": REPORT_SCHEMA, "reports": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        doc["comparisons"] = {
            f"{a.model_tag}/{b.model_tag}": (a.fuzziness / b.fuzziness if b.fuzziness else None)
            for a in reports for b in reports if a is not b
        }
    files["json"] = out / "fuzziness.json"
    files["json"].write_text(json.dumps(doc, indent=2))
    files["summary"] = out / "summary.csv"
    with open(files["summary"], "w", newline="") as fh:
        wr = csv.writer(fh)
        taus = sorted({k for r in reports for k in r.near_zero}, key=float)
        wr.writerow(["model", "log_base", "n", "fuzziness", "m_value", "rho_mean"] + [f"near_zero_{t}" for t in taus])
        for r in reports:
            wr.writerow([r.model_tag, r.log_base, r.n, repr(r.fuzziness), repr(r.m_value), repr(r.rho_mean)]
                        + [repr(r.near_zero.get(t, float("nan"))) for t in taus])
    for r in reports:
        if r.histogram is not None:
            hp = out / f"hist_{r.model_tag}.csv"
            with open(hp, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["left", "right", "count"])
                e = r.histogram.edges
                for i, c in enumerate(r.histogram.counts):
                    wr.writerow([repr(e[i]), repr(e[i + 1]), c])
            files[f"hist_{r.model_tag}"] = hp
        if r.rho_values is not None:
            rp = out / f"rho_{r.model_tag}.csv"
            with open(rp, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["index", "rho"])
                for i, v in enumerate(r.rho_values):
                    wr.writerow([i, repr(v)])
            files[f"rho_{r.model_tag}"] = rp
    return files


def load_reports(path: str | Path) -> list[FuzzinessReport]:
    doc = json.loads((Path(path) / "fuzziness.json").read_text())
    return [FuzzinessReport.from_dict(d) for d in doc["reports"]]
