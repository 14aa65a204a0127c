"""Reconstruction, sparsity and dictionary-recovery metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .numeric import ShapeError, as_matrix

REPORT_FORMAT = "report_v1"
# reserved for metrics this package does not compute
RESERVED_KEYS = ("cknna", "mean_ms", "max_ms")


def _pair(x, recon) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x, "x")
    recon = as_matrix(recon, "recon")
    if x.shape != recon.shape:
        raise ShapeError(f"x shape {x.shape} != recon shape {recon.shape}")
    return x, recon


def nmse(x, recon) -> float:
    """Total squared error over total squared norm of the inputs."""
    x, recon = _pair(x, recon)
    denom = float(np.sum(x * x))
    if denom == 0:
        raise ValueError("nmse undefined: every input row is zero")
    return float(np.sum((x - recon) ** 2)) / denom


def fvu(x, recon) -> float:
    x, recon = _pair(x, recon)
    centered = x - x.mean(axis=0)
    denom = float(np.sum(centered * centered))
    if denom == 0:
        raise ValueError("fvu undefined: inputs have zero variance")
    return float(np.sum((x - recon) ** 2)) / denom


def row_l0(codes, threshold: float = 0.0) -> np.ndarray:
    return np.count_nonzero(np.abs(as_matrix(codes, "codes")) > threshold, axis=1)


def mean_l0(codes, threshold: float = 0.0) -> float:
    return float(np.mean(row_l0(codes, threshold)))


def cosine_sim(x, recon, eps: float = 1e-12) -> float:
    x, recon = _pair(x, recon)
    num = np.sum(x * recon, axis=1)
    den = np.linalg.norm(x, axis=1) * np.linalg.norm(recon, axis=1)
    return float(np.mean(num / np.maximum(den, eps)))


def recovery_score(learned, truth, threshold: float = 0.9) -> tuple[float, int]:
    """For each true direction, the best absolute cosine against any learned column.

    Returns the mean of those maxima and how many exceed ``threshold``.
    """
    learned = as_matrix(learned, "learned")
    truth = as_matrix(truth, "truth")
    if learned.shape[0] != truth.shape[0]:
        raise ShapeError(f"learned dictionary has d={learned.shape[0]}, truth has d={truth.shape[0]}")
    ln = learned / np.maximum(np.linalg.norm(learned, axis=0, keepdims=True), 1e-12)
    tn = truth / np.maximum(np.linalg.norm(truth, axis=0, keepdims=True), 1e-12)
    best = np.max(np.abs(tn.T @ ln), axis=1)
    return float(np.mean(best)), int(np.count_nonzero(best > threshold))


def _iter_codes(codes) -> Iterable[np.ndarray]:
    if isinstance(codes, np.ndarray):
        yield as_matrix(codes, "codes")
        return
    for block in codes:
        yield as_matrix(block, "codes")


@dataclass(frozen=True)
class KStar:
    mean: float
    rounded: int


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def estimate_k_star(codes, threshold: float = 0.0) -> KStar:
    """Mean number of active concepts per sample over a matrix or a stream of matrices."""
    total = 0
    rows = 0
    for block in _iter_codes(codes):
        total += int(np.sum(row_l0(block, threshold)))
        rows += block.shape[0]
    if rows == 0:
        raise ValueError("cannot estimate K* from an empty stream")
    mean = total / rows
    return KStar(mean, round_half_up(mean))


@dataclass
class Histogram:
    """Sample counts indexed by per-sample active-concept count."""

    counts: np.ndarray

    def __add__(self, other: "Histogram") -> "Histogram":
        n = max(self.counts.size, other.counts.size)
        a = np.zeros(n, dtype=np.int64)
        a[: self.counts.size] += self.counts
        a[: other.counts.size] += other.counts
        return Histogram(a)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tsv(self, buckets: int = 1) -> str:
        lines = ["l0_lo\tl0_hi\tcount"]
        for lo in range(0, self.counts.size, buckets):
            hi = min(lo + buckets, self.counts.size) - 1
            lines.append(f"{lo}\t{hi}\t{int(self.counts[lo:hi + 1].sum())}")
        return "\n".join(lines) + "\n"


def activation_histogram(codes, threshold: float = 0.0) -> Histogram:
    hist = Histogram(np.zeros(0, dtype=np.int64))
    for block in _iter_codes(codes):
        hist = hist + Histogram(np.bincount(row_l0(block, threshold)).astype(np.int64))
    return hist


def concept_frequency(codes, threshold: float = 0.0) -> np.ndarray:
    """Fraction of samples on which each concept fires."""
    counts = None
    rows = 0
    for block in _iter_codes(codes):
        c = np.count_nonzero(np.abs(block) > threshold, axis=0)
        counts = c if counts is None else counts + c
        rows += block.shape[0]
    if counts is None or rows == 0:
        raise ValueError("empty code stream")
    return counts / rows


def dead_fraction(codes, threshold: float = 0.0) -> float:
    return float(np.mean(concept_frequency(codes, threshold) == 0))


@dataclass
class MetricsReport:
    nmse: float
    fvu: float
    mean_l0: float
    cosine_sim: float
    dead_fraction: float
    k_star: float
    k_star_rounded: int
    n_samples: int
    histogram: Histogram
    recovery_mean_max_cos: float | None = None
    recovery_matched: int | None = None
    extra: dict = field(default_factory=dict)

    def items(self) -> list[tuple[str, str]]:
        out = [
            ("format", REPORT_FORMAT),
            ("n_samples", str(self.n_samples)),
            ("nmse", f"{self.nmse:.9g}"),
            ("fvu", f"{self.fvu:.9g}"),
            ("mean_l0", f"{self.mean_l0:.9g}"),
            ("cosine_sim", f"{self.cosine_sim:.9g}"),
            ("dead_fraction", f"{self.dead_fraction:.9g}"),
            ("k_star", f"{self.k_star:.9g}"),
            ("k_star_rounded", str(self.k_star_rounded)),
        ]
        if self.recovery_mean_max_cos is not None:
            out.append(("recovery_mean_max_cos", f"{self.recovery_mean_max_cos:.9g}"))
            out.append(("recovery_matched", str(self.recovery_matched)))
        for key in RESERVED_KEYS:
            out.append((key, "na"))
        out.extend((k, str(v)) for k, v in sorted(self.extra.items()))
        return out

    def to_text(self) -> str:
        body = "".join(f"{k}={v}\n" for k, v in self.items())
        return body + "\n[histogram]\n" + self.histogram.tsv()


def parse_report(text: str) -> tuple[dict, list[tuple[int, int, int]]]:
    """Inverse of :meth:`MetricsReport.to_text`: key-value dict and histogram rows."""
    head, _, hist = text.partition("\n[histogram]\n")
    values = {}
    for line in head.splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            values[key] = val
    rows = []
    for line in hist.splitlines()[1:]:
        if line.strip():
            lo, hi, count = (int(v) for v in line.split("\t"))
            rows.append((lo, hi, count))
    return values, rows


def evaluate(model, batches: Iterable[np.ndarray], truth: np.ndarray | None = None) -> MetricsReport:
    """Run ``model`` over every batch and collect the report."""
    xs, recons, codes = [], [], []
    for x in batches:
        fwd = model.forward(x)
        xs.append(fwd.x)
        recons.append(fwd.recon)
        codes.append(fwd.codes)
    if not xs:
        raise ValueError("evaluation set is empty")
    x = np.concatenate(xs)
    recon = np.concatenate(recons)
    z = np.concatenate(codes)
    ks = estimate_k_star(z)
    report = MetricsReport(
        nmse=nmse(x, recon),
        fvu=fvu(x, recon),
        mean_l0=mean_l0(z),
        cosine_sim=cosine_sim(x, recon),
        dead_fraction=dead_fraction(z),
        k_star=ks.mean,
        k_star_rounded=ks.rounded,
        n_samples=x.shape[0],
        histogram=activation_histogram(z),
    )
    if truth is not None:
        report.recovery_mean_max_cos, report.recovery_matched = recovery_score(model.dictionary(), truth)
    return report
