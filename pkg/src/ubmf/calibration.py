"""Reliability binning, expected calibration error, and the adaptive
balanced calibration measure.

Bins are right-closed: bin m covers ((m-1)/M, m/M], with confidence 0
landing in bin 1.  Empty bins are excluded from every average.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidParameterError


@dataclass(frozen=True)
class PredictionRecord:
    confidence: float
    predicted: int
    true: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidParameterError(
                f"confidence must be in [0,1], got {self.confidence}")

    @property
    def correct(self) -> bool:
        return self.predicted == self.true


@dataclass
class ReliabilityBins:
    edges: np.ndarray      # M+1 edges on [0,1]
    counts: np.ndarray     # int, per bin
    conf: np.ndarray       # mean confidence per bin (nan when empty)
    acc: np.ndarray        # fraction correct per bin (nan when empty)

    @property
    def M(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def _bin_index(conf: np.ndarray, M: int) -> np.ndarray:
    idx = np.ceil(conf * M).astype(np.int64) - 1
    return np.clip(idx, 0, M - 1)


def bin_reliability(records: list[PredictionRecord], M: int) -> ReliabilityBins:
    if M < 1:
        raise InvalidParameterError(f"M must be >= 1, got {M}")
    confs = np.array([r.confidence for r in records], dtype=np.float64)
    correct = np.array([r.correct for r in records], dtype=np.float64)
    counts = np.zeros(M, dtype=np.int64)
    conf_sum = np.zeros(M)
    acc_sum = np.zeros(M)
    if len(records):
        idx = _bin_index(confs, M)
        np.add.at(counts, idx, 1)
        np.add.at(conf_sum, idx, confs)
        np.add.at(acc_sum, idx, correct)
    with np.errstate(invalid="ignore"):
        conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), np.nan)
        acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), np.nan)
    return ReliabilityBins(edges=np.linspace(0.0, 1.0, M + 1),
                           counts=counts, conf=conf, acc=acc)


def ece(bins: ReliabilityBins, n: int) -> float:
    """Expected calibration error: sum_m (|b_m|/n) |acc_m - conf_m|."""
    if n <= 0:
        raise InvalidInputError(f"n must be positive, got {n}")
    occ = bins.counts > 0
    return float(np.sum(bins.counts[occ] / n
                        * np.abs(bins.acc[occ] - bins.conf[occ])))


def class_confidences(records: list[PredictionRecord], K: int) -> np.ndarray:
    """conf(N_c): mean confidence over records whose TRUE class is c.
    Classes with no records get confidence 0 (fully unconfident)."""
    if K < 1:
        raise InvalidInputError(f"K must be >= 1, got {K}")
    sums = np.zeros(K)
    counts = np.zeros(K)
    for r in records:
        if not 0 <= r.true < K:
            raise InvalidParameterError(f"true class {r.true} outside [0,{K})")
        sums[r.true] += r.confidence
        counts[r.true] += 1
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def abce(records: list[PredictionRecord], class_conf: np.ndarray, M: int,
         v: float = 2.0, batch_size: int | None = None,
         absolute_second_term: bool = False) -> float:
    """Adaptive balanced calibration error:

      (|b|/K^2) sum_c (1 - conf(N_c))^v  +  (1/M) sum_m (acc_m - conf_m)

    The second term is signed as written; ``absolute_second_term``
    switches to the |.| variant.  ``batch_size`` defaults to len(records).
    """
    class_conf = np.asarray(class_conf, dtype=np.float64)
    K = class_conf.size
    if K == 0:
        raise InvalidInputError("class_conf is empty")
    if M < 1:
        raise InvalidParameterError(f"M must be >= 1, got {M}")
    b = len(records) if batch_size is None else batch_size
    bins = bin_reliability(records, M)
    occ = bins.counts > 0
    gaps = bins.acc[occ] - bins.conf[occ]
    if absolute_second_term:
        gaps = np.abs(gaps)
    first = b / K**2 * float(np.sum((1.0 - class_conf) ** v))
    second = float(np.sum(gaps)) / M
    return first + second


def joint_loss(base: float, abce_val: float, beta: float) -> float:
    """Classification loss plus beta-weighted calibration penalty."""
    return float(base + beta * abce_val)


def reliability_rows(bins: ReliabilityBins) -> list[tuple]:
    rows = []
    for m in range(bins.M):
        c = bins.conf[m] if bins.counts[m] > 0 else ""
        a = bins.acc[m] if bins.counts[m] > 0 else ""
        rows.append((float(bins.edges[m]), float(bins.edges[m + 1]),
                     int(bins.counts[m]), c, a))
    return rows


def reliability_export(bins: ReliabilityBins, path=None) -> str:
    """Write (or return) the reliability table as CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_low", "bin_high", "count", "conf", "acc"])
    for row in reliability_rows(bins):
        writer.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
