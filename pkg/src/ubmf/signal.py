"""Core signal containers.

A Signal is one fixed-length multivariate vibration record.  SignalSet is
the batch form the training code works with: stacked float64 values plus
aligned label/condition arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

MIN_LENGTH = 32


@dataclass(frozen=True)
class Signal:
    """One record: ``values`` is [channels, length] float64."""

    values: np.ndarray
    sample_rate: float
    label: int | None = None
    condition: int = 0
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2:
            raise InvalidInputError(f"signal values must be 1-D or 2-D, got {v.ndim}-D")
        if v.shape[1] < MIN_LENGTH:
            raise InvalidInputError(
                f"signal length {v.shape[1]} below minimum {MIN_LENGTH}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("signal contains non-finite values")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "Signal":
        return replace(self, values=np.asarray(values, dtype=np.float64))


def standardize(values: np.ndarray) -> np.ndarray:
    """Per-channel zero-mean unit-variance scaling.

    Raises DegenerateInputError on a zero-variance channel (the sentinel
    path for silent or constant records).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    std = v.std(axis=1, keepdims=True)
    if np.any(std < 1e-12):
        raise DegenerateInputError("zero-variance channel; cannot standardize")
    return (v - v.mean(axis=1, keepdims=True)) / std


@dataclass
class SignalSet:
    """Stacked records: X is [n, channels, length]."""

    X: np.ndarray
    labels: np.ndarray            # int64, -1 for unlabeled
    conditions: np.ndarray        # int64
    sample_rate: float
    source_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.conditions = np.asarray(self.conditions, dtype=np.int64)
        if self.X.ndim != 3:
            raise InvalidInputError("SignalSet.X must be [n, channels, length]")
        n = self.X.shape[0]
        if self.labels.shape != (n,) or self.conditions.shape != (n,):
            raise InvalidInputError("labels/conditions must align with X")
        if not self.source_ids:
            self.source_ids = [""] * n

    def __len__(self) -> int:
        return self.X.shape[0]

    def signal(self, i: int) -> Signal:
        label = int(self.labels[i])
        return Signal(values=self.X[i], sample_rate=self.sample_rate,
                      label=None if label < 0 else label,
                      condition=int(self.conditions[i]),
                      source_id=self.source_ids[i])

    def subset(self, idx) -> "SignalSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SignalSet(X=self.X[idx].copy(), labels=self.labels[idx].copy(),
                         conditions=self.conditions[idx].copy(),
                         sample_rate=self.sample_rate,
                         source_ids=[self.source_ids[i] for i in idx])

    def classes(self) -> np.ndarray:
        return np.unique(self.labels[self.labels >= 0])

    @classmethod
    def from_signals(cls, signals: list[Signal]) -> "SignalSet":
        if not signals:
            raise InvalidInputError("empty signal list")
        rate = signals[0].sample_rate
        shape = signals[0].values.shape
        for s in signals:
            if s.values.shape != shape or s.sample_rate != rate:
                raise InvalidInputError("signals disagree in shape or sample rate")
        return cls(X=np.stack([s.values for s in signals]),
                   labels=np.array([-1 if s.label is None else s.label for s in signals]),
                   conditions=np.array([s.condition for s in signals]),
                   sample_rate=rate,
                   source_ids=[s.source_id for s in signals])
