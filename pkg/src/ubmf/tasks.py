"""Episodic task construction, evaluation, and summary statistics.

An episode draws N classes (N uniform in [2, MaxN]), an independently
sized 1-5-sample support per class (imbalance is the point), and a
50-query balanced-within-one test set disjoint from the support.
Accuracy is reported chance-corrected so episodes of different widths
are comparable.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import (InsufficientDataError, InvalidParameterError,
                     UndefinedMetricError)
from .rng import rng_for

QUERY_BUDGET = 50
MAX_SHOT = 5


@dataclass
class Episode:
    classes: list
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.classes)


def sample_episode(labels: np.ndarray, max_n: int,
                   rng: np.random.Generator) -> Episode:
    """Draw one Any-way 1-5-shot episode from a labeled pool.

    N ~ U[2, max_n]; per-class support counts K_i ~ U[1, 5] drawn
    independently; queries 50 total, balanced within one across the N
    classes, disjoint from the support.  A class is eligible only if it
    can cover the worst case (5 support + its query share + 1).
    """
    labels = np.asarray(labels)
    if max_n < 2:
        raise InvalidParameterError(f"max_n must be >= 2, got {max_n}")
    N = int(rng.integers(2, max_n + 1))
    base = QUERY_BUDGET // N
    need = MAX_SHOT + base + 1
    counts = {c: int((labels == c).sum()) for c in sorted(set(labels.tolist()))}
    eligible = [c for c, n in counts.items() if n >= need]
    if len(eligible) < N:
        raise InsufficientDataError(
            f"need {N} classes with >= {need} samples, have {len(eligible)}")
    chosen = sorted(rng.choice(eligible, size=N, replace=False).tolist())
    shots = rng.integers(1, MAX_SHOT + 1, size=N)
    shares = np.full(N, base)
    r = QUERY_BUDGET - base * N
    if r > 0:
        shares[rng.permutation(N)[:r]] += 1

    sup_idx, sup_y, qry_idx, qry_y = [], [], [], []
    for k, c in enumerate(chosen):
        pool = np.flatnonzero(labels == c)
        perm = rng.permutation(pool)
        ki, si = int(shots[k]), int(shares[k])
        sup_idx.extend(perm[:ki])
        sup_y.extend([c] * ki)
        qry_idx.extend(perm[ki:ki + si])
        qry_y.extend([c] * si)
    return Episode(classes=chosen,
                   support_idx=np.asarray(sup_idx, dtype=np.int64),
                   support_y=np.asarray(sup_y),
                   query_idx=np.asarray(qry_idx, dtype=np.int64),
                   query_y=np.asarray(qry_y))


def standardized_accuracy(acc: float, N: int) -> float:
    """Chance-corrected accuracy: (acc - 1/N) / (1 - 1/N)."""
    if N < 2:
        raise InvalidParameterError(f"N must be >= 2, got {N}")
    return float((acc - 1.0 / N) / (1.0 - 1.0 / N))


@dataclass
class EvalSummary:
    mean_std_acc: float
    ci95: float
    n_tasks: int
    per_task: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_std_acc": self.mean_std_acc, "ci95": self.ci95,
                "n_tasks": self.n_tasks, "per_task": self.per_task}


def evaluate(model, X: np.ndarray, labels: np.ndarray, max_n: int,
             n_tasks: int = 100, seed: int = 0,
             threads: int | None = None) -> EvalSummary:
    """Run seeded episodes and summarize chance-corrected accuracy.

    ``model(support_X, support_y, query_X) -> predictions``.  Episodes
    use independent derived RNG streams, so the summary is reproducible
    for a fixed seed regardless of thread count (set UBMF_THREADS or pass
    ``threads``; default 1 — share a model across threads only if its
    prediction path is stateless).
    """
    X = np.asarray(X)
    labels = np.asarray(labels)
    if threads is None:
        threads = int(os.environ.get("UBMF_THREADS", "1"))

    def run_one(i: int) -> dict:
        ep = sample_episode(labels, max_n, rng_for(seed, "eval", str(i)))
        preds = np.asarray(model(X[ep.support_idx], ep.support_y,
                                 X[ep.query_idx]))
        acc = float((preds == ep.query_y).mean())
        return {"task": i, "n_way": ep.n_way, "accuracy": acc,
                "std_accuracy": standardized_accuracy(acc, ep.n_way)}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_one, range(n_tasks)))
    else:
        records = [run_one(i) for i in range(n_tasks)]
    vals = np.array([r["std_accuracy"] for r in records])
    ci = 1.96 * float(vals.std(ddof=0)) / np.sqrt(n_tasks)
    return EvalSummary(mean_std_acc=float(vals.mean()), ci95=ci,
                       n_tasks=n_tasks, per_task=records)


def protonet_baseline(support_feats: np.ndarray, support_y: np.ndarray,
                      query_feats: np.ndarray) -> np.ndarray:
    """Nearest-prototype classification with plain Euclidean distance."""
    support_feats = np.asarray(support_feats, dtype=np.float64)
    query_feats = np.asarray(query_feats, dtype=np.float64)
    support_y = np.asarray(support_y)
    classes = sorted(set(support_y.tolist()))
    protos = np.stack([support_feats[support_y == c].mean(axis=0)
                       for c in classes])
    d2 = ((query_feats[:, None, :] - protos[None, :, :])**2).sum(axis=2)
    return np.asarray(classes)[d2.argmin(axis=1)]


def train_protonet_encoder(encoder, X: np.ndarray, labels: np.ndarray,
                           iters: int = 200, lr: float = 1e-2,
                           support_per_class: int = 2,
                           query_per_class: int = 2, seed: int = 0,
                           log_fn=None) -> list[dict]:
    """Supervised episodic training of an encoder for the
    nearest-prototype baseline.

    Each iteration draws a mini-episode from the labeled pool, builds
    per-class prototypes from the support features (held constant under
    the gradient) and minimizes cross-entropy of the softmax over
    negative squared Euclidean query-prototype distances.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    need = support_per_class + query_per_class
    classes = [c for c in sorted(set(labels.tolist()))
               if int((labels == c).sum()) >= need]
    if len(classes) < 2:
        raise InsufficientDataError(
            f"need >= 2 classes with {need}+ samples")
    rng = rng_for(seed, "protonet-train")
    history = []
    for it in range(iters):
        sup_idx, qry_idx, qry_y = [], [], []
        for k, c in enumerate(classes):
            perm = rng.permutation(np.flatnonzero(labels == c))
            sup_idx.extend(perm[:support_per_class])
            qry_idx.extend(perm[support_per_class:need])
            qry_y.extend([k] * query_per_class)
        sup_f = encoder.forward(X[sup_idx], train=True)
        protos = sup_f.reshape(len(classes), support_per_class, -1).mean(axis=1)
        q_f = encoder.forward(X[qry_idx], train=True)
        diff = q_f[:, None, :] - protos[None, :, :]
        d2 = (diff**2).sum(axis=2)
        z = -d2
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        n = len(qry_y)
        rows = np.arange(n)
        y = np.asarray(qry_y)
        loss = float(-np.log(np.clip(p[rows, y], 1e-300, None)).mean())
        dD2 = p.copy()
        dD2[rows, y] -= 1.0
        dD2 = -dD2 / n          # logits were -d^2
        dq = 2.0 * (dD2[:, :, None] * diff).sum(axis=1)
        encoder.zero_grads()
        encoder.backward(dq)
        encoder.set_flat(encoder.get_flat() - lr * encoder.get_flat_grads())
        encoder.step += 1
        rec = {"iteration": it, "loss": loss}
        history.append(rec)
        if log_fn:
            log_fn(rec)
    return history


def auroc(scores: np.ndarray, is_positive: np.ndarray) -> float:
    """Rank-based AUROC with midrank tie handling; positives should
    score higher."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            "AUROC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2)
                 / (n_pos * n_neg))
