"""Metric meta-learning and self-supervised training.

Two phases over the same encoder f_theta and metric scaler E_phi:

* a pseudo-label refinement phase that learns the scaled-unit metric from
  episodic tasks (prototype loss with soft unlabeled refinement), and
* a self-supervised phase combining a contrastive objective over two weak
  views with a thresholded weak-to-strong consistency term.

All losses return their value together with analytic gradients w.r.t.
the feature/projection batches; the drivers push those through the
networks' backward passes and apply plain SGD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import modified_distances, modified_distances_backward
from .errors import (DegenerateInputError, InsufficientBatchError,
                     InsufficientDataError, InvalidPairingError,
                     InvalidParameterError, MissingClassError,
                     NumericalFailureError)
from .perturb import strong_view_arr, weak_view_arr
from .rng import rng_for

_NORM_FLOOR = 1e-12


def class_prototypes(features: np.ndarray, labels: np.ndarray,
                     classes=None) -> tuple[list, np.ndarray]:
    """Per-class feature means.  Returns (sorted classes, [K, d])."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise InvalidParameterError("features must be [N, d] aligned with labels")
    if classes is None:
        classes = sorted(set(int(c) for c in labels))
    if not classes:
        raise MissingClassError("no classes present")
    protos = np.zeros((len(classes), features.shape[1]))
    for k, c in enumerate(classes):
        mask = labels == c
        if not mask.any():
            raise MissingClassError(f"class {c} has no samples")
        protos[k] = features[mask].mean(axis=0)
    return list(classes), protos


def soft_assign(dists: np.ndarray) -> np.ndarray:
    """Row-wise softmax over negated distances."""
    dists = np.asarray(dists, dtype=np.float64)
    z = -dists
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def refine_prototypes(labeled_feats: np.ndarray, labels: np.ndarray,
                      classes: list, unlabeled_feats: np.ndarray,
                      assignments: np.ndarray) -> np.ndarray:
    """Soft-count refinement: each prototype becomes the weighted mean of
    its labeled members and every unlabeled point, weighted by the
    assignment column."""
    labeled_feats = np.asarray(labeled_feats, dtype=np.float64)
    unlabeled_feats = np.asarray(unlabeled_feats, dtype=np.float64)
    assignments = np.asarray(assignments, dtype=np.float64)
    if assignments.shape != (unlabeled_feats.shape[0], len(classes)):
        raise InvalidParameterError(
            "assignments must be [n_unlabeled, n_classes]")
    protos = np.zeros((len(classes), labeled_feats.shape[1]))
    for k, c in enumerate(classes):
        mask = np.asarray(labels) == c
        if not mask.any():
            raise MissingClassError(f"class {c} has no labeled samples")
        num = labeled_feats[mask].sum(axis=0) \
            + (assignments[:, k:k + 1] * unlabeled_feats).sum(axis=0)
        den = mask.sum() + assignments[:, k].sum()
        protos[k] = num / den
    return protos


def transductive_predict(dists: np.ndarray) -> np.ndarray:
    """Hard labels (column indices) from a distance matrix."""
    return np.asarray(dists).argmin(axis=1)


# ---------------------------------------------------------------------------
# losses

def metric_loss(dists: np.ndarray, target_idx: np.ndarray
                ) -> tuple[float, np.ndarray]:
    """Prototype pull-push objective.

    mean_i [ D[i, y_i] + sum_c exp(-D[i, c]) ]; returns (value, dL/dD).
    """
    D = np.asarray(dists, dtype=np.float64)
    y = np.asarray(target_idx, dtype=np.int64)
    n = D.shape[0]
    if n == 0:
        raise InsufficientBatchError("empty batch")
    if y.shape[0] != n or y.min() < 0 or y.max() >= D.shape[1]:
        raise InvalidParameterError("target indices out of range")
    ex = np.exp(-D)
    value = float((D[np.arange(n), y] + ex.sum(axis=1)).mean())
    dD = -ex / n
    dD[np.arange(n), y] += 1.0 / n
    return value, dD


def _row_norms(Z: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateInputError(f"{what} contains a near-zero row")
    return norms


def contrastive_loss(Z1: np.ndarray, Z2: np.ndarray, tau: float = 0.5,
                     small_threshold: int = 8
                     ) -> tuple[float, np.ndarray, np.ndarray, bool]:
    """Two-view contrastive objective with a small-batch variant.

    Z1/Z2 are the two views' projections, [B, d] each; rows pair up.
    For B > small_threshold:

        -(1/B) sum_i cos(z_i, z'_i)
        + (1/(2B)) sum_{i<=B} log sum_{j != i} exp(z_i . z_j / tau)

    For B <= small_threshold, the cosine term is tempered by 1/tau and the
    log-sum term loses its 1/(2B) prefactor, sharpening both attraction
    and repulsion on tiny batches.  The sum over j runs over all 2B
    stacked rows except the anchor itself; the paired positive stays in.

    Returns (value, dZ1, dZ2, used_small_variant).
    """
    Z1 = np.asarray(Z1, dtype=np.float64)
    Z2 = np.asarray(Z2, dtype=np.float64)
    if Z1.shape != Z2.shape or Z1.ndim != 2:
        raise InvalidPairingError("views must be equal-shape [B, d] arrays")
    B = Z1.shape[0]
    if B < 2:
        raise InsufficientBatchError(f"contrastive loss needs B >= 2, got {B}")
    if tau <= 0:
        raise InvalidParameterError("tau must be positive")
    small = B <= small_threshold
    n1 = _row_norms(Z1, "first view")
    n2 = _row_norms(Z2, "second view")

    cos = np.einsum("bd,bd->b", Z1, Z2) / (n1 * n2)
    cos_scale = 1.0 / (B * tau) if small else 1.0 / B
    value = -cos_scale * float(cos.sum())
    # d(-scale * cos_i)/dz_i and /dz'_i
    dZ1 = -cos_scale * (Z2 / (n1 * n2)[:, None] - (cos / n1**2)[:, None] * Z1)
    dZ2 = -cos_scale * (Z1 / (n1 * n2)[:, None] - (cos / n2**2)[:, None] * Z2)

    Z = np.concatenate([Z1, Z2], axis=0)              # [2B, d]
    S = (Z1 @ Z.T) / tau                              # [B, 2B]
    idx = np.arange(B)
    S[idx, idx] = -np.inf                             # drop the self pair
    mx = S.max(axis=1, keepdims=True)
    e = np.exp(S - mx)
    denom = e.sum(axis=1, keepdims=True)
    lse = (mx + np.log(denom)).ravel()
    lse_scale = 1.0 if small else 1.0 / (2.0 * B)
    value += lse_scale * float(lse.sum())

    P = e / denom                                     # row softmax, [B, 2B]
    coeff = lse_scale / tau
    dZ = np.zeros_like(Z)
    dZ[:B] += coeff * (P @ Z)
    dZ += coeff * (P.T @ Z1)
    dZ1 += dZ[:B]
    dZ2 += dZ[B:]
    return value, dZ1, dZ2, small


def consistency_loss(p_weak: np.ndarray, dists_strong: np.ndarray,
                     tau_p: float = 0.8, batch_size: int | None = None
                     ) -> tuple[float, np.ndarray, int]:
    """Thresholded cross-entropy from frozen weak-view predictions to the
    strong-view assignment.

    p_weak [B, K] is treated as a constant target; rows whose max falls
    at or below tau_p contribute zero.  The strong prediction is
    softmax(-dists_strong).  Mean over ``batch_size`` rows (default: the
    rows given), so callers that pre-filter accepted rows can keep the
    full-batch normalization.  Returns (value, dL/d dists_strong,
    n_accepted).
    """
    W = np.asarray(p_weak, dtype=np.float64)
    D = np.asarray(dists_strong, dtype=np.float64)
    if W.shape != D.shape:
        raise InvalidPairingError("weak predictions and strong distances "
                                  "must align")
    B = W.shape[0]
    if B == 0:
        raise InsufficientBatchError("empty batch")
    denom = B if batch_size is None else int(batch_size)
    if denom < B:
        raise InvalidParameterError("batch_size smaller than given rows")
    accept = W.max(axis=1) > tau_p
    dD = np.zeros_like(D)
    if not accept.any():
        return 0.0, dD, 0
    Q = soft_assign(D)
    logQ = np.log(np.clip(Q, 1e-300, None))
    per = -(W * logQ).sum(axis=1)
    value = float((per * accept).sum() / denom)
    # logits are -D: dH/dD = target - softmax
    dD[accept] = (W[accept] - Q[accept]) / denom
    return value, dD, int(accept.sum())


def total_ssl_loss(contrastive_value: float, consistency_value: float,
                   lam: float = 1.0) -> float:
    return float(contrastive_value + lam * consistency_value)


# ---------------------------------------------------------------------------
# training drivers

@dataclass
class SSLConfig:
    iters: int = 300
    batch: int = 16
    tau: float = 0.5
    tau_p: float = 0.8
    lam: float = 1.0
    lr_encoder: float = 1e-2
    lr_metric: float = 1e-2
    metric_interval: int = 10
    support_per_class: int = 2
    query_per_class: int = 2
    unlabeled_batch: int = 16
    injection_ratio: float = 0.0
    max_classes_per_task: int = 0  # 0 means all available
    # optimizer stabilizers: the normalized distances leave the raw feature
    # scale unconstrained, so without decay the norms drift without bound
    # and the dot-product terms later overflow
    max_grad_norm: float = 10.0
    weight_decay: float = 1e-4
    momentum: float = 0.0

    def __post_init__(self):
        if self.iters < 1 or self.batch < 2:
            raise InvalidParameterError("iters >= 1 and batch >= 2 required")
        if not (0.0 <= self.injection_ratio):
            raise InvalidParameterError("injection_ratio must be >= 0")
        if self.metric_interval < 1:
            raise InvalidParameterError("metric_interval must be >= 1")
        if self.weight_decay < 0 or self.max_grad_norm < 0:
            raise InvalidParameterError(
                "weight_decay and max_grad_norm must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameterError("momentum must be in [0, 1)")


def _clipped(g: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm > 0:
        n = float(np.linalg.norm(g))
        if n > max_norm:
            return g * (max_norm / n)
    return g


def _jsonl_logger(log_fn):
    if log_fn is None:
        return lambda rec: None
    if callable(log_fn):
        return log_fn

    def write(rec, _path=log_fn):
        with open(_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return write


def inject_strong_samples(X: np.ndarray, ratio: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Pool augmentation: append round(ratio * n) strongly perturbed
    copies of randomly chosen originals."""
    X = np.asarray(X, dtype=np.float64)
    n_extra = int(round(ratio * X.shape[0]))
    if n_extra == 0:
        return X.copy()
    picks = rng.integers(0, X.shape[0], size=n_extra)
    extra = np.stack([strong_view_arr(X[i], rng) for i in picks])
    return np.concatenate([X, extra], axis=0)


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NumericalFailureError(f"{what} became non-finite")


def run_pseudo_label_phase(encoder, metric, labeled_X: np.ndarray,
                           labeled_y: np.ndarray, unlabeled_X: np.ndarray,
                           config: SSLConfig, seed: int = 0,
                           log_fn=None) -> list[dict]:
    """Episodic metric-learning phase.

    Per iteration: draw a task (a few classes, a support/query split of
    the labeled pool, one unlabeled batch), build refined prototypes from
    the support plus soft unlabeled assignments, then minimize the
    prototype loss on the query split.  The encoder steps every
    iteration; the metric scaler steps every ``metric_interval``-th one.
    Prototypes are constants for the gradient: the learning signal flows
    through the query features and through both metric scalings.
    """
    log = _jsonl_logger(log_fn)
    labeled_X = np.asarray(labeled_X, dtype=np.float64)
    labeled_y = np.asarray(labeled_y)
    unlabeled_X = np.asarray(unlabeled_X, dtype=np.float64)
    need = config.support_per_class + config.query_per_class
    classes = sorted(set(int(c) for c in labeled_y))
    usable = [c for c in classes
              if int((labeled_y == c).sum()) >= need]
    if len(usable) < 2:
        raise InsufficientDataError(
            f"need >= 2 classes with {need}+ labeled samples, have {len(usable)}")
    rng = rng_for(seed, "pseudo-label-phase")
    history = []
    v_enc, v_met = 0.0, 0.0
    for it in range(config.iters):
        n_cls = len(usable)
        if config.max_classes_per_task:
            n_cls = min(n_cls, config.max_classes_per_task)
        task_classes = sorted(rng.choice(usable, size=n_cls, replace=False).tolist())
        sup_idx, qry_idx = [], []
        sup_lab, qry_lab = [], []
        for k, c in enumerate(task_classes):
            pool = np.flatnonzero(labeled_y == c)
            picks = rng.permutation(pool)[:need]
            sup_idx.extend(picks[:config.support_per_class])
            qry_idx.extend(picks[config.support_per_class:need])
            sup_lab.extend([k] * config.support_per_class)
            qry_lab.extend([k] * config.query_per_class)
        u_pick = rng.integers(0, unlabeled_X.shape[0],
                              size=min(config.unlabeled_batch,
                                       unlabeled_X.shape[0]))

        # constants: support / unlabeled features, refined prototypes
        sup_f = encoder.forward(labeled_X[sup_idx], train=True)
        _, protos = class_prototypes(sup_f, np.asarray(sup_lab),
                                     classes=list(range(len(task_classes))))
        u_f = encoder.forward(unlabeled_X[u_pick], train=True)
        D_u, _ = modified_distances(metric, u_f, protos, train=False)
        delta = soft_assign(D_u)
        protos = refine_prototypes(sup_f, np.asarray(sup_lab),
                                   list(range(len(task_classes))),
                                   u_f, delta)

        # gradient pass on the query split
        q_f = encoder.forward(labeled_X[qry_idx], train=True)
        metric.zero_grads()
        encoder.zero_grads()
        D_q, cache = modified_distances(metric, q_f, protos, train=True)
        value, dD = metric_loss(D_q, np.asarray(qry_lab))
        _check_finite(value, "pseudo-label phase loss")
        dX, _ = modified_distances_backward(cache, dD)
        encoder.backward(dX)

        g_enc = (_clipped(encoder.get_flat_grads(), config.max_grad_norm)
                 + config.weight_decay * encoder.get_flat())
        v_enc = config.momentum * v_enc + g_enc
        encoder.set_flat(encoder.get_flat() - config.lr_encoder * v_enc)
        encoder.step += 1
        if (it + 1) % config.metric_interval == 0:
            g_met = (_clipped(metric.get_flat_grads(), config.max_grad_norm)
                     + config.weight_decay * metric.get_flat())
            v_met = config.momentum * v_met + g_met
            metric.set_flat(metric.get_flat() - config.lr_metric * v_met)
            metric.step += 1
        rec = {"iteration": it, "loss": float(value),
               "n_classes": len(task_classes)}
        history.append(rec)
        log(rec)
    return history


def run_ssl_phase(encoder, metric, labeled_X: np.ndarray,
                  labeled_y: np.ndarray, unlabeled_X: np.ndarray,
                  config: SSLConfig, seed: int = 0,
                  log_fn=None) -> list[dict]:
    """Self-supervised phase: contrastive agreement between two weak views
    plus thresholded weak-to-strong consistency against class prototypes.

    The unlabeled pool may first be inflated with strongly perturbed
    copies (``config.injection_ratio``).  Batches mix a balanced labeled
    portion with uniform unlabeled picks; prototypes are rebuilt each
    iteration from the full labeled set and kept constant under the
    gradient.  Only the encoder is updated; the metric scaler stays
    frozen here.
    """
    log = _jsonl_logger(log_fn)
    labeled_X = np.asarray(labeled_X, dtype=np.float64)
    labeled_y = np.asarray(labeled_y)
    unlabeled_X = np.asarray(unlabeled_X, dtype=np.float64)
    if unlabeled_X.shape[0] == 0:
        raise InsufficientDataError("empty unlabeled pool")
    rng = rng_for(seed, "ssl-phase")
    pool = inject_strong_samples(unlabeled_X, config.injection_ratio, rng)
    classes = sorted(set(int(c) for c in labeled_y))
    if not classes:
        raise MissingClassError("no labeled classes")
    by_class = {c: np.flatnonzero(labeled_y == c) for c in classes}
    history = []
    n_lab_part = config.batch // 2
    v_enc = 0.0
    for it in range(config.iters):
        lab_picks = []
        for j in range(n_lab_part):
            c = classes[j % len(classes)]
            lab_picks.append(int(rng.choice(by_class[c])))
        u_picks = rng.integers(0, pool.shape[0],
                               size=config.batch - n_lab_part)
        batch = np.concatenate([labeled_X[lab_picks], pool[u_picks]], axis=0)

        weak1 = np.stack([weak_view_arr(x, rng) for x in batch])
        weak2 = np.stack([weak_view_arr(x, rng) for x in batch])

        # constant prototypes from the labeled pool
        lab_f = encoder.forward(labeled_X, train=True)
        _, protos = class_prototypes(lab_f, labeled_y, classes=classes)

        # contrastive term: grads for each view, recomputing the first
        # view's cache before its backward pass
        f1 = encoder.forward(weak1, train=True)
        f1 = f1.copy()
        f2 = encoder.forward(weak2, train=True)
        c_val, dZ1, dZ2, used_small = contrastive_loss(f1, f2, tau=config.tau)
        encoder.zero_grads()
        encoder.backward(dZ2)
        g_total = encoder.get_flat_grads()
        encoder.forward(weak1, train=True)
        encoder.zero_grads()
        encoder.backward(dZ1)
        g_total = g_total + encoder.get_flat_grads()

        # frozen weak predictions -> strong-view consistency
        D_w, _ = modified_distances(metric, f1, protos, train=False)
        p_weak = soft_assign(D_w)
        accept = p_weak.max(axis=1) > config.tau_p
        s_val, n_acc = 0.0, 0
        if accept.any():
            strong = np.stack([strong_view_arr(batch[i], rng)
                               for i in np.flatnonzero(accept)])
            fs = encoder.forward(strong, train=True)
            if metric is not None:
                metric.zero_grads()
            D_s, cache = modified_distances(metric, fs, protos, train=True)
            s_val, dDs_sub, n_acc = consistency_loss(
                p_weak[accept], D_s, tau_p=config.tau_p,
                batch_size=batch.shape[0])
            dX, _ = modified_distances_backward(cache, config.lam * dDs_sub)
            encoder.zero_grads()
            encoder.backward(dX)
            g_total = g_total + encoder.get_flat_grads()

        value = total_ssl_loss(c_val, s_val, lam=config.lam)
        _check_finite(value, "self-supervised loss")
        g_total = (_clipped(g_total, config.max_grad_norm)
                   + config.weight_decay * encoder.get_flat())
        v_enc = config.momentum * v_enc + g_total
        encoder.set_flat(encoder.get_flat() - config.lr_encoder * v_enc)
        encoder.step += 1
        rec = {"iteration": it, "loss": float(value),
               "contrastive": float(c_val), "consistency": float(s_val),
               "n_accepted": int(n_acc), "small_batch_variant": bool(used_small)}
        history.append(rec)
        log(rec)
    return history
