"""Dirichlet-network sample filtering.

A small head on top of the signal encoder emits K logits z(x); the
concentration vector alpha(x) = exp(z) (clipped) defines a Dirichlet
over class probabilities.  Training shapes alpha to be sharp on
in-distribution samples and flat on synthetic out-of-distribution
negatives; at run time, samples are rejected in two stages — Dirichlet
differential entropy above tau_ood, then expected-probability confidence
below tau_c.

The outer loop aggregates per-task gradients with similarity-derived
weights and a diagonal-Gaussian alignment penalty between each task's
embedding distribution and a learned global one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (DegenerateInputError, InsufficientBatchError,
                     InvalidInputError, InvalidParameterError,
                     NumericalFailureError)
from .net import Dense, Network
from .net.core import load_network, save_network
from .rng import rng_for
from .signal import standardize
from .uncertainty import (dirichlet_diff_entropy, dirichlet_kl,
                          dirichlet_kl_grad_p, shannon_entropy)
from .perturb import strong_view_arr

_ALPHA_LO = 1e-3
_ALPHA_HI = 1e4
_PMAX_CAP = 1.0 - 1e-6


# ---------------------------------------------------------------------------
# head

class FilterHead:
    """Encoder trunk plus an affine layer producing K concentration
    logits.  Forward exposes the trunk's penultimate features so task
    embeddings can backpropagate into shared weights."""

    def __init__(self, net: Network, K: int):
        if not isinstance(net.layers[-1], Dense):
            raise InvalidParameterError("head must end in a dense layer")
        if net.layers[-1].out_features != K:
            raise InvalidParameterError(
                f"final layer emits {net.layers[-1].out_features} logits, "
                f"expected {K}")
        self.net = net
        self.K = K

    @property
    def feature_dim(self) -> int:
        return self.net.layers[-1].in_features

    def forward(self, x: np.ndarray, train: bool = False
                ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (logits [B, K], trunk features [B, d])."""
        h = np.asarray(x, dtype=np.float64)
        for layer in self.net.layers[:-1]:
            h = layer.forward(h, train)
        feats = h
        logits = self.net.layers[-1].forward(feats, train)
        if not np.all(np.isfinite(logits)):
            raise NumericalFailureError("non-finite filter logits")
        return logits, feats

    def backward(self, dlogits: np.ndarray,
                 dfeats: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate logits gradient (and an optional extra gradient
        arriving directly at the trunk features)."""
        dh = self.net.layers[-1].backward(np.asarray(dlogits, dtype=np.float64))
        if dfeats is not None:
            dh = dh + dfeats
        for layer in reversed(self.net.layers[:-1]):
            dh = layer.backward(dh)
        return dh

    def zero_grads(self):
        self.net.zero_grads()

    def get_flat(self) -> np.ndarray:
        return self.net.get_flat()

    def get_flat_grads(self) -> np.ndarray:
        return self.net.get_flat_grads()

    def set_flat(self, flat: np.ndarray):
        self.net.set_flat(flat)

    def copy(self) -> "FilterHead":
        return FilterHead(self.net.copy(), self.K)

    def save(self, path: str):
        save_network(path, self.net)

    @classmethod
    def load(cls, path: str) -> "FilterHead":
        net = load_network(path)
        return cls(net, net.layers[-1].out_features)


def build_filter_head(encoder: Network, K: int, seed: int = 0) -> FilterHead:
    """New head whose trunk starts from the trained encoder's weights."""
    if K < 2:
        raise InvalidParameterError(f"need K >= 2 classes, got {K}")
    d = encoder.layers[-1].out_features
    specs = encoder.specs() + [{"type": "dense", "in_features": d,
                                "out_features": K}]
    net = Network.from_specs(specs, rng=rng_for(seed, "filter-head-init"),
                             seed=seed)
    src = encoder.get_flat()
    dst = net.get_flat()
    dst[:src.size] = src
    net.set_flat(dst)
    return FilterHead(net, K)


def alpha_from_logits(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """alpha = exp(z) clipped to [1e-3, 1e4].

    Returns (alpha, dalpha/dz) with the derivative zeroed where the clip
    is active.
    """
    z = np.asarray(z, dtype=np.float64)
    lo, hi = np.log(_ALPHA_LO), np.log(_ALPHA_HI)
    inside = (z > lo) & (z < hi)
    alpha = np.exp(np.clip(z, lo, hi))
    return alpha, alpha * inside


# ---------------------------------------------------------------------------
# inner losses (alpha/logit space cores + head-level conveniences)

def target_alpha(true_class: int, alpha_in: float, K: int) -> np.ndarray:
    """Concentration target: alpha_in + 1 on the true class, 1 elsewhere."""
    if not (0 <= true_class < K):
        raise InvalidParameterError(
            f"class {true_class} out of range for K={K}")
    if alpha_in < 0:
        raise InvalidParameterError("alpha_in must be >= 0")
    t = np.ones(K)
    t[true_class] += alpha_in
    return t


def rkl_terms(alpha: np.ndarray, targets: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray]:
    """Per-row reverse KL( Dir(alpha) || Dir(target) ) and its alpha
    gradient."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if alpha.shape != targets.shape:
        raise InvalidParameterError("alpha and targets must align")
    vals = np.array([dirichlet_kl(a, t) for a, t in zip(alpha, targets)])
    grads = np.stack([dirichlet_kl_grad_p(a, t)
                      for a, t in zip(alpha, targets)])
    return vals, grads


def rkl_loss(head: FilterHead, x: np.ndarray, true_class: int,
             alpha_in: float) -> float:
    """Single-sample reverse-KL objective value."""
    z, _ = head.forward(np.asarray(x)[None, ...], train=False)
    alpha, _ = alpha_from_logits(z)
    t = target_alpha(true_class, alpha_in, head.K)
    return float(dirichlet_kl(alpha[0], t))


def rkl_total_from_logits(z_in: np.ndarray, y_in: np.ndarray,
                          z_out: np.ndarray | None, alpha_in: float,
                          omega_out: float
                          ) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Mean in-distribution reverse KL to sharp targets plus
    omega_out times the mean OOD reverse KL to the flat Dirichlet.

    Returns (value, dz_in, dz_out).  Empty in-batch is invalid; a missing
    or empty out-batch simply drops that term.
    """
    z_in = np.atleast_2d(np.asarray(z_in, dtype=np.float64))
    if z_in.shape[0] == 0:
        raise InvalidInputError("empty in-distribution batch")
    K = z_in.shape[1]
    y_in = np.asarray(y_in, dtype=np.int64)
    a_in, da_in = alpha_from_logits(z_in)
    t_in = np.stack([target_alpha(int(c), alpha_in, K) for c in y_in])
    vals, grads = rkl_terms(a_in, t_in)
    n = z_in.shape[0]
    value = float(vals.mean())
    dz_in = grads * da_in / n
    dz_out = None
    if z_out is not None:
        z_out = np.atleast_2d(np.asarray(z_out, dtype=np.float64))
        if z_out.shape[0] > 0:
            a_out, da_out = alpha_from_logits(z_out)
            flat = np.ones((z_out.shape[0], K))
            v_o, g_o = rkl_terms(a_out, flat)
            value += omega_out * float(v_o.mean())
            dz_out = omega_out * g_o * da_out / z_out.shape[0]
        else:
            dz_out = np.zeros_like(z_out)
    return value, dz_in, dz_out


def rkl_total(head: FilterHead, in_X: np.ndarray, in_y: np.ndarray,
              out_X: np.ndarray | None, alpha_in: float,
              omega_out: float) -> float:
    z_in, _ = head.forward(in_X, train=False)
    z_out = None
    if out_X is not None and len(out_X):
        z_out, _ = head.forward(out_X, train=False)
    value, _, _ = rkl_total_from_logits(z_in, in_y, z_out, alpha_in, omega_out)
    return value


@dataclass
class FilterWeights:
    omega_out: float = 1.0
    omega_cal: float = 0.5
    lambda_t: float = 0.05
    lambda_out: float = 0.05
    alpha_in: float = 10.0


def _expected_nll_terms(alpha, da, y):
    """-ln(alpha_y / alpha_0) per row, with its z-space gradient."""
    a0 = alpha.sum(axis=1, keepdims=True)
    n = alpha.shape[0]
    rows = np.arange(n)
    vals = -(np.log(alpha[rows, y]) - np.log(a0.ravel()))
    dalpha = 1.0 / a0 * np.ones_like(alpha)
    dalpha[rows, y] -= 1.0 / alpha[rows, y]
    return vals, dalpha * da


def _uniform_ce_terms(alpha, da):
    """Cross-entropy of the Dirichlet-mean prediction against uniform."""
    K = alpha.shape[1]
    a0 = alpha.sum(axis=1, keepdims=True)
    vals = -(np.log(alpha) - np.log(a0)).sum(axis=1) / K
    dalpha = -1.0 / (K * alpha) + 1.0 / a0
    return vals, dalpha * da


def _sigmoid_reg_terms(z, lam):
    """-(lam/C) sum_c sigmoid(z_c) per row, with gradient."""
    K = z.shape[1]
    s = expit(z)
    vals = -(lam / K) * s.sum(axis=1)
    dz = -(lam / K) * s * (1.0 - s)
    return vals, dz


def p_max_from_alpha(alpha: np.ndarray) -> np.ndarray:
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    return (alpha / alpha.sum(axis=1, keepdims=True)).max(axis=1)


def uncertain_flags(alpha: np.ndarray) -> np.ndarray:
    """Rows whose expected-probability entropy exceeds the batch median."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    probs = alpha / alpha.sum(axis=1, keepdims=True)
    ent = np.array([shannon_entropy(p) for p in probs])
    return ent > np.median(ent)


def calibration_terms(alpha, da, flags):
    """-log(1 - p_max) on flagged rows (p_max clamped below 1), mean over
    the flagged set; zero when nothing is flagged."""
    n, K = alpha.shape
    dz = np.zeros_like(alpha)
    if not flags.any():
        return 0.0, dz
    a0 = alpha.sum(axis=1)
    probs = alpha / a0[:, None]
    m_idx = probs.argmax(axis=1)
    pm = probs[np.arange(n), m_idx]
    clamped = pm > _PMAX_CAP
    pm_c = np.minimum(pm, _PMAX_CAP)
    vals = -np.log1p(-pm_c)
    nf = int(flags.sum())
    value = float(vals[flags].sum() / nf)
    for i in np.flatnonzero(flags & ~clamped):
        m = m_idx[i]
        dpm = -alpha[i, m] / a0[i]**2 * np.ones(K)
        dpm[m] += 1.0 / a0[i]
        dz[i] = (1.0 / (1.0 - pm[i])) * dpm * da[i] / nf
    return value, dz


def combined_from_logits(z_in: np.ndarray, y_in: np.ndarray,
                         z_out: np.ndarray | None, w: FilterWeights
                         ) -> tuple[float, np.ndarray, np.ndarray | None, dict]:
    """Combined objective: in-distribution expected-likelihood term with a
    sigmoid regularizer, a uniformity term on OOD logits, and the
    flagged-confidence penalty.  Returns (value, dz_in, dz_out, parts).

    The uncertain-sample flag mask (entropy above the in-batch median) is
    held constant under the gradient.
    """
    z_in = np.atleast_2d(np.asarray(z_in, dtype=np.float64))
    if z_in.shape[0] == 0:
        raise InvalidInputError("empty in-distribution batch")
    y_in = np.asarray(y_in, dtype=np.int64)
    n = z_in.shape[0]
    a_in, da_in = alpha_from_logits(z_in)

    nll_vals, d_nll = _expected_nll_terms(a_in, da_in, y_in)
    reg_vals, d_reg = _sigmoid_reg_terms(z_in, w.lambda_t)
    lt = float(nll_vals.mean() + reg_vals.mean())
    dz_in = d_nll / n + d_reg / n

    flags = uncertain_flags(a_in)
    cal, d_cal = calibration_terms(a_in, da_in, flags)
    dz_in = dz_in + w.omega_cal * d_cal

    lout = 0.0
    dz_out = None
    if z_out is not None:
        z_out = np.atleast_2d(np.asarray(z_out, dtype=np.float64))
        if z_out.shape[0] > 0:
            a_out, da_out = alpha_from_logits(z_out)
            ce_vals, d_ce = _uniform_ce_terms(a_out, da_out)
            rego_vals, d_rego = _sigmoid_reg_terms(z_out, w.lambda_out)
            lout = float(ce_vals.mean() + rego_vals.mean())
            m = z_out.shape[0]
            dz_out = w.omega_out * (d_ce / m + d_rego / m)
        else:
            dz_out = np.zeros_like(z_out)

    value = lt + w.omega_out * lout + w.omega_cal * cal
    parts = {"l_t": lt, "l_out": lout, "l_cal": cal,
             "n_flagged": int(flags.sum())}
    return value, dz_in, dz_out, parts


def combined_inner_loss(head: FilterHead, in_X: np.ndarray, in_y: np.ndarray,
                        out_X: np.ndarray | None,
                        w: FilterWeights) -> float:
    z_in, _ = head.forward(in_X, train=False)
    z_out = None
    if out_X is not None and len(out_X):
        z_out, _ = head.forward(out_X, train=False)
    value, _, _, _ = combined_from_logits(z_in, in_y, z_out, w)
    return value


def inner_step(head: FilterHead, in_X: np.ndarray, in_y: np.ndarray,
               out_X: np.ndarray | None, lr: float,
               w: FilterWeights) -> FilterHead:
    """One plain gradient step on the combined objective (in place)."""
    if lr < 0 or not np.isfinite(lr):
        raise InvalidParameterError("lr must be finite and >= 0")
    z_in, _ = head.forward(in_X, train=True)
    z_in = z_in.copy()
    _, dz_in, _, _ = combined_from_logits(z_in, in_y, None, w)
    head.zero_grads()
    head.backward(dz_in)
    g = head.get_flat_grads()
    if out_X is not None and len(out_X):
        z_out, _ = head.forward(out_X, train=True)
        _, _, dz_out, _ = combined_from_logits(z_in, in_y, z_out, w)
        head.zero_grads()
        head.backward(dz_out)
        g = g + head.get_flat_grads()
    if not np.all(np.isfinite(g)):
        raise NumericalFailureError("non-finite filter gradient")
    head.set_flat(head.get_flat() - lr * g)
    head.net.step += 1
    return head


# ---------------------------------------------------------------------------
# task embeddings and the outer loop

def task_embedding(feats: np.ndarray) -> np.ndarray:
    """Concatenated per-dimension mean and std of a feature batch."""
    F = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    mu = F.mean(axis=0)
    std = np.sqrt(F.var(axis=0) + 1e-8)
    return np.concatenate([mu, std])


def task_embedding_backward(feats: np.ndarray, dh: np.ndarray) -> np.ndarray:
    """Gradient of the embedding w.r.t. the feature batch."""
    F = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    n, d = F.shape
    dmu, dstd = dh[:d], dh[d:]
    mu = F.mean(axis=0)
    std = np.sqrt(F.var(axis=0) + 1e-8)
    dF = np.tile(dmu / n, (n, 1))
    dF += dstd * (F - mu) / (n * std)
    return dF


def task_weights(embeddings: list[np.ndarray], temperature: float = 1.0
                 ) -> np.ndarray:
    """Similarity-based importance weights.

    C_ij = cosine(h_i, h_j); each task's row norm ||C_i||_F feeds a
    softmax over -||C_i||_F / T, so tasks similar to many others are
    downweighted.
    """
    if temperature <= 0:
        raise InvalidParameterError("temperature must be positive")
    H = np.stack([np.asarray(h, dtype=np.float64) for h in embeddings])
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateInputError("zero-norm task embedding")
    U = H / norms[:, None]
    C = U @ U.T
    row = np.sqrt((C**2).sum(axis=1))
    s = -row / temperature
    s -= s.max()
    e = np.exp(s)
    return e / e.sum()


def gaussian_kl_diag(mu0, logvar0, mu1, logvar1):
    """KL(N(mu0, diag e^logvar0) || N(mu1, diag e^logvar1)) and gradients
    w.r.t. all four arguments."""
    v0, v1 = np.exp(logvar0), np.exp(logvar1)
    diff = mu1 - mu0
    val = 0.5 * float(np.sum(v0 / v1 + diff**2 / v1 - 1.0 + logvar1 - logvar0))
    dmu0 = -diff / v1
    dmu1 = diff / v1
    dlv0 = 0.5 * (v0 / v1 - 1.0)
    dlv1 = 0.5 * (1.0 - v0 / v1 - diff**2 / v1)
    return val, dmu0, dlv0, dmu1, dlv1


@dataclass
class OuterState:
    """Meta-owned global embedding distribution parameters."""
    m_g: np.ndarray
    log_var_shared: np.ndarray
    log_var_g: np.ndarray

    @classmethod
    def fresh(cls, h_dim: int) -> "OuterState":
        return cls(m_g=np.zeros(h_dim), log_var_shared=np.zeros(h_dim),
                   log_var_g=np.zeros(h_dim))


def outer_step(head: FilterHead, outer: OuterState, tasks: list[dict],
               w: FilterWeights, lr: float = 1e-2,
               temperature: float = 1.0, lambda_align: float = 0.1
               ) -> tuple[FilterHead, OuterState, dict]:
    """Weighted multi-task update of the shared parameters.

    Each task dict carries ``in_X``, ``in_y`` and optionally ``out_X``.
    Per-task gradients of the combined loss plus the alignment KL between
    that task's embedding distribution and the learned global one are
    aggregated with similarity-derived weights (held constant under the
    gradient).  Updates head, outer state in place.
    """
    if not tasks:
        raise InsufficientBatchError("no tasks")
    embeds = []
    for t in tasks:
        _, feats = head.forward(t["in_X"], train=False)
        embeds.append(task_embedding(feats))
    delta = task_weights(embeds, temperature)

    g_head = np.zeros(head.get_flat().size)
    g_mg = np.zeros_like(outer.m_g)
    g_lvs = np.zeros_like(outer.log_var_shared)
    g_lvg = np.zeros_like(outer.log_var_g)
    total = 0.0
    for t, dt in zip(tasks, delta):
        z_in, feats = head.forward(t["in_X"], train=True)
        z_in = z_in.copy()
        feats = feats.copy()
        out_X = t.get("out_X")

        z_out = None
        if out_X is not None and len(out_X):
            z_out, _ = head.forward(out_X, train=True)
        value, dz_in, dz_out_g, _ = combined_from_logits(
            z_in, t["in_y"], z_out, w)
        if z_out is not None:
            # out-batch caches are live right now
            head.zero_grads()
            head.backward(dt * dz_out_g)
            g_head += head.get_flat_grads()

        h_T = task_embedding(feats)
        klv, dmu0, dlv0, dmu1, dlv1 = gaussian_kl_diag(
            h_T, outer.log_var_shared, outer.m_g, outer.log_var_g)
        value += lambda_align * klv
        dF = task_embedding_backward(feats, lambda_align * dmu0)
        g_lvs += dt * lambda_align * dlv0
        g_mg += dt * lambda_align * dmu1
        g_lvg += dt * lambda_align * dlv1

        head.zero_grads()
        head.forward(t["in_X"], train=True)
        head.backward(dt * dz_in, dfeats=dt * dF)
        g_head += head.get_flat_grads()
        total += dt * value
    if not np.all(np.isfinite(g_head)):
        raise NumericalFailureError("non-finite outer gradient")
    head.set_flat(head.get_flat() - lr * g_head)
    outer.m_g -= lr * g_mg
    outer.log_var_shared -= lr * g_lvs
    outer.log_var_g -= lr * g_lvg
    head.net.step += 1
    return head, outer, {"loss": float(total),
                         "weights": delta.tolist()}


# ---------------------------------------------------------------------------
# scoring, rejection, filtering

def ood_scores(head: FilterHead, X: np.ndarray
               ) -> tuple[np.ndarray, np.ndarray]:
    """Differential entropy and Dirichlet-mean confidence per sample."""
    z, _ = head.forward(X, train=False)
    alpha, _ = alpha_from_logits(z)
    de = np.array([dirichlet_diff_entropy(a) for a in alpha])
    pm = p_max_from_alpha(alpha)
    return de, pm


def ood_score(head: FilterHead, x: np.ndarray) -> dict:
    de, pm = ood_scores(head, np.asarray(x)[None, ...])
    return {"diff_entropy": float(de[0]), "p_max": float(pm[0])}


def joint_ood_score(diff_entropy: np.ndarray, p_max: np.ndarray
                    ) -> np.ndarray:
    """Dual-criterion score: the elementwise minimum of the normalized
    ranks of differential entropy and of (1 - confidence), so a sample
    ranks as anomalous only when both signals agree."""
    from scipy.stats import rankdata
    de = np.asarray(diff_entropy, dtype=np.float64)
    pm = np.asarray(p_max, dtype=np.float64)
    if de.shape != pm.shape:
        raise InvalidParameterError("score arrays must align")
    n = de.size
    return np.minimum(rankdata(de) / n, rankdata(-pm) / n)


def reject(p_max: float, tau_c: float) -> bool:
    """True means keep: boundary p_max == tau_c is kept."""
    if not (0.0 <= tau_c <= 1.0):
        raise InvalidParameterError("tau_c must lie in [0, 1]")
    return bool(p_max >= tau_c)


@dataclass
class FilterThresholds:
    tau_ood: float
    tau_c: float

    def __post_init__(self):
        if not (0.0 <= self.tau_c <= 1.0):
            raise InvalidParameterError("tau_c must lie in [0, 1]")


def filter_dataset(head: FilterHead, X: np.ndarray,
                   thresholds: FilterThresholds) -> dict:
    """Two-stage partition of sample indices: entropy-based OOD removal,
    then confidence-based removal of the survivors."""
    de, pm = ood_scores(head, X)
    idx = np.arange(X.shape[0])
    is_ood = de > thresholds.tau_ood
    survivors = idx[~is_ood]
    lowconf = survivors[pm[~is_ood] < thresholds.tau_c]
    kept = survivors[pm[~is_ood] >= thresholds.tau_c]
    return {"kept": kept, "rejected_ood": idx[is_ood],
            "rejected_lowconf": lowconf,
            "diff_entropy": de, "p_max": pm}


def fit_ood_threshold(head: FilterHead, X_id: np.ndarray,
                      percentile: float = 95.0) -> float:
    de, _ = ood_scores(head, X_id)
    return float(np.percentile(de, percentile))


def evaluate_rejection(diagnose_fn, query_X: np.ndarray,
                       query_y: np.ndarray, head: FilterHead,
                       tau_c: float) -> dict:
    """Diagnose only the queries the filter keeps.

    Returns kept fraction and accuracy on the kept set (NaN when nothing
    survives)."""
    _, pm = ood_scores(head, query_X)
    keep = pm >= tau_c
    n = query_X.shape[0]
    if not keep.any():
        return {"kept_fraction": 0.0, "accuracy": float("nan"), "n_kept": 0}
    preds = np.asarray(diagnose_fn(query_X[keep]))
    acc = float((preds == np.asarray(query_y)[keep]).mean())
    return {"kept_fraction": float(keep.mean()), "accuracy": acc,
            "n_kept": int(keep.sum())}


def write_filter_decisions(path: str, sample_ids, diff_entropy, p_max,
                           decisions):
    """CSV export: sample_id, diff_entropy, p_max, decision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "diff_entropy", "p_max", "decision"])
        for sid, de, pm, dec in zip(sample_ids, diff_entropy, p_max,
                                    decisions):
            writer.writerow([sid, f"{de:.10g}", f"{pm:.10g}", dec])


# ---------------------------------------------------------------------------
# OOD negatives and the training driver

def mk_ood_batch(X: np.ndarray, y: np.ndarray, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Synthetic off-manifold negatives: standardized white noise plus
    strongly perturbed cross-class splices."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    out = np.zeros((n,) + X.shape[1:])
    classes = sorted(set(int(c) for c in y))
    for i in range(n):
        if rng.random() < 0.5 or len(classes) < 2:
            out[i] = standardize(rng.standard_normal(X.shape[1:]))
        else:
            ca, cb = rng.choice(classes, size=2, replace=False)
            a = X[int(rng.choice(np.flatnonzero(y == ca)))]
            b = X[int(rng.choice(np.flatnonzero(y == cb)))]
            cut = X.shape[2] // 2
            spliced = np.concatenate([a[:, :cut], b[:, cut:]], axis=1)
            out[i] = strong_view_arr(spliced, rng)
    return out


@dataclass
class TrainFilterConfig:
    outer_iters: int = 120
    warmup_inner: int = 80
    n_tasks: int = 4
    batch_in: int = 24
    batch_out: int = 24
    lr_inner: float = 5e-2
    lr_outer: float = 2e-2
    temperature: float = 1.0
    lambda_align: float = 0.1
    ood_percentile: float = 95.0
    weights: FilterWeights = field(default_factory=FilterWeights)

    def __post_init__(self):
        if self.n_tasks < 1 or self.batch_in < 2:
            raise InvalidParameterError("n_tasks >= 1 and batch_in >= 2")


def _sample_task(X, y, classes, cfg, rng):
    picks = []
    for j in range(cfg.batch_in):
        c = classes[j % len(classes)]
        picks.append(int(rng.choice(np.flatnonzero(y == c))))
    in_y = np.array([int(y[i]) for i in picks])
    remap = {c: k for k, c in enumerate(classes)}
    return {"in_X": X[picks],
            "in_y": np.array([remap[int(c)] for c in in_y]),
            "out_X": mk_ood_batch(X, y, cfg.batch_out, rng)}


def train_filter(encoder: Network, X: np.ndarray, y: np.ndarray,
                 config: TrainFilterConfig | None = None, seed: int = 0,
                 log_fn=None) -> tuple[FilterHead, FilterThresholds, list]:
    """Full selector training: warmup inner steps, then weighted
    multi-task outer steps, then the entropy threshold fit on the
    in-distribution pool.  tau_c defaults to 0.8 (middle of the sweep
    grid)."""
    cfg = config or TrainFilterConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = sorted(set(int(c) for c in y))
    head = build_filter_head(encoder, K=len(classes), seed=seed)
    outer = OuterState.fresh(2 * head.feature_dim)
    rng = rng_for(seed, "filter-train")
    history = []
    for it in range(cfg.warmup_inner):
        t = _sample_task(X, y, classes, cfg, rng)
        inner_step(head, t["in_X"], t["in_y"], t["out_X"], cfg.lr_inner,
                   cfg.weights)
        loss = combined_inner_loss(head, t["in_X"], t["in_y"], t["out_X"],
                                   cfg.weights)
        rec = {"stage": "inner", "iteration": it, "loss": float(loss)}
        history.append(rec)
        if log_fn:
            log_fn(rec)
    for it in range(cfg.outer_iters):
        tasks = [_sample_task(X, y, classes, cfg, rng)
                 for _ in range(cfg.n_tasks)]
        _, _, info = outer_step(head, outer, tasks, cfg.weights,
                                lr=cfg.lr_outer,
                                temperature=cfg.temperature,
                                lambda_align=cfg.lambda_align)
        rec = {"stage": "outer", "iteration": it, "loss": info["loss"]}
        history.append(rec)
        if log_fn:
            log_fn(rec)
    tau_ood = fit_ood_threshold(head, X, cfg.ood_percentile)
    thresholds = FilterThresholds(tau_ood=tau_ood, tau_c=0.8)
    return head, thresholds, history
