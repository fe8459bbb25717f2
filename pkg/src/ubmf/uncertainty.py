"""Entropy, predictive-uncertainty decomposition, and Dirichlet utilities.

Natural logarithms throughout.  The decomposition splits total predictive
entropy into expected (aleatoric) entropy plus mutual information
(epistemic); the mutual-information identity

    MI = E_m[ KL(p_m || p_bar) ]

holds exactly, and ``expected_kl`` implements that form so the two
routes agree to machine precision.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln

from .errors import InvalidInputError, InvalidParameterError

_SIMPLEX_ATOL = 1e-8
_Q_FLOOR = 1e-12


def _as_prob(p, name: str = "p") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 1-D vector")
    if np.any(p < -1e-12) or not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{name} has negative or non-finite components")
    if abs(p.sum() - 1.0) > _SIMPLEX_ATOL:
        raise InvalidInputError(f"{name} sums to {p.sum()!r}, not 1")
    return np.clip(p, 0.0, None)


def _as_alpha(alpha, name: str = "alpha") -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0:
        raise InvalidParameterError(f"{name} must be a non-empty 1-D vector")
    if np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
        raise InvalidParameterError(f"{name} must be strictly positive and finite")
    return alpha


def shannon_entropy(p) -> float:
    """-sum p ln p with 0 ln 0 := 0."""
    p = _as_prob(p)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def kl_categorical(p, q) -> float:
    """sum p ln(p/q); q floored at 1e-12 to keep the value finite."""
    p = _as_prob(p, "p")
    q = _as_prob(q, "q")
    if p.size != q.size:
        raise InvalidInputError("p and q must have the same length")
    q = np.maximum(q, _Q_FLOOR)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def decompose_predictive(ensemble) -> dict[str, float]:
    """Split ensemble predictive entropy into aleatoric + epistemic.

    total = H(mean member); aleatoric = mean member entropy;
    epistemic = total - aleatoric (the mutual information).
    """
    if len(ensemble) == 0:
        raise InvalidInputError("empty ensemble")
    members = np.stack([_as_prob(m, f"member {i}") for i, m in enumerate(ensemble)])
    mean = members.mean(axis=0)
    total = shannon_entropy(mean / mean.sum())
    aleatoric = float(np.mean([shannon_entropy(m / m.sum()) for m in members]))
    return {"total": total, "aleatoric": aleatoric, "epistemic": total - aleatoric}


def expected_kl(ensemble) -> float:
    """Mean KL between each member and the ensemble mean; equals the
    epistemic term of decompose_predictive (the MI identity)."""
    if len(ensemble) == 0:
        raise InvalidInputError("empty ensemble")
    members = np.stack([_as_prob(m, f"member {i}") for i, m in enumerate(ensemble)])
    mean = members.mean(axis=0)
    return float(np.mean([kl_categorical(m / m.sum(), mean / mean.sum())
                          for m in members]))


def dirichlet_logpdf(mu, alpha) -> float:
    """Log density of Dir(alpha) at the simplex point mu.

    Boundary components (mu_k = 0) give -inf except when alpha_k = 1,
    where the factor mu^0 contributes nothing.
    """
    alpha = _as_alpha(alpha)
    mu = _as_prob(mu, "mu")
    if mu.size != alpha.size:
        raise InvalidInputError("mu and alpha must have the same length")
    logB = np.sum(gammaln(alpha)) - gammaln(alpha.sum())
    zero = mu == 0
    if np.any(zero & (alpha != 1.0)):
        return float("-inf")
    nz = ~zero
    return float(-logB + np.sum((alpha[nz] - 1.0) * np.log(mu[nz])))


def dirichlet_diff_entropy(alpha) -> float:
    """Differential entropy of Dir(alpha):
    ln B(a) + (a0 - K) psi(a0) - sum (a_k - 1) psi(a_k)."""
    alpha = _as_alpha(alpha)
    a0 = alpha.sum()
    K = alpha.size
    logB = np.sum(gammaln(alpha)) - gammaln(a0)
    return float(logB + (a0 - K) * digamma(a0)
                 - np.sum((alpha - 1.0) * digamma(alpha)))


def dirichlet_kl(alpha_p, alpha_q) -> float:
    """Closed-form KL( Dir(alpha_p) || Dir(alpha_q) )."""
    ap = _as_alpha(alpha_p, "alpha_p")
    aq = _as_alpha(alpha_q, "alpha_q")
    if ap.size != aq.size:
        raise InvalidParameterError("alpha vectors must have the same length")
    a0p, a0q = ap.sum(), aq.sum()
    val = (gammaln(a0p) - np.sum(gammaln(ap))
           - gammaln(a0q) + np.sum(gammaln(aq))
           + np.sum((ap - aq) * (digamma(ap) - digamma(a0p))))
    return float(val)


def dirichlet_kl_grad_p(alpha_p, alpha_q) -> np.ndarray:
    """d KL(Dir(a_p) || Dir(a_q)) / d a_p, used by the filter losses.

    d/da_j = psi1(a_j)(a_j - b_j) - psi1(a0) sum_k (a_k - b_k)
    with psi1 the trigamma function.
    """
    from scipy.special import polygamma
    ap = _as_alpha(alpha_p, "alpha_p")
    aq = _as_alpha(alpha_q, "alpha_q")
    diff = ap - aq
    trig = polygamma(1, ap)
    trig0 = polygamma(1, ap.sum())
    return trig * diff - trig0 * diff.sum()
