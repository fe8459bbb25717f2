"""Bayesian quadratic discriminant machinery.

A shared Normal-Inverse-Wishart prior (eta, lambda, nu, Psi) is updated
per class on the support set; the resulting posterior predictive is a
multivariate Student-t whose density ratio classifies queries.  The prior
itself can be meta-learned by gradient descent on the query-set
log-likelihood, with every gradient derived by hand and checked against
finite differences.

Conventions: data matrices are [N, d]; scatter S = sum (x-xbar)(x-xbar)^T;
posterior map:

    eta_k = (lambda*eta + N*xbar) / (lambda + N)
    lambda_k = lambda + N,  nu_k = nu + N
    Psi_k = Psi + S + (lambda*N/(lambda+N)) (xbar-eta)(xbar-eta)^T

predictive: St(x | eta_k, ((lambda_k+1)/(lambda_k*(nu_k-d+1))) Psi_k,
nu_k - d + 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import digamma, gammaln

from .errors import (InsufficientBatchError, InvalidParameterError,
                     MissingClassError, NumericalFailureError,
                     SingularCovarianceError, TrainingFailureError)
from .rng import rng_for

_JITTER = 1e-8
_EIG_TOL = 1e-10


def _chol_with_jitter(mat: np.ndarray, what: str):
    """Cholesky with a jitter retry scaled to the matrix, then hard error."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        # absolute jitter alone is useless when the matrix itself lives at
        # a tiny scale, so include a relative term
        scale = max(float(np.abs(np.diag(mat)).mean()), 1.0)
        try:
            return np.linalg.cholesky(
                mat + _JITTER * scale * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError(
                f"{what} is not positive definite even after jitter") from exc


@dataclass
class NIWParams:
    eta: np.ndarray
    lam: float
    nu: float
    psi: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64).ravel()
        self.psi = np.asarray(self.psi, dtype=np.float64)
        d = self.eta.size
        if self.psi.shape != (d, d):
            raise InvalidParameterError(
                f"psi must be {d}x{d}, got {self.psi.shape}")
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise InvalidParameterError(f"lambda must be > 0, got {self.lam}")
        if not np.isfinite(self.nu) or self.nu <= d - 1:
            raise InvalidParameterError(
                f"nu must be > d-1 = {d - 1}, got {self.nu}")
        if not np.all(np.isfinite(self.eta)) or not np.all(np.isfinite(self.psi)):
            raise InvalidParameterError("non-finite NIW parameters")
        _chol_with_jitter(self.psi, "psi")

    @property
    def d(self) -> int:
        return self.eta.size

    def to_dict(self) -> dict:
        L = _chol_with_jitter(self.psi, "psi")
        return {"eta": self.eta.tolist(), "lambda": float(self.lam),
                "nu": float(self.nu),
                "psi_cholesky_lower": L.ravel().tolist(), "d": self.d}

    @classmethod
    def from_dict(cls, dd: dict) -> "NIWParams":
        d = int(dd["d"])
        L = np.asarray(dd["psi_cholesky_lower"], dtype=np.float64).reshape(d, d)
        return cls(eta=np.asarray(dd["eta"], dtype=np.float64),
                   lam=float(dd["lambda"]), nu=float(dd["nu"]), psi=L @ L.T)


def default_prior(d: int) -> NIWParams:
    """Zero mean, unit scale matrix, lambda 1, nu = d."""
    return NIWParams(eta=np.zeros(d), lam=1.0, nu=float(d), psi=np.eye(d))


@dataclass
class StudentTParams:
    loc: np.ndarray
    scale: np.ndarray
    dof: float

    def __post_init__(self):
        self.loc = np.asarray(self.loc, dtype=np.float64).ravel()
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.dof <= 0 or not np.isfinite(self.dof):
            raise InvalidParameterError(
                f"Student-t dof must be > 0, got {self.dof}")
        d = self.loc.size
        if self.scale.shape != (d, d):
            raise InvalidParameterError(f"scale must be {d}x{d}")
        _chol_with_jitter(self.scale, "Student-t scale")


@dataclass
class GaussianClassParams:
    mu: np.ndarray
    sigma: np.ndarray


def niw_update(prior: NIWParams, X: np.ndarray) -> NIWParams:
    """Conjugate posterior after observing the rows of X (may be empty)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.size == 0:
        return NIWParams(eta=prior.eta.copy(), lam=prior.lam, nu=prior.nu,
                         psi=prior.psi.copy())
    if X.shape[1] != prior.d:
        raise InvalidParameterError(
            f"data dim {X.shape[1]} != prior dim {prior.d}")
    N = X.shape[0]
    xbar = X.mean(axis=0)
    centered = X - xbar
    S = centered.T @ centered
    m = xbar - prior.eta
    lam_k = prior.lam + N
    eta_k = (prior.lam * prior.eta + N * xbar) / lam_k
    psi_k = prior.psi + S + (prior.lam * N / lam_k) * np.outer(m, m)
    return NIWParams(eta=eta_k, lam=lam_k, nu=prior.nu + N, psi=psi_k)


def posterior_predictive(p: NIWParams) -> StudentTParams:
    """Marginal predictive of the NIW posterior: a multivariate Student-t."""
    dof = p.nu - p.d + 1
    if dof <= 0:
        raise InvalidParameterError(
            f"predictive dof nu - d + 1 = {dof} must be positive")
    scale = (p.lam + 1.0) / (p.lam * dof) * p.psi
    return StudentTParams(loc=p.eta, scale=scale, dof=dof)


def t_logpdf(x: np.ndarray, tp: StudentTParams) -> float:
    """Log density of the multivariate Student-t."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = tp.loc.size
    if x.size != d:
        raise InvalidParameterError(f"x has dim {x.size}, expected {d}")
    L = _chol_with_jitter(tp.scale, "Student-t scale")
    delta = x - tp.loc
    sol = solve_triangular(L, delta, lower=True)
    q = float(sol @ sol)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    dof = tp.dof
    return float(gammaln((dof + d) / 2) - gammaln(dof / 2)
                 - d / 2 * np.log(dof * np.pi) - 0.5 * logdet
                 - (dof + d) / 2 * np.log1p(q / dof))


def class_posterior(x: np.ndarray, tparams: list[StudentTParams]) -> np.ndarray:
    """P(y=k|x) as the normalized ratio of Student-t densities (no class
    prior weighting)."""
    if not tparams:
        raise MissingClassError("no class predictive distributions")
    logs = np.array([t_logpdf(x, tp) for tp in tparams])
    mx = logs.max()
    if not np.isfinite(mx):
        raise NumericalFailureError(
            "all class densities underflowed; cannot normalize")
    w = np.exp(logs - mx)
    return w / w.sum()


def log_likelihood(prior: NIWParams, support_by_class: dict,
                   query_by_class: dict) -> float:
    """Eq.-46-style objective: per class, condition the prior on the
    support rows and sum predictive log densities over the query rows."""
    total = 0.0
    for c, Q in query_by_class.items():
        S = support_by_class.get(c)
        if S is None:
            raise MissingClassError(f"class {c} has queries but no support")
        tp = posterior_predictive(niw_update(prior, np.asarray(S)))
        for x in np.asarray(Q, dtype=np.float64).reshape(-1, prior.d):
            total += t_logpdf(x, tp)
    return float(total)


# ---------------------------------------------------------------------------
# maximum-likelihood QDA (the non-Bayesian route)

def qda_fit_mle(features_by_class: dict) -> tuple[dict, dict]:
    """Per-class Gaussian MLE (biased covariance) plus empirical priors.

    Raises SingularCovarianceError when any class has N < 2 or a
    covariance whose smallest eigenvalue is below 1e-10.
    """
    if not features_by_class:
        raise MissingClassError("no classes given")
    total = sum(np.asarray(v).shape[0] for v in features_by_class.values())
    params, priors = {}, {}
    for c, X in features_by_class.items():
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise InvalidParameterError(f"class {c}: features must be [N, d]")
        N = X.shape[0]
        if N < 2:
            raise SingularCovarianceError(
                f"class {c}: N = {N} < 2, covariance not estimable")
        mu = X.mean(axis=0)
        centered = X - mu
        sigma = centered.T @ centered / N
        sigma = (sigma + sigma.T) / 2
        min_eig = float(np.linalg.eigvalsh(sigma)[0])
        if min_eig < _EIG_TOL:
            raise SingularCovarianceError(
                f"class {c}: covariance min eigenvalue {min_eig:.3e} < {_EIG_TOL}")
        params[c] = GaussianClassParams(mu=mu, sigma=sigma)
        priors[c] = N / total
    return params, priors


def qda_scores(x: np.ndarray, params: dict, priors: dict,
               include_log_det: bool = False) -> dict:
    """Discriminant scores -(1/2)(x-mu)^T Sigma^-1 (x-mu) + ln pi_k,
    optionally with the textbook -(1/2) ln|Sigma_k| term."""
    x = np.asarray(x, dtype=np.float64).ravel()
    out = {}
    for c, p in params.items():
        L = _chol_with_jitter(p.sigma, f"class {c} covariance")
        sol = solve_triangular(L, x - p.mu, lower=True)
        score = -0.5 * float(sol @ sol) + float(np.log(priors[c]))
        if include_log_det:
            score -= float(np.sum(np.log(np.diag(L))))
        out[c] = score
    return out


def qda_decide(x: np.ndarray, params: dict, priors: dict,
               include_log_det: bool = False):
    scores = qda_scores(x, params, priors, include_log_det)
    return max(scores, key=scores.get)


def lda_fit(features_by_class: dict) -> tuple[dict, dict]:
    """Pooled-covariance variant: every class shares one biased-MLE
    covariance (still requires the pooled estimate to be non-singular)."""
    if not features_by_class:
        raise MissingClassError("no classes given")
    total = sum(np.asarray(v).shape[0] for v in features_by_class.values())
    mus, priors = {}, {}
    d = None
    pooled = None
    for c, X in features_by_class.items():
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 1:
            raise InsufficientBatchError(f"class {c} is empty")
        mu = X.mean(axis=0)
        centered = X - mu
        if pooled is None:
            d = X.shape[1]
            pooled = np.zeros((d, d))
        pooled += centered.T @ centered
        mus[c] = mu
        priors[c] = X.shape[0] / total
    pooled /= total
    pooled = (pooled + pooled.T) / 2
    if float(np.linalg.eigvalsh(pooled)[0]) < _EIG_TOL:
        raise SingularCovarianceError("pooled covariance is singular")
    params = {c: GaussianClassParams(mu=mu, sigma=pooled) for c, mu in mus.items()}
    return params, priors


# ---------------------------------------------------------------------------
# episodic prediction with the shared prior

def fit_episode(prior: NIWParams, support_X: np.ndarray,
                support_y: np.ndarray) -> tuple[list, list[StudentTParams]]:
    """Condition the prior on each support class; returns (classes,
    per-class Student-t predictives) with classes sorted."""
    support_X = np.asarray(support_X, dtype=np.float64)
    support_y = np.asarray(support_y)
    classes = sorted(set(int(c) for c in support_y))
    if not classes:
        raise MissingClassError("empty support set")
    tps = []
    for c in classes:
        Xc = support_X[support_y == c]
        tps.append(posterior_predictive(niw_update(prior, Xc)))
    return classes, tps


def predict_bayes(prior: NIWParams, support_X, support_y, query_X
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Episode prediction: returns (labels, class-posterior matrix)."""
    classes, tps = fit_episode(prior, support_X, support_y)
    query_X = np.asarray(query_X, dtype=np.float64)
    probs = np.stack([class_posterior(x, tps) for x in query_X])
    labels = np.asarray(classes)[probs.argmax(axis=1)]
    return labels, probs


def sample_predictive_ensemble(prior: NIWParams, support_X, support_y,
                               query_X, S: int, rng: np.random.Generator
                               ) -> np.ndarray:
    """S posterior draws -> member class-probability vectors per query.

    For each draw, (mu_k, Sigma_k) come from each class's NIW posterior
    (inverse-Wishart via the Bartlett construction, then mu | Sigma).
    Returns [S, n_query, K].
    """
    support_X = np.asarray(support_X, dtype=np.float64)
    support_y = np.asarray(support_y)
    query_X = np.asarray(query_X, dtype=np.float64)
    classes = sorted(set(int(c) for c in support_y))
    posts = [niw_update(prior, support_X[support_y == c]) for c in classes]
    d = prior.d
    out = np.zeros((S, query_X.shape[0], len(classes)))
    for s in range(S):
        log_dens = np.zeros((query_X.shape[0], len(classes)))
        for j, post in enumerate(posts):
            Lpsi = _chol_with_jitter(post.psi, "psi")
            # Bartlett: A lower-tri, A_ii^2 ~ chi2(nu - i), off-diag ~ N(0,1)
            A = np.zeros((d, d))
            for i in range(d):
                A[i, i] = np.sqrt(rng.chisquare(post.nu - i))
                A[i, :i] = rng.standard_normal(i)
            # Sigma = L A^-T A^-1 L^T  ~  InvWishart(nu, Psi)
            Ainv = solve_triangular(A, np.eye(d), lower=True)
            M = Lpsi @ Ainv.T
            sigma = M @ M.T
            Ls = _chol_with_jitter(sigma, "sampled covariance")
            mu = post.eta + (Ls @ rng.standard_normal(d)) / np.sqrt(post.lam)
            delta = query_X - mu
            sol = solve_triangular(Ls, delta.T, lower=True)
            q = np.sum(sol**2, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(Ls)))
            log_dens[:, j] = -0.5 * (d * np.log(2 * np.pi) + logdet + q)
        mx = log_dens.max(axis=1, keepdims=True)
        w = np.exp(log_dens - mx)
        out[s] = w / w.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# meta-learning the prior (gradient descent on Eq.-46 query likelihood)

def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    if y <= 0:
        raise InvalidParameterError("softplus inverse needs y > 0")
    return float(y + np.log1p(-np.exp(-y)))


def pack_prior(p: NIWParams) -> np.ndarray:
    """NIW -> unconstrained vector [eta, a, b, packed lower Cholesky]
    with lambda = softplus(a), nu = (d-1) + softplus(b), Psi = L L^T and
    softplus on diag(L)."""
    d = p.d
    L = _chol_with_jitter(p.psi, "psi")
    rows, cols = np.tril_indices(d)
    packed = L[rows, cols].copy()
    diag_pos = np.flatnonzero(rows == cols)
    for i, pos in enumerate(diag_pos):
        packed[pos] = _inv_softplus(L[i, i])
    return np.concatenate([p.eta, [_inv_softplus(p.lam)],
                           [_inv_softplus(p.nu - (d - 1))], packed])


def unpack_prior(theta: np.ndarray, d: int) -> NIWParams:
    eta, a, b, L, _ = _unpack_parts(theta, d)
    return NIWParams(eta=eta, lam=float(_softplus(a)),
                     nu=float(d - 1 + _softplus(b)), psi=L @ L.T)


def _unpack_parts(theta: np.ndarray, d: int):
    theta = np.asarray(theta, dtype=np.float64)
    n_tri = d * (d + 1) // 2
    if theta.size != d + 2 + n_tri:
        raise InvalidParameterError(
            f"theta has {theta.size} entries, expected {d + 2 + n_tri}")
    eta = theta[:d]
    a, b = theta[d], theta[d + 1]
    packed = theta[d + 2:]
    rows, cols = np.tril_indices(d)
    L = np.zeros((d, d))
    L[rows, cols] = packed
    diag_raw = np.diag(L).copy()
    np.fill_diagonal(L, _softplus(diag_raw))
    return eta, a, b, L, diag_raw


def eq46_nll_and_grad(theta: np.ndarray, tasks: list, d: int
                      ) -> tuple[float, np.ndarray]:
    """Mean negative predictive log-likelihood over all query points of
    all tasks, with its exact gradient in the unconstrained
    parameterization.

    Each task is (support_by_class, query_by_class) with [N, d] arrays.
    """
    eta, a, b, L, diag_raw = _unpack_parts(theta, d)
    lam = float(_softplus(a))
    nu = float(d - 1 + _softplus(b))
    psi = L @ L.T

    g_eta = np.zeros(d)
    g_lam = 0.0
    g_nu = 0.0
    G_psi = np.zeros((d, d))
    total = 0.0
    n_query = 0

    for support_by_class, query_by_class in tasks:
        for c, Q in query_by_class.items():
            S_data = np.asarray(support_by_class[c], dtype=np.float64).reshape(-1, d)
            Q = np.asarray(Q, dtype=np.float64).reshape(-1, d)
            if S_data.shape[0] == 0 or Q.shape[0] == 0:
                continue
            N = S_data.shape[0]
            xbar = S_data.mean(axis=0)
            centered = S_data - xbar
            scatter = centered.T @ centered
            m = xbar - eta
            lam_k = lam + N
            w = lam * N / lam_k
            eta_k = (lam * eta + N * xbar) / lam_k
            psi_k = psi + scatter + w * np.outer(m, m)
            dof = nu + N - d + 1
            if dof <= 0:
                raise InvalidParameterError("predictive dof became non-positive")
            cc = (lam_k + 1.0) / (lam_k * dof)

            Lk = _chol_with_jitter(psi_k, "posterior psi")
            logdet = 2.0 * float(np.sum(np.log(np.diag(Lk))))
            A = cho_solve((Lk, True), np.eye(d))

            delta = Q - eta_k                     # [nq, d]
            AD = delta @ A                        # [nq, d]
            qt = np.einsum("nd,nd->n", delta, AD)  # quadratic in Psi_k
            qq = qt / cc
            nq = Q.shape[0]
            n_query += nq

            lnT = (gammaln((dof + d) / 2) - gammaln(dof / 2)
                   - d / 2 * np.log(dof * np.pi)
                   - 0.5 * (d * np.log(cc) + logdet)
                   - (dof + d) / 2 * np.log1p(qq / dof))
            total += float(lnT.sum())

            Gq = -(dof + d) / (2.0 * (dof + qq))          # d lnT / d q
            # class-level accumulators
            G_eta_k = -(2.0 / cc) * (Gq[:, None] * AD).sum(axis=0)
            G_psi_k = -nq / 2.0 * A - (1.0 / cc) * (AD.T @ (Gq[:, None] * AD))
            G_c = float(np.sum(-d / (2.0 * cc) - Gq * qq / cc))
            G_dof = float(np.sum(
                0.5 * digamma((dof + d) / 2) - 0.5 * digamma(dof / 2)
                - d / (2.0 * dof) - 0.5 * np.log1p(qq / dof)
                + (dof + d) * qq / (2.0 * dof * (dof + qq))))

            dc_dlamk = -1.0 / (lam_k**2 * dof)
            dc_ddof = -(lam_k + 1.0) / (lam_k * dof**2)

            g_nu += G_dof + G_c * dc_ddof
            g_lam += G_c * dc_dlamk
            g_lam += float(G_eta_k @ (-N * m / lam_k**2))
            g_lam += float(m @ G_psi_k @ m) * (N**2 / lam_k**2)
            g_eta += (lam / lam_k) * G_eta_k - 2.0 * w * (G_psi_k @ m)
            G_psi += G_psi_k

    if n_query == 0:
        raise InsufficientBatchError("no query points in any task")

    scale = -1.0 / n_query
    nll = scale * total
    g_eta *= scale
    g_lam *= scale
    g_nu *= scale
    G_psi *= scale

    # chain to the unconstrained parameterization
    from scipy.special import expit
    g_a = g_lam * float(expit(a))
    g_b = g_nu * float(expit(b))
    G_L = 2.0 * G_psi @ L
    rows, cols = np.tril_indices(d)
    packed = G_L[rows, cols]
    diag_pos = np.flatnonzero(rows == cols)
    packed[diag_pos] *= expit(diag_raw)
    return float(nll), np.concatenate([g_eta, [g_a], [g_b], packed])


def meta_fit_prior(task_sampler, d: int, iters: int = 500, lr: float = 1e-2,
                   init: NIWParams | None = None, seed: int = 0,
                   max_grad_norm: float = 10.0, log_fn=None) -> NIWParams:
    """Gradient descent on the mean query negative log-likelihood.

    ``task_sampler(rng)`` must return one (support_by_class,
    query_by_class) task.  Per-task gradients are clipped to
    ``max_grad_norm`` (0 disables); the objective's curvature varies over
    orders of magnitude as the scale matrix adapts, and unclipped steps
    can ratchet it away from the optimum.  Divergence raises
    TrainingFailureError carrying the last finite prior.
    """
    prior = init if init is not None else default_prior(d)
    theta = pack_prior(prior)
    rng = rng_for(seed, "meta-prior")
    last_good = theta.copy()
    for it in range(iters):
        task = task_sampler(rng)
        nll, grad = eq46_nll_and_grad(theta, [task], d)
        if not np.isfinite(nll) or not np.all(np.isfinite(grad)):
            raise TrainingFailureError(
                f"non-finite objective at iteration {it}",
                last_good=unpack_prior(last_good, d))
        last_good = theta.copy()
        if max_grad_norm > 0:
            g_norm = float(np.linalg.norm(grad))
            if g_norm > max_grad_norm:
                grad = grad * (max_grad_norm / g_norm)
        theta = theta - lr * grad
        if log_fn is not None:
            log_fn({"iteration": it, "nll": float(nll)})
    try:
        return unpack_prior(theta, d)
    except (InvalidParameterError, SingularCovarianceError) as exc:
        raise TrainingFailureError(
            f"final parameters invalid: {exc}",
            last_good=unpack_prior(last_good, d)) from exc
