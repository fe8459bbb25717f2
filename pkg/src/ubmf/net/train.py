"""Plain gradient-descent update and the finite-difference gradient harness."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidParameterError
from .core import Network


def sgd_update(params: list[np.ndarray], grads: list[np.ndarray],
               lr: float) -> list[np.ndarray]:
    """One gradient-descent step: returns new arrays, inputs untouched."""
    if lr <= 0 or not np.isfinite(lr):
        raise InvalidParameterError(f"learning rate must be positive and finite, got {lr}")
    if len(params) != len(grads):
        raise InvalidParameterError("params and grads differ in length")
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidParameterError(f"shape mismatch {p.shape} vs {g.shape}")
        out.append(p - lr * np.asarray(g, dtype=np.float64))
    return out


def apply_sgd(net: Network, lr: float) -> None:
    """In-place convenience wrapper used by the training drivers."""
    new = sgd_update(net.param_arrays(), net.grad_arrays(), lr)
    flat = np.concatenate([a.ravel() for a in new]) if new else np.zeros(0)
    net.set_flat(flat)
    net.step += 1


def grad_check(fn, theta: np.ndarray, analytic: np.ndarray,
               n_sample: int = 200, h: float = 1e-5,
               rng: np.random.Generator | None = None,
               floor: float = 1e-3) -> float:
    """Compare ``analytic`` to central finite differences of scalar ``fn``.

    Checks a random subset of ``n_sample`` coordinates (all of them when
    theta is small) and returns the maximum relative error
    |a - f| / max(|a|, |f|, floor).  ``fn`` must be a pure function of
    theta.
    """
    theta = np.asarray(theta, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if theta.shape != analytic.shape:
        raise InvalidParameterError("theta and analytic gradient shapes differ")
    n = theta.size
    if n_sample >= n:
        idx = np.arange(n)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(n, size=n_sample, replace=False)
    worst = 0.0
    for i in idx:
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        fd = (fn(tp) - fn(tm)) / (2.0 * h)
        a = analytic[i]
        err = abs(a - fd) / max(abs(a), abs(fd), floor)
        worst = max(worst, err)
    return worst
