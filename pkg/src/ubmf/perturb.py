"""Weak and strong signal perturbations, plus autoencoder-latent injection.

Weak operators nudge a record without disturbing its fault signature
(noise, global scale, same-class splice); strong operators distort
aggressively while keeping the label meaningful (warps, slice shuffles,
masking, channel rotation).  All operators are pure given (input, params,
seed) and preserve shape and metadata.

Array-level cores (`*_arr`) act on [channels, T] float64 and are what the
training loops call; the Signal-level wrappers form the public surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (InvalidPairingError, InvalidParameterError,
                     ModelNotReadyError)
from .rng import rng_for
from .signal import Signal

WEAK_KINDS = {"jitter", "uniform_scale", "splice"}
STRONG_KINDS = {"magnitude_warp", "time_warp", "rotate", "slice_shuffle",
                "random_mask", "latent_interp"}
LATENT_WEAK_SIGMA = 0.1       # latent_jitter at or below this sigma counts as weak
CURVE_FLOOR = 0.05            # multiplicative warp curves are clamped here
DEFAULT_RECON_BOUND = 0.25    # autoencoder readiness: max mean-squared recon error


# ---------------------------------------------------------------------------
# array-level cores

def jitter_arr(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if not np.isfinite(sigma) or sigma < 0:
        raise InvalidParameterError(f"jitter sigma must be finite and >= 0, got {sigma}")
    return x + sigma * rng.standard_normal(x.shape)


def uniform_scale_arr(x: np.ndarray, mu: float, sigma: float,
                      rng: np.random.Generator) -> np.ndarray:
    if sigma < 0 or not np.isfinite(sigma) or not np.isfinite(mu):
        raise InvalidParameterError("uniform_scale needs finite mu and sigma >= 0")
    alpha = rng.normal(mu, sigma)
    tries = 0
    while alpha <= 0:
        tries += 1
        if tries > 100:
            raise InvalidParameterError(
                "uniform_scale could not draw a positive factor in 100 tries")
        alpha = rng.normal(mu, sigma)
    return x * alpha


def splice_score(a: np.ndarray, b: np.ndarray, window: int) -> tuple[float, int]:
    """Best normalized cross-correlation between window-length segments of
    a and b over all cut points; returns (D, best_cut)."""
    T = a.shape[1]
    if window > T or window < 2:
        raise InvalidParameterError(f"splice window {window} invalid for length {T}")
    best_d, best_i = -np.inf, window
    for i in range(window, T + 1):
        sa = a[:, i - window:i].ravel()
        sb = b[:, i - window:i].ravel()
        sa = sa - sa.mean()
        sb = sb - sb.mean()
        denom = max(np.linalg.norm(sa) * np.linalg.norm(sb), 1e-12)
        d = float(sa @ sb) / denom
        if d > best_d:
            best_d, best_i = d, i
    return best_d, best_i


def splice_arr(a: np.ndarray, b: np.ndarray, window: int, tau: float
               ) -> np.ndarray | None:
    d, cut = splice_score(a, b, window)
    if d < tau:
        return None
    out = np.concatenate([a[:, :cut], b[:, cut:]], axis=1)
    return out


def _spline_curve(T: int, n_knots: int, sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Natural cubic spline through n_knots equally spaced values ~N(1, sigma^2)."""
    if n_knots < 2:
        raise InvalidParameterError(f"need n_knots >= 2, got {n_knots}")
    pos = np.linspace(0.0, T - 1.0, n_knots)
    vals = rng.normal(1.0, sigma, n_knots)
    if sigma == 0:
        return np.ones(T)
    spline = CubicSpline(pos, vals, bc_type="natural")
    return spline(np.arange(T))


def magnitude_warp_arr(x: np.ndarray, n_knots: int, sigma: float,
                       rng: np.random.Generator) -> np.ndarray:
    curve = np.maximum(_spline_curve(x.shape[1], n_knots, sigma, rng), CURVE_FLOOR)
    return x * curve[None, :]


def time_warp_map(T: int, n_knots: int, sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Monotone warp tau: [0, T-1] -> [0, T-1] with pinned endpoints."""
    rate = np.maximum(_spline_curve(T, n_knots, sigma, rng), CURVE_FLOOR)
    cum = np.cumsum(rate)
    cum = cum - cum[0]
    if cum[-1] <= 0:
        raise InvalidParameterError("degenerate time-warp rate curve")
    return cum / cum[-1] * (T - 1.0)


def time_warp_arr(x: np.ndarray, n_knots: int, sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    T = x.shape[1]
    tau = time_warp_map(T, n_knots, sigma, rng)
    grid = np.arange(T)
    return np.stack([np.interp(tau, grid, ch) for ch in x])


def rotate_arr(x: np.ndarray, R: np.ndarray) -> np.ndarray:
    d = x.shape[0]
    if d < 2:
        raise InvalidParameterError("rotation unsupported for single-channel signals")
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (d, d):
        raise InvalidParameterError(f"rotation matrix must be {d}x{d}, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(d))) > 1e-8:
        raise InvalidParameterError("rotation matrix is not orthogonal within 1e-8")
    return R @ x


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random orthogonal matrix via QR with sign fix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))[None, :]


def slice_shuffle_arr(x: np.ndarray, n_segments: int,
                      rng: np.random.Generator) -> np.ndarray:
    T = x.shape[1]
    if n_segments < 1 or n_segments > T:
        raise InvalidParameterError(
            f"n_segments must be in [1, {T}], got {n_segments}")
    seg = T // n_segments
    bounds = [(i * seg, (i + 1) * seg if i < n_segments - 1 else T)
              for i in range(n_segments)]
    order = rng.permutation(n_segments)
    return np.concatenate([x[:, bounds[i][0]:bounds[i][1]] for i in order], axis=1)


def random_mask_arr(x: np.ndarray, ratio: float, fill: str,
                    rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise InvalidParameterError(f"mask ratio must be in [0,1], got {ratio}")
    if fill not in ("gaussian", "linear_interp", "zero"):
        raise InvalidParameterError(f"unknown fill mode {fill!r}")
    T = x.shape[1]
    L = int(np.floor(ratio * T))
    if L == 0:
        return x.copy()
    start = int(rng.integers(0, T - L + 1))
    end = start + L
    out = x.copy()
    if fill == "zero":
        out[:, start:end] = 0.0
    elif fill == "gaussian":
        scale = x.std(axis=1, keepdims=True)
        out[:, start:end] = scale * rng.standard_normal((x.shape[0], L))
    else:  # linear_interp between the block's boundary values
        for c in range(x.shape[0]):
            left = x[c, start - 1] if start > 0 else x[c, end - 1] if end < T else 0.0
            right = x[c, end] if end < T else left
            if start == 0 and end < T:
                left = right
            out[c, start:end] = np.linspace(left, right, L + 2)[1:-1]
    return out


# ---------------------------------------------------------------------------
# Signal-level public operators

def _rewrap(s: Signal, values: np.ndarray) -> Signal:
    return Signal(values=values, sample_rate=s.sample_rate, label=s.label,
                  condition=s.condition, source_id=s.source_id)


def jitter(s: Signal, sigma: float, rng: np.random.Generator) -> Signal:
    return _rewrap(s, jitter_arr(s.values, sigma, rng))


def uniform_scale(s: Signal, mu: float, sigma: float,
                  rng: np.random.Generator) -> Signal:
    return _rewrap(s, uniform_scale_arr(s.values, mu, sigma, rng))


def _check_pairing(a: Signal, b: Signal) -> None:
    if a.values.shape != b.values.shape:
        raise InvalidPairingError(
            f"shape mismatch {a.values.shape} vs {b.values.shape}")
    if a.label != b.label:
        raise InvalidPairingError(f"label mismatch {a.label} vs {b.label}")


def splice_resample(a: Signal, b: Signal, window: int, tau: float,
                    rng: np.random.Generator | None = None) -> Signal | None:
    _check_pairing(a, b)
    out = splice_arr(a.values, b.values, window, tau)
    return None if out is None else _rewrap(a, out)


def magnitude_warp(s: Signal, n_knots: int, sigma: float,
                   rng: np.random.Generator) -> Signal:
    return _rewrap(s, magnitude_warp_arr(s.values, n_knots, sigma, rng))


def time_warp(s: Signal, n_knots: int, sigma: float,
              rng: np.random.Generator) -> Signal:
    return _rewrap(s, time_warp_arr(s.values, n_knots, sigma, rng))


def rotate(s: Signal, R: np.ndarray) -> Signal:
    return _rewrap(s, rotate_arr(s.values, R))


def slice_shuffle(s: Signal, n_segments: int, rng: np.random.Generator) -> Signal:
    return _rewrap(s, slice_shuffle_arr(s.values, n_segments, rng))


def random_mask(s: Signal, ratio: float, fill: str,
                rng: np.random.Generator) -> Signal:
    return _rewrap(s, random_mask_arr(s.values, ratio, fill, rng))


def _check_autoencoder(enc, dec, values: np.ndarray, recon_bound: float) -> np.ndarray:
    z = enc.forward(values[None], train=False)
    recon = dec.forward(z, train=False)[0]
    mse = float(np.mean((recon - values) ** 2))
    if mse > recon_bound:
        raise ModelNotReadyError(
            f"autoencoder reconstruction error {mse:.4f} exceeds bound {recon_bound}")
    return z[0]


def latent_jitter(enc, dec, s: Signal, sigma: float,
                  rng: np.random.Generator,
                  recon_bound: float = DEFAULT_RECON_BOUND) -> Signal:
    if not np.isfinite(sigma) or sigma < 0:
        raise InvalidParameterError(f"latent sigma must be finite and >= 0, got {sigma}")
    z = _check_autoencoder(enc, dec, s.values, recon_bound)
    z_new = z + sigma * rng.standard_normal(z.shape)
    out = dec.forward(z_new[None], train=False)[0]
    return _rewrap(s, out)


def latent_interpolate(enc, dec, a: Signal, b: Signal, lam: float,
                       recon_bound: float = DEFAULT_RECON_BOUND) -> Signal:
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameterError(f"lambda must be in [0,1], got {lam}")
    _check_pairing(a, b)
    za = _check_autoencoder(enc, dec, a.values, recon_bound)
    zb = _check_autoencoder(enc, dec, b.values, recon_bound)
    out = dec.forward((lam * za + (1 - lam) * zb)[None], train=False)[0]
    return _rewrap(a, out)


# ---------------------------------------------------------------------------
# perturbation specs

@dataclass
class PerturbSpec:
    """Serializable description of one perturbation draw."""

    kind: str
    strength: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        expected = expected_strength(self.kind, self.params)
        if self.strength != expected:
            raise InvalidParameterError(
                f"kind {self.kind!r} with these params must carry "
                f"strength={expected!r}, got {self.strength!r}")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "strength": self.strength,
                           "params": self.params, "seed": self.seed},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PerturbSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"bad perturb spec JSON: {exc}") from exc
        return cls(kind=d["kind"], strength=d["strength"],
                   params=d.get("params", {}), seed=d.get("seed", 0))


def expected_strength(kind: str, params: dict) -> str:
    if kind in WEAK_KINDS:
        return "weak"
    if kind == "latent_jitter":
        return "weak" if params.get("sigma", 0.0) <= LATENT_WEAK_SIGMA else "strong"
    if kind in STRONG_KINDS:
        return "strong"
    raise InvalidParameterError(f"unknown perturbation kind {kind!r}")


def apply_spec(spec: PerturbSpec, s: Signal, partner: Signal | None = None,
               enc=None, dec=None) -> Signal | None:
    """Dispatch one spec.  splice/latent_interp need a partner; latent ops
    need the autoencoder pair."""
    rng = rng_for(spec.seed, "perturb", spec.kind)
    p = spec.params
    if spec.kind == "jitter":
        return jitter(s, p.get("sigma", 0.03), rng)
    if spec.kind == "uniform_scale":
        return uniform_scale(s, p.get("mu", 1.0), p.get("sigma", 0.1), rng)
    if spec.kind == "splice":
        if partner is None:
            raise InvalidParameterError("splice needs a partner signal")
        return splice_resample(s, partner, p.get("window", 64), p.get("tau", 0.8), rng)
    if spec.kind == "magnitude_warp":
        return magnitude_warp(s, p.get("n_knots", 4), p.get("sigma", 0.2), rng)
    if spec.kind == "time_warp":
        return time_warp(s, p.get("n_knots", 4), p.get("sigma", 0.2), rng)
    if spec.kind == "rotate":
        R = np.asarray(p["R"]) if "R" in p else random_rotation(s.channels, rng)
        return rotate(s, R)
    if spec.kind == "slice_shuffle":
        return slice_shuffle(s, p.get("n_segments", 4), rng)
    if spec.kind == "random_mask":
        return random_mask(s, p.get("ratio", 0.15), p.get("fill", "zero"), rng)
    if spec.kind == "latent_jitter":
        if enc is None or dec is None:
            raise ModelNotReadyError("latent_jitter needs an autoencoder pair")
        return latent_jitter(enc, dec, s, p.get("sigma", 0.05), rng,
                             p.get("recon_bound", DEFAULT_RECON_BOUND))
    if spec.kind == "latent_interp":
        if enc is None or dec is None:
            raise ModelNotReadyError("latent_interp needs an autoencoder pair")
        if partner is None:
            raise InvalidParameterError("latent_interp needs a partner signal")
        return latent_interpolate(enc, dec, s, partner, p.get("lambda", 0.5),
                                  p.get("recon_bound", DEFAULT_RECON_BOUND))
    raise InvalidParameterError(f"unknown perturbation kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# default view samplers for the self-supervised loop

def weak_view_arr(x: np.ndarray, rng: np.random.Generator,
                  partner: np.ndarray | None = None) -> np.ndarray:
    """One draw from the default weak set on a [C, T] array."""
    ops = ["jitter", "uniform_scale"] + (["splice"] if partner is not None else [])
    kind = ops[rng.integers(0, len(ops))]
    if kind == "jitter":
        return jitter_arr(x, 0.03 * float(x.std()), rng)
    if kind == "uniform_scale":
        return uniform_scale_arr(x, 1.0, 0.1, rng)
    out = splice_arr(x, partner, min(64, x.shape[1]), 0.8)
    if out is None:  # gate rejected the pair; fall back to noise
        return jitter_arr(x, 0.03 * float(x.std()), rng)
    return out


def strong_view_arr(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from the default strong set on a [C, T] array."""
    ops = ["magnitude_warp", "time_warp", "slice_shuffle", "random_mask"]
    if x.shape[0] >= 2:
        ops.append("rotate")
    kind = ops[rng.integers(0, len(ops))]
    if kind == "magnitude_warp":
        return magnitude_warp_arr(x, 4, 0.2, rng)
    if kind == "time_warp":
        return time_warp_arr(x, 4, 0.2, rng)
    if kind == "slice_shuffle":
        return slice_shuffle_arr(x, 4, rng)
    if kind == "random_mask":
        return random_mask_arr(x, 0.15, "zero", rng)
    return rotate_arr(x, random_rotation(x.shape[0], rng))
