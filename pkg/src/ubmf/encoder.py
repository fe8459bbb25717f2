"""Feature encoder f, mirrored decoder, and the learnable scale metric E.

The scale metric maps a feature vector (viewed as a 1-channel sequence)
to a scalar in (0,1); the modified distance divides each unit-normalized
feature by that scalar before taking the Euclidean distance:

    d(x_i, x_j) = || x_i/(||x_i|| E(x_i)) - x_j/(||x_j|| E(x_j)) ||

Both the forward maps and their analytic backward passes live here; the
backward passes are what the loss modules chain into.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidInputError, NumericalFailureError
from .net import Network
from .rng import rng_for
from .signal import Signal

DEFAULT_DIM = 16
_NORM_FLOOR = 1e-12
_DIST_FLOOR = 1e-12
_SCALE_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# builders

def encoder_specs(d: int = DEFAULT_DIM, channels: int = 1) -> list[dict]:
    return [
        {"type": "conv1d", "in_channels": channels, "out_channels": 8,
         "kernel": 7, "stride": 2, "pad": 0},
        {"type": "relu"},
        {"type": "conv1d", "in_channels": 8, "out_channels": 16,
         "kernel": 5, "stride": 2, "pad": 0},
        {"type": "relu"},
        {"type": "gap"},
        {"type": "dense", "in_features": 16, "out_features": d},
    ]


def build_encoder(d: int = DEFAULT_DIM, channels: int = 1, seed: int = 0) -> Network:
    return Network.from_specs(encoder_specs(d, channels),
                              rng=rng_for(seed, "encoder-init"), seed=seed)


def decoder_specs(d: int, channels: int, length: int) -> list[dict]:
    return [
        {"type": "dense", "in_features": d, "out_features": 64},
        {"type": "relu"},
        {"type": "dense", "in_features": 64, "out_features": channels * length},
        {"type": "reshape", "channels": channels, "length": length},
    ]


def build_decoder(d: int, channels: int, length: int, seed: int = 0) -> Network:
    return Network.from_specs(decoder_specs(d, channels, length),
                              rng=rng_for(seed, "decoder-init"), seed=seed)


def metric_specs(d: int = DEFAULT_DIM) -> list[dict]:
    pooled = (d - 2) // 2 + 1
    return [
        {"type": "conv1d", "in_channels": 1, "out_channels": 32,
         "kernel": 3, "stride": 1, "pad": 1},
        {"type": "batchnorm", "num_features": 32},
        {"type": "maxpool1d", "kernel": 2, "stride": 2},
        {"type": "leaky_relu", "slope": 0.2},
        {"type": "flatten"},
        {"type": "dense", "in_features": 32 * pooled, "out_features": 128},
        {"type": "batchnorm", "num_features": 128},
        {"type": "relu"},
        {"type": "dense", "in_features": 128, "out_features": 1},
        {"type": "sigmoid"},
    ]


def build_metric_encoder(d: int = DEFAULT_DIM, seed: int = 0) -> Network:
    return Network.from_specs(metric_specs(d),
                              rng=rng_for(seed, "metric-init"), seed=seed)


# ---------------------------------------------------------------------------
# forward wrappers

def encode(enc: Network, x, train: bool = False) -> np.ndarray:
    """Signals to features.  Accepts a Signal, a [C, T] array, or a
    [B, C, T] batch; returns [d] or [B, d] to match."""
    if isinstance(x, Signal):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise InvalidInputError(f"encode expects [B, C, T], got shape {x.shape}")
    z = enc.forward(x, train=train)
    if not np.all(np.isfinite(z)):
        raise NumericalFailureError("encoder produced non-finite features")
    return z[0] if single else z


def decode(dec: Network, z: np.ndarray, train: bool = False) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    out = dec.forward(z, train=train)
    return out[0] if single else out


def metric_scale(metric: Network, feats: np.ndarray, train: bool = False) -> np.ndarray:
    """E applied to feature vectors; [n, d] -> [n] strictly in (0, 1)."""
    feats = np.asarray(feats, dtype=np.float64)
    single = feats.ndim == 1
    if single:
        feats = feats[None]
    e = metric.forward(feats[:, None, :], train=train)[:, 0]
    return e[0] if single else e


# ---------------------------------------------------------------------------
# scaled unit normalization with backward

def scaled_unit(metric: Network | None, X: np.ndarray, train: bool = False):
    """u_i = x_i / (||x_i|| E(x_i)); returns (U, cache).

    metric=None freezes E at 1 (plain unit normalization).  Rows with
    zero norm raise DegenerateInputError.
    """
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateInputError("zero-norm feature vector in distance input")
    if metric is None:
        e = np.ones(X.shape[0])
        floored = np.zeros(X.shape[0], dtype=bool)
    else:
        e = metric.forward(X[:, None, :], train=train)[:, 0]
        # the sigmoid head underflows to exactly 0 when saturated; its true
        # gradient there is ~0, so flooring and cutting that path is safe
        floored = e < _SCALE_FLOOR
        e = np.maximum(e, _SCALE_FLOOR)
    s = 1.0 / (norms * e)
    U = X * s[:, None]
    cache = {"X": X, "norms": norms, "e": e, "s": s, "metric": metric,
             "floored": floored}
    return U, cache


def scaled_unit_backward(cache: dict, dU: np.ndarray) -> np.ndarray:
    """Chain dL/dU back to dL/dX, including the path through E's input;
    fills the metric network's grads as a side effect."""
    X, norms, e, s = cache["X"], cache["norms"], cache["e"], cache["s"]
    metric = cache["metric"]
    ax = np.einsum("nd,nd->n", dU, X)
    # direct path: u = x / (||x|| e) with e held fixed
    dX = dU * s[:, None] - (ax * s / norms**2)[:, None] * X
    # path through the scalar e: du/de = -x / (||x|| e^2)
    de = np.where(cache["floored"], 0.0, -ax / (norms * e**2))
    if metric is not None:
        dIn = metric.backward(de[:, None])  # [n, 1, d]
        dX = dX + dIn[:, 0, :]
    return dX


def pairwise_dist(U: np.ndarray, V: np.ndarray):
    """Euclidean distances between row sets; returns (D [n,m], cache)."""
    diff = U[:, None, :] - V[None, :, :]
    sq = np.einsum("nmd,nmd->nm", diff, diff)
    D = np.sqrt(np.maximum(sq, _DIST_FLOOR**2))
    return D, {"diff": diff, "D": D}


def pairwise_dist_backward(cache: dict, dD: np.ndarray):
    """dL/dD back to (dU, dV)."""
    diff, D = cache["diff"], cache["D"]
    g = (dD / D)[:, :, None] * diff
    return g.sum(axis=1), -g.sum(axis=0)


def modified_distances(metric: Network | None, X: np.ndarray, P: np.ndarray,
                       train: bool = False):
    """All pairwise modified distances between feature rows X [n,d] and
    reference rows P [m,d].  E is evaluated once on the stacked rows so
    batch-norm train mode sees a single batch.  Returns (D, cache)."""
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    stacked = np.concatenate([X, P], axis=0)
    U, ucache = scaled_unit(metric, stacked, train=train)
    n = X.shape[0]
    D, dcache = pairwise_dist(U[:n], U[n:])
    return D, {"ucache": ucache, "dcache": dcache, "n": n}


def modified_distances_backward(cache: dict, dD: np.ndarray):
    """Returns (dX, dP); metric grads are filled on the metric network."""
    n = cache["n"]
    dU_x, dU_p = pairwise_dist_backward(cache["dcache"], dD)
    dU = np.concatenate([dU_x, dU_p], axis=0)
    dS = scaled_unit_backward(cache["ucache"], dU)
    return dS[:n], dS[n:]


def modified_distance(metric: Network | None, x_i: np.ndarray, x_j: np.ndarray) -> float:
    """Single-pair form of the scaled distance (inference mode)."""
    D, _ = modified_distances(metric, np.asarray(x_i, dtype=np.float64)[None],
                              np.asarray(x_j, dtype=np.float64)[None], train=False)
    return float(D[0, 0])


def euclidean_distance(x_i: np.ndarray, x_j: np.ndarray) -> float:
    """Plain Euclidean distance between feature vectors."""
    return float(np.linalg.norm(np.asarray(x_i, dtype=np.float64)
                                - np.asarray(x_j, dtype=np.float64)))


# ---------------------------------------------------------------------------
# autoencoder training (used by the latent perturbations)

def train_autoencoder(enc: Network, dec: Network, X: np.ndarray, iters: int,
                      lr: float, log_fn=None) -> list[float]:
    """Full-batch gradient descent on mean-squared reconstruction error.
    Returns the loss curve."""
    from .net import apply_sgd
    X = np.asarray(X, dtype=np.float64)
    curve = []
    for it in range(iters):
        enc.zero_grads()
        dec.zero_grads()
        Z = enc.forward(X, train=True)
        R = dec.forward(Z, train=True)
        diff = R - X
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise NumericalFailureError(f"autoencoder loss non-finite at iter {it}")
        dR = 2.0 * diff / diff.size
        dZ = dec.backward(dR)
        enc.backward(dZ)
        apply_sgd(dec, lr)
        apply_sgd(enc, lr)
        curve.append(loss)
        if log_fn is not None:
            log_fn({"iteration": it, "recon_mse": loss})
    return curve
