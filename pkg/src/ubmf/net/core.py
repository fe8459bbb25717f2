"""Network container, parameter flattening, and checkpoint serialization.

Checkpoint layout: u32 little-endian header length, UTF-8 JSON header
(layer specs, array registry with shapes, RNG seed, training step), then
one flat float64 little-endian blob with every registered array in
declared order (trainable params first per layer, then running state).
"""

from __future__ import annotations

import copy as _copy
import json
import os

import numpy as np

from ..errors import FormatError, InvalidParameterError
from .layers import Layer, make_layer


class Network:
    """An ordered stack of layers with a single forward/backward chain."""

    def __init__(self, layers: list[Layer], seed: int = 0):
        self.layers = list(layers)
        self.seed = int(seed)
        self.step = 0

    @classmethod
    def from_specs(cls, specs: list[dict], rng: np.random.Generator | None = None,
                   seed: int = 0) -> "Network":
        net = cls([make_layer(s) for s in specs], seed=seed)
        if rng is not None:
            for layer in net.layers:
                layer.init_params(rng)
        return net

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def __call__(self, x, train=False):
        return self.forward(x, train=train)

    # -- parameter plumbing -------------------------------------------------

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def _registry(self):
        """Yield (layer_index, name, kind) for every array, in stable order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, "param"
            for name in sorted(layer.state):
                yield i, name, "state"

    def param_arrays(self) -> list[np.ndarray]:
        return [self.layers[i].params[n] for i, n, k in self._registry() if k == "param"]

    def grad_arrays(self) -> list[np.ndarray]:
        return [self.layers[i].grads[n] for i, n, k in self._registry() if k == "param"]

    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def get_flat(self) -> np.ndarray:
        arrays = self.param_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def get_flat_grads(self) -> np.ndarray:
        arrays = self.grad_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise InvalidParameterError(
                f"flat vector has {flat.size} entries, network has {self.n_params()}")
        pos = 0
        for i, name, kind in self._registry():
            if kind != "param":
                continue
            arr = self.layers[i].params[name]
            self.layers[i].params[name] = flat[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size

    def copy(self) -> "Network":
        dup = Network([make_layer(l.spec()) for l in self.layers], seed=self.seed)
        dup.step = self.step
        for mine, theirs in zip(dup.layers, self.layers):
            mine.params = {k: v.copy() for k, v in theirs.params.items()}
            mine.state = {k: v.copy() for k, v in theirs.state.items()}
            mine.zero_grads()
        return dup

    def specs(self) -> list[dict]:
        return [l.spec() for l in self.layers]


def save_network(path: str | os.PathLike, net: Network) -> None:
    registry = []
    blobs = []
    for i, name, kind in net._registry():
        arr = net.layers[i].params[name] if kind == "param" else net.layers[i].state[name]
        registry.append({"layer": i, "name": name, "kind": kind, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "layers": net.specs(),
        "arrays": registry,
        "seed": net.seed,
        "step": net.step,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        for b in blobs:
            fh.write(b)


def load_network(path: str | os.PathLike) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("checkpoint truncated before header length", offset=0)
    header_len = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    if len(raw) < 4 + header_len:
        raise FormatError("checkpoint truncated inside header", offset=4)
    try:
        header = json.loads(raw[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", offset=4) from exc
    for key in ("layers", "arrays", "seed", "step"):
        if key not in header:
            raise FormatError(f"checkpoint header missing {key!r}", offset=4)
    net = Network.from_specs(header["layers"], seed=header["seed"])
    net.step = int(header["step"])
    pos = 4 + header_len
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if len(raw) < pos + nbytes:
            raise FormatError(
                f"checkpoint truncated inside array {entry['name']!r}", offset=pos)
        arr = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        layer = net.layers[entry["layer"]]
        target = layer.params if entry["kind"] == "param" else layer.state
        if entry["name"] not in target or target[entry["name"]].shape != arr.shape:
            raise FormatError(
                f"checkpoint array {entry['name']!r} does not fit layer "
                f"{entry['layer']}", offset=pos)
        target[entry["name"]] = arr
        pos += nbytes
    if pos != len(raw):
        raise FormatError("trailing bytes after last checkpoint array", offset=pos)
    for layer in net.layers:
        layer.zero_grads()
    return net


def copy_params(params: list[np.ndarray]) -> list[np.ndarray]:
    return [p.copy() for p in params]


def _deepcopy(obj):
    return _copy.deepcopy(obj)
