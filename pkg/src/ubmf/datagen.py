"""Synthetic vibration benchmark: generation, file format, splits.

Signals are impulse trains (one fault signature per class) convolved with
a decaying resonance, plus white noise, standardized per channel.  Class
identity lives in the impulse rate and resonance frequency; operating
condition scales the impulse rate (shaft speed) and noise floor.

File format: ``b"UBMF"`` magic, u32 LE version, u32 LE manifest byte
length, UTF-8 JSON manifest, float32 LE sample block ordered class-major,
then condition, then replicate.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateInputError, FormatError, InsufficientDataError,
                     InvalidParameterError)
from .rng import rng_for
from .signal import SignalSet, standardize

MAGIC = b"UBMF"
FORMAT_VERSION = 1

_MANIFEST_KEYS = {"name", "length", "sample_rate", "channels", "classes",
                  "conditions", "counts"}


def default_manifest(n_classes: int = 5, length: int = 1024,
                     per_class_per_condition: int = 40,
                     noise: float = 0.25) -> dict:
    """Five rotating-machine fault classes under two operating conditions.

    ``noise`` sets the first condition's noise floor; the second runs
    slightly faster and noisier.
    """
    rates = [18.0, 30.0, 44.0, 60.0, 78.0]
    resonances = [240.0, 320.0, 400.0, 480.0, 560.0]
    if not 2 <= n_classes <= len(rates):
        raise InvalidParameterError(f"n_classes must be in [2, {len(rates)}]")
    classes = [
        {"name": f"fault{k}", "impulse_rate": rates[k],
         "resonance_hz": resonances[k], "amplitude": 1.0, "decay": 0.008}
        for k in range(n_classes)
    ]
    conditions = [{"speed": 1.0, "noise": float(noise)},
                  {"speed": 1.15, "noise": float(noise) + 0.1}]
    counts = [[per_class_per_condition] * len(conditions) for _ in range(n_classes)]
    return {"name": f"synth{n_classes}", "length": int(length),
            "sample_rate": 2048.0, "channels": 1,
            "classes": classes, "conditions": conditions, "counts": counts}


def validate_manifest(manifest: dict) -> None:
    missing = _MANIFEST_KEYS - set(manifest)
    if missing:
        raise InvalidParameterError(f"manifest missing keys: {sorted(missing)}")
    if manifest["length"] < 32:
        raise InvalidParameterError("manifest length below 32 samples")
    if manifest["sample_rate"] <= 0:
        raise InvalidParameterError("manifest sample_rate must be positive")
    if manifest["channels"] < 1:
        raise InvalidParameterError("manifest channels must be >= 1")
    K, J = len(manifest["classes"]), len(manifest["conditions"])
    if K < 2:
        raise InvalidParameterError("need at least 2 classes")
    if J < 1:
        raise InvalidParameterError("need at least 1 condition")
    counts = manifest["counts"]
    if len(counts) != K or any(len(row) != J for row in counts):
        raise InvalidParameterError("counts must be [n_classes][n_conditions]")
    if any(c < 0 for row in counts for c in row):
        raise InvalidParameterError("counts must be non-negative")


def _synth_one(cls_spec: dict, cond: dict, length: int, fs: float,
               channels: int, rng: np.random.Generator) -> np.ndarray:
    f0 = cls_spec["impulse_rate"] * cond["speed"]
    period = fs / f0
    # impulse train with random phase and small per-impulse timing jitter
    train = np.zeros(length)
    t = rng.uniform(0.0, period)
    while t < length:
        i = int(round(t))
        if i < length:
            train[i] += cls_spec["amplitude"] * (1.0 + 0.1 * rng.standard_normal())
        t += period * (1.0 + 0.02 * rng.standard_normal())
    # decaying resonance kernel
    tau = cls_spec["decay"]
    klen = max(4, min(length, int(5 * tau * fs)))
    tt = np.arange(klen) / fs
    kernel = np.exp(-tt / tau) * np.sin(2 * np.pi * cls_spec["resonance_hz"] * tt)
    base = np.convolve(train, kernel)[:length]
    out = np.empty((channels, length))
    for c in range(channels):
        out[c] = base + cond["noise"] * rng.standard_normal(length)
        if channels > 1 and c > 0:
            # secondary sensors see a delayed, attenuated copy
            shift = 3 * c
            out[c] = 0.7 * np.roll(base, shift) + cond["noise"] * rng.standard_normal(length)
    return standardize(out)


@dataclass
class DatasetFile:
    """A generated dataset: manifest plus the float32 sample block."""

    manifest: dict
    samples: np.ndarray  # [n, channels, length] float32

    def labels(self) -> np.ndarray:
        out = []
        for k, row in enumerate(self.manifest["counts"]):
            out.extend([k] * sum(row))
        return np.asarray(out, dtype=np.int64)

    def conditions(self) -> np.ndarray:
        out = []
        for row in self.manifest["counts"]:
            for j, c in enumerate(row):
                out.extend([j] * c)
        return np.asarray(out, dtype=np.int64)

    def to_signal_set(self) -> SignalSet:
        name = self.manifest["name"]
        labels = self.labels()
        conds = self.conditions()
        ids = []
        counters: dict[tuple[int, int], int] = {}
        for lab, cond in zip(labels, conds):
            r = counters.get((lab, cond), 0)
            counters[(lab, cond)] = r + 1
            ids.append(f"{name}/c{lab}/s{cond}/r{r}")
        return SignalSet(X=self.samples.astype(np.float64), labels=labels,
                         conditions=conds, sample_rate=self.manifest["sample_rate"],
                         source_ids=ids)


def generate(manifest: dict, seed: int) -> DatasetFile:
    """Deterministically synthesize every sample the manifest asks for.

    Raises DegenerateInputError if any configured sample has zero variance
    before standardization (e.g. amplitude 0 with noise 0).
    """
    validate_manifest(manifest)
    length = manifest["length"]
    fs = manifest["sample_rate"]
    channels = manifest["channels"]
    blocks = []
    for k, cls_spec in enumerate(manifest["classes"]):
        for j, cond in enumerate(manifest["conditions"]):
            for r in range(manifest["counts"][k][j]):
                rng = rng_for(seed, "datagen", f"{k}.{j}.{r}")
                try:
                    blocks.append(_synth_one(cls_spec, cond, length, fs, channels, rng))
                except DegenerateInputError as exc:
                    raise DegenerateInputError(
                        f"class {k} condition {j} replicate {r}: {exc}") from exc
    samples = np.stack(blocks).astype(np.float32) if blocks else \
        np.zeros((0, channels, length), dtype=np.float32)
    return DatasetFile(manifest=manifest, samples=samples)


def save_dataset(path: str | os.PathLike, ds: DatasetFile) -> None:
    validate_manifest(ds.manifest)
    manifest_bytes = json.dumps(ds.manifest, sort_keys=True).encode("utf-8")
    block = np.ascontiguousarray(ds.samples, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint32(len(manifest_bytes)).tobytes())
        fh.write(manifest_bytes)
        fh.write(block)


def load_dataset(path: str | os.PathLike) -> DatasetFile:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic; not a dataset file", offset=0)
    if len(raw) < 12:
        raise FormatError("truncated before manifest length", offset=4)
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    mlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if len(raw) < 12 + mlen:
        raise FormatError("truncated inside manifest", offset=12)
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", offset=12) from exc
    try:
        validate_manifest(manifest)
    except InvalidParameterError as exc:
        raise FormatError(f"manifest fails validation: {exc}", offset=12) from exc
    n = sum(sum(row) for row in manifest["counts"])
    expect = n * manifest["channels"] * manifest["length"] * 4
    got = len(raw) - 12 - mlen
    if got != expect:
        raise FormatError(
            f"sample block holds {got} bytes, manifest implies {expect}",
            offset=12 + mlen)
    samples = np.frombuffer(raw[12 + mlen:], dtype="<f4").reshape(
        n, manifest["channels"], manifest["length"]).copy()
    return DatasetFile(manifest=manifest, samples=samples)


def split_indices(ds: DatasetFile, labeled_counts: list[int],
                  unlabeled_counts: list[int], seed: int
                  ) -> dict[str, np.ndarray]:
    """Index-level split underlying make_imbalanced_split: sorted,
    disjoint index arrays into the dataset's sample order."""
    labels = ds.labels()
    classes = np.unique(labels)
    K = len(classes)
    if len(labeled_counts) != K or len(unlabeled_counts) != K:
        raise InvalidParameterError(
            f"need one labeled and one unlabeled count per class ({K} classes)")
    rng = rng_for(seed, "split")
    lab_idx, unl_idx, test_idx = [], [], []
    for k in classes:
        pool = np.flatnonzero(labels == k)
        need = labeled_counts[k] + unlabeled_counts[k]
        if len(pool) < need + 1:
            raise InsufficientDataError(
                f"class {k} has {len(pool)} samples; needs > {need}")
        pool = rng.permutation(pool)
        lab_idx.extend(pool[:labeled_counts[k]])
        unl_idx.extend(pool[labeled_counts[k]:need])
        test_idx.extend(pool[need:])
    return {"labeled": np.sort(lab_idx).astype(np.int64),
            "unlabeled": np.sort(unl_idx).astype(np.int64),
            "test": np.sort(test_idx).astype(np.int64)}


def make_imbalanced_split(ds: DatasetFile, labeled_counts: list[int],
                          unlabeled_counts: list[int], seed: int
                          ) -> dict[str, SignalSet]:
    """Split into disjoint labeled / unlabeled / test pools.

    ``labeled_counts[k]`` and ``unlabeled_counts[k]`` are per-class sample
    counts; everything left over goes to test.  Unlabeled pool labels are
    stripped (-1).  Draws are seeded and condition-mixed.
    """
    idx = split_indices(ds, labeled_counts, unlabeled_counts, seed)
    full = ds.to_signal_set()
    labeled = full.subset(idx["labeled"])
    unlabeled = full.subset(idx["unlabeled"])
    unlabeled.labels = np.full(len(unlabeled), -1, dtype=np.int64)
    test = full.subset(idx["test"])
    return {"labeled": labeled, "unlabeled": unlabeled, "test": test}
