"""Dataset construction: synthetic two-blob benchmark and CIFAR-10 binary files.

The synthetic benchmark is two isotropic Gaussian blobs in the unit box,
calibrated so that a surrogate trained on the full pool lands around 0.90
test accuracy. Splits (pool / held-out reserve / test) are disjoint and
exactly class-balanced.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .instances import Instance

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixels


@dataclass(frozen=True)
class SyntheticParams:
    dim: int = 8
    pool_per_class: int = 300
    reserve_per_class: int = 150
    test_per_class: int = 200
    center_offset: float = 0.072  # calibrated for ~0.90 full-pool test accuracy
    sigma: float = 0.15

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for name in ("pool_per_class", "reserve_per_class", "test_per_class"):
            if getattr(self, name) < 100:
                raise ValueError(f"{name} must be at least 100")


def _blob_split(params: SyntheticParams, per_class: int,
                rng: np.random.Generator, next_id: int):
    instances = []
    for cls in (0, 1):
        mean = 0.5 + (1 if cls else -1) * params.center_offset
        xs = rng.normal(mean, params.sigma, size=(per_class, params.dim))
        xs = np.clip(xs, 0.0, 1.0)
        for row in xs:
            instances.append(Instance(row, true_label=cls, provenance="clean",
                                      id=next_id))
            next_id += 1
    return instances, next_id


def generate_synthetic(params: SyntheticParams, seed: int):
    """Returns (pool, reserve, test) with unique ids across all splits."""
    rng = np.random.default_rng(seed)
    next_id = 0
    pool, next_id = _blob_split(params, params.pool_per_class, rng, next_id)
    reserve, next_id = _blob_split(params, params.reserve_per_class, rng, next_id)
    test, next_id = _blob_split(params, params.test_per_class, rng, next_id)
    return pool, reserve, test


class CifarFormatError(ValueError):
    """Malformed CIFAR-10 binary input: carries the offending location."""

    def __init__(self, message: str, offset: int | None = None,
                 record_index: int | None = None):
        super().__init__(message)
        self.offset = offset
        self.record_index = record_index


def read_cifar_binary(path, classes: tuple[int, int], cap: int | None = None):
    """Parse 3073-byte CIFAR-10 records, keeping only the two given classes.

    Kept records are relabeled to {0, 1} in the order ``classes`` lists them
    and pixels are scaled to [0, 1] by /255. Parsing stops once ``cap`` kept
    records have been read. Length and label-byte violations raise
    CifarFormatError with the offending offset / record index.
    """
    if len(classes) != 2 or classes[0] == classes[1]:
        raise ValueError("classes must be a pair of distinct CIFAR labels")
    for c in classes:
        if not 0 <= c <= 9:
            raise ValueError(f"CIFAR class labels lie in 0..9, got {c}")
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        bad_offset = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise CifarFormatError(
            f"truncated record at offset {bad_offset}", offset=bad_offset)

    relabel = {classes[0]: 0, classes[1]: 1}
    kept: list[Instance] = []
    for idx in range(len(raw) // CIFAR_RECORD_BYTES):
        off = idx * CIFAR_RECORD_BYTES
        label = raw[off]
        if label > 9:
            raise CifarFormatError(
                f"invalid label byte {label} in record {idx}",
                offset=off, record_index=idx)
        if label not in relabel:
            continue
        pixels = np.frombuffer(raw, dtype=np.uint8, count=CIFAR_RECORD_BYTES - 1,
                               offset=off + 1).astype(np.float64) / 255.0
        kept.append(Instance(pixels, true_label=relabel[label],
                             provenance="clean", id=idx))
        if cap is not None and len(kept) >= cap:
            break
    return kept


def stratified_split(instances, fractions: tuple[float, float, float],
                     rng: np.random.Generator):
    """Per-class shuffle then split into (pool, reserve, test)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    by_class: dict[int, list[Instance]] = {}
    for inst in instances:
        by_class.setdefault(inst.true_label, []).append(inst)
    pool, reserve, test = [], [], []
    for cls in sorted(by_class):
        members = by_class[cls]
        order = rng.permutation(len(members))
        n_pool = int(round(fractions[0] * len(members)))
        n_reserve = int(round(fractions[1] * len(members)))
        for j, i in enumerate(order):
            if j < n_pool:
                pool.append(members[i])
            elif j < n_pool + n_reserve:
                reserve.append(members[i])
            else:
                test.append(members[i])
    return pool, reserve, test
