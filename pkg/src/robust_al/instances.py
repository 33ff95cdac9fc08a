"""Data points flowing through the simulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROVENANCES = ("clean", "adversarial", "poison", "augmented")


@dataclass(eq=False)
class Instance:
    """A feature vector with optional ground-truth label and provenance tag.

    For poison instances ``true_label`` records the base instance's class,
    which is also the label a human labeler would assign (the crafted point
    is visually a member of the base class).
    """

    x: np.ndarray
    true_label: int | None = None
    provenance: str = "clean"
    id: int = -1

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 1:
            raise ValueError(f"instance vector must be 1-d, got shape {self.x.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def dim(self) -> int:
        return self.x.shape[0]


@dataclass(eq=False)
class LabelRecord:
    """A labeled instance as it sits in the training set D.

    ``labeler_id`` is None for labels not attributable to a single human
    (consensus-assigned labels, crafted augmentations).
    """

    instance: Instance
    label: int
    labeler_id: int | None = None
    iteration: int = 0
    model_confidence_at_audit: float | None = None


def stack(instances) -> np.ndarray:
    """Row-stack instance vectors into an (N, d) matrix."""
    return np.stack([inst.x for inst in instances])
