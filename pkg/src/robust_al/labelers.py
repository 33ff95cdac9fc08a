"""Simulated human labeling workforce.

Benign labelers return the true class except with probability ``error_rate``,
in which case they pick uniformly among the wrong classes. A malicious
labeler always maps its target class to a fixed decoy class and otherwise
behaves like a benign labeler. Each profile carries a mutable trust score
that the defense decrements when a consensus contradicts the labeler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .instances import Instance

TRUST_FLOOR = 0.5
MISMATCH_KAPPA = 0.05
CONFIDENCE_ALARM = 0.9
ALARM_PENALTY = 0.2


@dataclass
class LabelerProfile:
    """One annotator. Malicious iff target_class is set."""

    id: int
    error_rate: float
    target_class: int | None = None
    decoy_class: int | None = None
    trust: float = 1.0
    audit_flagged: bool = False

    def __post_init__(self):
        if not 0.0 < self.error_rate < 1.0:
            raise ValueError("error_rate must lie strictly between 0 and 1")
        if self.malicious:
            if self.decoy_class is None:
                raise ValueError("malicious labeler needs a decoy class")
            if self.decoy_class == self.target_class:
                raise ValueError("decoy class must differ from target class")

    @property
    def malicious(self) -> bool:
        return self.target_class is not None


def label(labeler: LabelerProfile, x: Instance, rng: np.random.Generator,
          n_classes: int) -> int:
    """One label request. The simulator requires ground truth on x."""
    if x.true_label is None:
        raise ValueError("oracle requires ground truth")
    c = x.true_label
    if labeler.malicious and c == labeler.target_class:
        return labeler.decoy_class
    u = rng.random()
    if u < labeler.error_rate:
        wrong = [k for k in range(n_classes) if k != c]
        return wrong[rng.integers(len(wrong))]
    return c


def required_labelers(p_single: float, p_target: float) -> int:
    """Minimal h with 1 - (1 - p_single)^h >= p_target."""
    if not 0.0 < p_single < 1.0:
        raise ValueError("single-labeler accuracy must lie in (0, 1)")
    if not 0.0 < p_target < 1.0:
        raise ValueError("target probability must lie in (0, 1)")
    h = max(1, math.ceil(math.log1p(-p_target) / math.log1p(-p_single)))
    # guard the ceil against floating-point edge cases in both directions
    while h > 1 and 1.0 - (1.0 - p_single) ** (h - 1) >= p_target:
        h -= 1
    while 1.0 - (1.0 - p_single) ** h < p_target:
        h += 1
    return h


def consensus_relabel(labelers, x: Instance, rng: np.random.Generator,
                      n_classes: int) -> int | None:
    """Unanimous label from independent labelers, or None to discard."""
    if not labelers:
        raise ValueError("consensus requires at least one labeler")
    votes = [label(lab, x, rng, n_classes) for lab in labelers]
    first = votes[0]
    if all(v == first for v in votes):
        return first
    return None


def update_trust(labeler: LabelerProfile, consensus_label: int,
                 original_label: int, model_confidence: float) -> float:
    """Penalize a labeler whose past label a consensus overturned.

    Low model confidence on the instance reads as mild drift and costs
    kappa/(1+confidence); confidence at or above the alarm threshold costs a
    flat penalty and flags the labeler for audit. Trust never leaves [0, 1].
    """
    if not 0.0 <= model_confidence <= 1.0:
        raise ValueError("model confidence must lie in [0, 1]")
    if consensus_label == original_label:
        return labeler.trust
    if model_confidence < CONFIDENCE_ALARM:
        new = max(0.0, labeler.trust - MISMATCH_KAPPA / (1.0 + model_confidence))
    else:
        new = max(0.0, labeler.trust - ALARM_PENALTY)
        labeler.audit_flagged = True
    labeler.trust = new
    return new


def is_trusted(labeler: LabelerProfile, floor: float = TRUST_FLOOR) -> bool:
    return labeler.trust >= floor


def trusted(workforce, floor: float = TRUST_FLOOR):
    return [lab for lab in workforce if is_trusted(lab, floor)]


def assign_labelers(instances, workforce, rng: np.random.Generator,
                    intercept: bool = False):
    """Pick one labeler per instance: round-robin over trusted profiles.

    With ``intercept`` set, a trusted malicious labeler additionally claims
    every instance of its target class (the attacker games the task queue to
    see the whole class, which is what makes its mislabeling systematic).
    """
    pool = trusted(workforce)
    if not pool:
        raise RuntimeError("no trusted labelers left in the workforce")
    order = [pool[i] for i in rng.permutation(len(pool))]
    assigned = [order[i % len(order)] for i in range(len(instances))]
    if intercept:
        grabbers = {lab.target_class: lab for lab in pool if lab.malicious}
        for i, inst in enumerate(instances):
            claimer = grabbers.get(inst.true_label)
            if claimer is not None:
                assigned[i] = claimer
    return assigned
