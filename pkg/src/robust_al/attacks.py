"""Attack crafting: feature-collision poisoning and adversarial examples.

A poison instance is optimized to sit near a chosen target in the model's
feature space while staying close to a benign base instance in input space
(so a human labels it with the base's class). Adversarial examples come from
PGD, DeepFool, or Gaussian noise; DeepFool's perturbation norm doubles as an
uncertainty measure for the stopping rule, with +inf as the sentinel for
points no perturbation flips within the iteration budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .instances import Instance
from .model import (
    FeatureMatch,
    LossWrtLabel,
    ModelState,
    features,
    input_gradient,
    logit_jacobian,
    logits,
    predict,
)

UNIT_CLIP = (0.0, 1.0)


@dataclass(frozen=True)
class PoisonSpec:
    target: Instance
    base: Instance
    beta: float = 0.25
    watermark: float = 0.2
    max_iters: int = 200
    step: float = 0.01

    def __post_init__(self):
        if self.target.true_label == self.base.true_label:
            raise ValueError("poison target and base must come from different classes")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not 0.0 <= self.watermark <= 0.3:
            raise ValueError("watermark must lie in [0, 0.3]")


@dataclass(frozen=True)
class PgdSpec:
    eps: float = 0.3
    step: float = 0.03  # eps / 10
    iters: int = 20
    clip: tuple[float, float] = UNIT_CLIP

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")


@dataclass(frozen=True)
class DeepfoolSpec:
    max_iters: int = 100
    overshoot: float = 0.02
    clip: tuple[float, float] | None = None


@dataclass(frozen=True)
class GaussianSpec:
    variance: float = 0.3
    clip: tuple[float, float] | None = UNIT_CLIP

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")


AdvSpec = PgdSpec | DeepfoolSpec | GaussianSpec


def watermark_blend(base: Instance, target: Instance, w: float,
                    instance_id: int = -1) -> Instance:
    """Blend a fraction w of the target into the base, keeping the base label."""
    if base.dim != target.dim:
        raise ValueError("dimension mismatch between base and target")
    if not 0.0 <= w <= 1.0:
        raise ValueError("watermark fraction must lie in [0, 1]")
    x = np.clip((1.0 - w) * base.x + w * target.x, 0.0, 1.0)
    return Instance(x, true_label=base.true_label, provenance="poison",
                    id=instance_id)


def collision_objective(model: ModelState, x: np.ndarray, spec: PoisonSpec,
                        target_features: np.ndarray) -> float:
    probe = Instance(x, provenance="poison", true_label=spec.base.true_label)
    feat_term = float(np.sum((features(model, probe) - target_features) ** 2))
    base_term = float(np.sum((x - spec.base.x) ** 2))
    return feat_term + spec.beta * base_term


def craft_poison(model: ModelState, spec: PoisonSpec,
                 instance_id: int = -1) -> tuple[Instance, list[float]]:
    """Minimize ||f(x) - f(target)||^2 + beta ||x - base||^2 over x in [0,1]^d.

    Forward-backward splitting: a gradient step on the feature term followed
    by the closed-form proximal step for the quadratic base term, then a clip
    to the unit box. Backtracking halves the step whenever the composite
    objective would rise, so the returned trace is non-increasing. Stops on
    relative improvement below 1e-6 or after max_iters.
    """
    phi_t = features(model, spec.target)
    x = watermark_blend(spec.base, spec.target, spec.watermark).x
    obj = collision_objective(model, x, spec, phi_t)
    if not np.isfinite(obj):
        raise ValueError("poison optimization diverged")
    trace = [obj]
    lam = spec.step
    for _ in range(spec.max_iters):
        probe = Instance(x, provenance="poison", true_label=spec.base.true_label)
        grad = input_gradient(model, probe, FeatureMatch(phi_t))
        accepted = False
        while lam > 1e-14:
            x_grad = x - lam * grad
            x_new = np.clip((x_grad + lam * spec.beta * spec.base.x)
                            / (1.0 + lam * spec.beta), 0.0, 1.0)
            obj_new = collision_objective(model, x_new, spec, phi_t)
            if not np.isfinite(obj_new):
                raise ValueError("poison optimization diverged")
            if obj_new <= trace[-1]:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        improvement = (trace[-1] - obj_new) / max(trace[-1], 1e-12)
        x = x_new
        trace.append(obj_new)
        if improvement < 1e-6:
            break
    poison = Instance(x, true_label=spec.base.true_label, provenance="poison",
                      id=instance_id)
    return poison, trace


def poison_attack_success(model_after: ModelState, target: Instance,
                          attacker_goal: int) -> bool:
    """True iff the retrained model sends the target to the attacker's class."""
    if attacker_goal == target.true_label:
        return False
    return predict(model_after, target).predicted == attacker_goal


def pgd(model: ModelState, x: Instance, y: int, spec: PgdSpec,
        instance_id: int = -1) -> Instance:
    """Sign-gradient ascent on the loss inside an L-inf ball of radius eps."""
    lo = np.maximum(x.x - spec.eps, spec.clip[0])
    hi = np.minimum(x.x + spec.eps, spec.clip[1])
    adv = x.x.copy()
    for _ in range(spec.iters):
        probe = Instance(adv, true_label=x.true_label, provenance="adversarial")
        g = input_gradient(model, probe, LossWrtLabel(y))
        adv = np.clip(adv + spec.step * np.sign(g), lo, hi)
    return Instance(adv, true_label=x.true_label, provenance="adversarial",
                    id=instance_id)


def deepfool(model: ModelState, x: Instance, max_iters: int = 100,
             overshoot: float = 0.02, clip: tuple[float, float] | None = None,
             instance_id: int = -1) -> tuple[Instance, float]:
    """Iterative linearization toward the nearest decision boundary.

    Returns the perturbed instance (overshoot applied) and the L2 norm of the
    applied perturbation. A point that is already misclassified needs no
    perturbation and comes back with norm 0; if no flip happens within
    max_iters the original point comes back with the +inf sentinel.
    """
    start = predict(model, x)
    reference = x.true_label if x.true_label is not None else start.predicted
    if start.predicted != reference:
        return Instance(x.x.copy(), true_label=x.true_label,
                        provenance="adversarial", id=instance_id), 0.0

    c0 = start.predicted
    n_classes = model.arch.n_classes
    r_total = np.zeros_like(x.x)
    current = x.x
    for _ in range(max_iters):
        probe = Instance(current, true_label=x.true_label,
                         provenance="adversarial")
        z = logits(model, probe)
        jac = logit_jacobian(model, probe)
        best_ratio, best_w, best_f = math.inf, None, None
        for k in range(n_classes):
            if k == c0:
                continue
            w = jac[k] - jac[c0]
            f = z[k] - z[c0]
            w_norm = float(np.linalg.norm(w))
            if w_norm < 1e-12:
                continue
            ratio = abs(f) / w_norm
            if ratio < best_ratio:
                best_ratio, best_w, best_f = ratio, w, f
        if best_w is None:
            break
        r_total = r_total + (abs(best_f) / float(np.dot(best_w, best_w))) * best_w
        candidate = x.x + (1.0 + overshoot) * r_total
        if clip is not None:
            candidate = np.clip(candidate, clip[0], clip[1])
        adv = Instance(candidate, true_label=x.true_label,
                       provenance="adversarial", id=instance_id)
        if predict(model, adv).predicted != c0:
            return adv, float(np.linalg.norm(candidate - x.x))
        current = candidate
    return Instance(x.x.copy(), true_label=x.true_label,
                    provenance="adversarial", id=instance_id), math.inf


def gaussian_noise(x: Instance, variance: float, rng: np.random.Generator,
                   clip: tuple[float, float] | None = UNIT_CLIP,
                   instance_id: int = -1) -> Instance:
    """Additive zero-mean Gaussian noise with the given variance per coordinate."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    noisy = x.x + rng.normal(0.0, math.sqrt(variance), size=x.dim)
    if clip is not None:
        noisy = np.clip(noisy, clip[0], clip[1])
    return Instance(noisy, true_label=x.true_label, provenance="augmented",
                    id=instance_id)


def craft(model: ModelState, x: Instance, y: int, spec: AdvSpec,
          rng: np.random.Generator, instance_id: int = -1) -> Instance:
    """Dispatch one crafting spec against a labeled instance."""
    if isinstance(spec, PgdSpec):
        return pgd(model, x, y, spec, instance_id=instance_id)
    if isinstance(spec, DeepfoolSpec):
        clip = spec.clip if spec.clip is not None else UNIT_CLIP
        adv, _ = deepfool(model, x, spec.max_iters, spec.overshoot, clip=clip,
                          instance_id=instance_id)
        return adv
    if isinstance(spec, GaussianSpec):
        return gaussian_noise(x, spec.variance, rng, clip=spec.clip,
                              instance_id=instance_id)
    raise TypeError(f"unknown crafting spec {spec!r}")


def minimal_perturbation(model: ModelState, instances, max_iters: int = 100) -> float:
    """Smallest DeepFool perturbation over the set (inf if nothing flips)."""
    if not instances:
        raise ValueError("minimal perturbation needs a non-empty set")
    best = math.inf
    for inst in instances:
        _, norm = deepfool(model, inst, max_iters=max_iters)
        if norm < best:
            best = norm
    return best
