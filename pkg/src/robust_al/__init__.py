"""Deterministic simulator of active learning under labeler attacks.

A small hand-written classifier, a simulated labeling workforce (benign
error plus an optional systematic mislabeler), feature-collision poisoning
and adversarial-example crafting, diversity querying, and the defended
training loop that ties them together, plus a seeded experiment harness.
"""

from .instances import Instance, LabelRecord
from .model import (
    Architecture,
    FeatureMatch,
    LossWrtLabel,
    ModelState,
    Prediction,
    TrainConfig,
    accuracy,
    features,
    input_gradient,
    predict,
    train,
)
from .labelers import (
    LabelerProfile,
    consensus_relabel,
    is_trusted,
    label,
    required_labelers,
    update_trust,
)
from .attacks import (
    DeepfoolSpec,
    GaussianSpec,
    PgdSpec,
    PoisonSpec,
    craft_poison,
    deepfool,
    gaussian_noise,
    minimal_perturbation,
    pgd,
    poison_attack_success,
    watermark_blend,
)
from .query import choose_n, kmeans, maximin_select, random_select
from .loop import DefenseConfig, LoopConfig, LoopHistory, run
from .data import SyntheticParams, generate_synthetic, read_cifar_binary
from .harness import (
    ExperimentConfig,
    run_experiment,
    run_poison_campaign,
)

__version__ = "0.1.0"
