"""Active-learning loop with secured-set checking, consensus repair, and
budget accounting.

One iteration: query a batch (cluster + maximin for the proposed strategy,
uniform for the baseline), buy labels from the workforce, retrain from
scratch, compare secured-set accuracy against the previous accepted model,
and on degradation have independent labelers re-examine the new batch
(unanimous disagreement relabels the point and dents the original labeler's
trust; any inconsistency discards it). Accepted batches are then amplified
with crafted variants that cost no labeling budget. Stopping checks run in
the order accuracy, budget, minimal-perturbation threshold.

Budget accounting: ``budget_used`` counts every oracle call including
consensus re-examinations (gross); ``pool_consumed`` counts distinct pool
instances bought (net).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks, labelers as lab, query
from .instances import Instance, LabelRecord
from .model import ModelState, TrainConfig, accuracy, features_batch, predict, train

DEGRADED = "degraded"
ACCEPTED = "accepted"
STOP_REASONS = ("accuracy", "budget", "tau")


@dataclass(frozen=True)
class DefenseConfig:
    epsilon: float = 0.03               # accuracy drop that triggers examination
    consensus_size: int = 3             # h
    refresh_period: int | None = None   # q; None = never refresh
    tau: float | None = None            # None disables the perturbation stop
    tau_sample_size: int = 50
    target_accuracy: float = 0.89
    augmentation: tuple[attacks.AdvSpec, ...] = ()
    trust_floor: float = lab.TRUST_FLOOR
    charge_consensus: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.consensus_size < 1:
            raise ValueError("consensus size must be at least 1")


@dataclass(frozen=True)
class LoopConfig:
    seed_size: int = 30                 # m, the initial random query
    budget_max: int = 450
    per_cluster: int = 5                # N_c
    cluster_range: tuple[int, int] = (2, 6)
    secured_size: int = 200
    query_metric: str = "feature"       # "feature" | "input" space for clustering/maximin
    train: TrainConfig = TrainConfig()
    defense: DefenseConfig = DefenseConfig()
    intercept_from_iteration: int = 1   # when a malicious labeler starts grabbing queries

    def __post_init__(self):
        if self.query_metric not in ("feature", "input"):
            raise ValueError("query_metric must be 'feature' or 'input'")


@dataclass
class LoopState:
    labeled: list[LabelRecord]
    pool: list[Instance]
    secured: list[tuple[Instance, int]]
    reserve: list[Instance]
    iteration: int
    budget_used: int
    pool_consumed: int
    budget_max: int
    model: ModelState
    model_prev: ModelState | None
    events: list[dict]
    next_id: int
    chosen_n: int
    relabel_events: int = 0
    discarded_points: int = 0

    def log(self, kind: str, **details):
        self.events.append({"iteration": self.iteration, "kind": kind, **details})


@dataclass
class LoopHistory:
    arm: str
    seed: int
    records: list[dict]
    events: list[dict]
    stop_reason: str
    budget_used: int
    pool_consumed: int
    relabel_events: int
    discarded_points: int
    terminal_accuracy_secured: float
    terminal_accuracy_test: float
    final_trust: dict[int, float]
    final_model: ModelState | None = None

    def serializable(self) -> dict:
        """Everything except the model, as JSON-ready primitives."""
        return {
            "arm": self.arm, "seed": self.seed, "records": self.records,
            "events": self.events, "stop_reason": self.stop_reason,
            "budget_used": self.budget_used,
            "pool_consumed": self.pool_consumed,
            "relabel_events": self.relabel_events,
            "discarded_points": self.discarded_points,
            "terminal_accuracy_secured": self.terminal_accuracy_secured,
            "terminal_accuracy_test": self.terminal_accuracy_test,
            "final_trust": {str(k): v for k, v in self.final_trust.items()},
        }


def _training_pairs(records):
    return [(r.instance, r.label) for r in records]


def _draw_secured(reserve, size: int, n_classes: int, rng) -> list | None:
    """Class-stratified sample of labeled ground truth from the reserve."""
    per_class = size // n_classes
    by_class = {}
    for inst in reserve:
        by_class.setdefault(inst.true_label, []).append(inst)
    if len(by_class) < n_classes or any(len(v) < per_class for v in by_class.values()):
        return None
    secured = []
    for cls in sorted(by_class):
        members = by_class[cls]
        idx = rng.choice(len(members), size=per_class, replace=False)
        secured.extend((members[i], cls) for i in idx)
    return secured


def _buy_labels(state: LoopState, batch, workforce, config: LoopConfig, rng,
                n_classes: int):
    intercept = state.iteration + 1 >= config.intercept_from_iteration
    assigned = lab.assign_labelers(batch, workforce, rng, intercept=intercept)
    records = []
    for inst, labeler in zip(batch, assigned):
        y = lab.label(labeler, inst, rng, n_classes)
        records.append(LabelRecord(inst, y, labeler_id=labeler.id,
                                   iteration=state.iteration + 1))
        state.budget_used += 1
    return records


def initialize(pool, reserve, workforce, config: LoopConfig, rng,
               test_ids=()) -> LoopState:
    """Seed the loop: m random labeled points, the secured set, first model."""
    m = config.seed_size
    if m < 1:
        raise ValueError("initial query size must be at least 1")
    if m > len(pool):
        raise ValueError("initial query size exceeds the pool")
    if config.budget_max < m:
        raise ValueError("labeling budget is smaller than the initial query")
    n_classes = config.train.n_classes

    all_ids = [inst.id for inst in pool] + [inst.id for inst in reserve] + list(test_ids)
    state = LoopState(
        labeled=[], pool=list(pool), secured=[], reserve=list(reserve),
        iteration=-1, budget_used=0, pool_consumed=0,
        budget_max=config.budget_max, model=None, model_prev=None,
        events=[], next_id=max(all_ids) + 1, chosen_n=0)

    secured = _draw_secured(reserve, config.secured_size, n_classes, rng)
    if secured is None:
        raise ValueError("reserve too small for a stratified secured set")
    state.secured = secured

    idx = rng.choice(len(state.pool), size=m, replace=False)
    chosen = [state.pool[i] for i in idx]
    keep = set(range(len(state.pool))) - set(int(i) for i in idx)
    state.pool = [state.pool[i] for i in sorted(keep)]
    state.pool_consumed = m

    records = _buy_labels(state, chosen, workforce, config, rng, n_classes)
    state.labeled = records
    state.iteration = 0
    state.log("seeded", size=m, ids=[inst.id for inst in chosen])

    state.chosen_n = query.choose_n(
        np.stack([inst.x for inst in state.pool]), config.cluster_range,
        seed=int(rng.integers(2 ** 31)))
    state.log("cluster_count", n=state.chosen_n)

    state.model = train(_training_pairs(state.labeled), config.train,
                        seed=int(rng.integers(2 ** 31)))
    return state


def performance_check(model_new: ModelState, model_prev: ModelState,
                      secured, epsilon: float) -> str:
    """Degraded iff secured-set accuracy fell by more than epsilon."""
    acc_new = accuracy(model_new, secured)
    acc_prev = accuracy(model_prev, secured)
    return DEGRADED if acc_new < acc_prev - epsilon else ACCEPTED


def handle_degradation(state: LoopState, new_records, workforce,
                       model: ModelState, config: LoopConfig, rng):
    """Re-examine the batch that degraded the model, repair D, retrain.

    Every record ends up confirmed, relabeled, or discarded. A relabel
    decrements the original labeler's trust using the degraded model's
    confidence on the instance.
    """
    defense = config.defense
    n_classes = config.train.n_classes
    by_id = {lab_prof.id: lab_prof for lab_prof in workforce}
    surviving = []
    for record in new_records:
        eligible = [p for p in lab.trusted(workforce, defense.trust_floor)
                    if p.id != record.labeler_id]
        if not eligible:
            raise RuntimeError("no trusted labelers available for consensus")
        h = min(defense.consensus_size, len(eligible))
        if h < defense.consensus_size:
            state.log("consensus_short", wanted=defense.consensus_size, got=h)
        idx = rng.choice(len(eligible), size=h, replace=False)
        jury = [eligible[i] for i in idx]
        verdict = lab.consensus_relabel(jury, record.instance, rng, n_classes)
        if defense.charge_consensus:
            state.budget_used += h
        if verdict is None:
            state.labeled.remove(record)
            state.discarded_points += 1
            state.log("discarded", instance=record.instance.id,
                      original_label=record.label)
        elif verdict == record.label:
            surviving.append(record)
            state.log("confirmed", instance=record.instance.id, label=verdict)
        else:
            conf = predict(model, record.instance).confidence
            original = by_id.get(record.labeler_id)
            old_label = record.label
            record.label = verdict
            record.model_confidence_at_audit = conf
            surviving.append(record)
            state.relabel_events += 1
            trust_after = None
            if original is not None:
                trust_after = lab.update_trust(original, verdict, old_label, conf)
            state.log("relabeled", instance=record.instance.id,
                      old_label=old_label, new_label=verdict,
                      labeler=record.labeler_id, model_confidence=conf,
                      trust_after=trust_after,
                      cause="consensus_mismatch")
    repaired = train(_training_pairs(state.labeled), config.train,
                     seed=int(rng.integers(2 ** 31)))
    state.log("retrained_after_repair", examined=len(new_records))
    return repaired, surviving


def augment(state: LoopState, model: ModelState, new_records, specs, rng):
    """Add crafted variants of freshly labeled points; costs no budget."""
    added = 0
    for record in new_records:
        for spec in specs:
            crafted = attacks.craft(model, record.instance, record.label, spec,
                                    rng, instance_id=state.next_id)
            state.next_id += 1
            state.labeled.append(LabelRecord(crafted, record.label,
                                             labeler_id=None,
                                             iteration=state.iteration))
            added += 1
    if added:
        state.log("augmented", count=added)
    return added


def refresh_secured_set(state: LoopState, config: LoopConfig, rng):
    """Redraw the stratified secured set from the held-out reserve."""
    fresh = _draw_secured(state.reserve, config.secured_size,
                          config.train.n_classes, rng)
    if fresh is None:
        state.log("secured_refresh_skipped", reason="reserve exhausted")
        return
    state.secured = fresh
    state.log("secured_refreshed", size=len(fresh))


def should_stop(state: LoopState, model: ModelState,
                defense: DefenseConfig, rng) -> str | None:
    """First satisfied criterion in the order accuracy, budget, tau."""
    if accuracy(model, state.secured) >= defense.target_accuracy:
        return "accuracy"
    if state.budget_used >= state.budget_max:
        return "budget"
    if defense.tau is not None and state.labeled:
        k = min(defense.tau_sample_size, len(state.labeled))
        idx = rng.choice(len(state.labeled), size=k, replace=False)
        sample = [state.labeled[i].instance for i in idx]
        if attacks.minimal_perturbation(model, sample) > defense.tau:
            return "tau"
    return None


def _select_batch(state: LoopState, strategy: str, config: LoopConfig, rng):
    total = state.chosen_n * config.per_cluster
    total = min(total, state.budget_max - state.budget_used, len(state.pool))
    if total <= 0:
        return [], query.QueryBatch([], {}, short=True)
    if strategy == "baseline":
        chosen = query.random_select(state.pool, total, rng)
        batch = query.QueryBatch([inst.id for inst in chosen])
        return chosen, batch

    metric_model = state.model if config.query_metric == "feature" else None
    pool_vecs = np.stack([p.x for p in state.pool])
    if metric_model is not None:
        pool_vecs = features_batch(metric_model, pool_vecs)
    cm = query.kmeans(pool_vecs, min(state.chosen_n, len(state.pool)),
                      seed=int(rng.integers(2 ** 31)),
                      ids=[p.id for p in state.pool])
    labeled_insts = [r.instance for r in state.labeled]
    chosen: list[Instance] = []
    counts: dict[int, int] = {}
    remaining = total
    for c in range(len(cm.centers)):
        members = [p for p in state.pool if cm.assignment[p.id] == c]
        if not members or remaining <= 0:
            counts[c] = 0
            continue
        want = min(config.per_cluster, remaining)
        picked = query.maximin_select(members, labeled_insts + chosen, want,
                                      feature_model=metric_model)
        chosen.extend(picked)
        counts[c] = len(picked)
        remaining -= len(picked)
    batch = query.QueryBatch([inst.id for inst in chosen], counts,
                             short=len(chosen) < total)
    return chosen, batch


def run(pool, reserve, test_set, workforce, config: LoopConfig, strategy: str,
        seed: int) -> LoopHistory:
    """Execute the loop until a stopping criterion fires.

    ``strategy`` is "proposed" (diversity querying, performance checking,
    consensus repair, augmentation) or "baseline" (random querying with the
    same stop rules and no defenses).
    """
    if strategy not in ("proposed", "baseline"):
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    defense = config.defense
    n_classes = config.train.n_classes
    test_pairs = [(inst, inst.true_label) for inst in test_set]

    state = initialize(pool, reserve, workforce, config, rng,
                       test_ids=[t.id for t in test_set])
    records = [_iteration_record(state, test_pairs)]
    reason = should_stop(state, state.model, defense, rng)

    while reason is None:
        chosen, batch = _select_batch(state, strategy, config, rng)
        if not chosen:
            reason = "budget"
            break
        chosen_ids = {inst.id for inst in chosen}
        state.pool = [p for p in state.pool if p.id not in chosen_ids]
        state.pool_consumed += len(chosen)
        new_records = _buy_labels(state, chosen, workforce, config, rng, n_classes)
        state.iteration += 1
        state.labeled.extend(new_records)
        state.log("queried", ids=sorted(chosen_ids),
                  per_cluster=batch.per_cluster_counts)

        model_new = train(_training_pairs(state.labeled), config.train,
                          seed=int(rng.integers(2 ** 31)))
        if strategy == "proposed":
            status = performance_check(model_new, state.model, state.secured,
                                       defense.epsilon)
            if status == DEGRADED:
                state.log("degradation_detected",
                          acc_new=accuracy(model_new, state.secured),
                          acc_prev=accuracy(state.model, state.secured))
                model_new, new_records = handle_degradation(
                    state, new_records, workforce, model_new, config, rng)
            augment(state, model_new, new_records, defense.augmentation, rng)

        state.model_prev = state.model
        state.model = model_new

        if (defense.refresh_period is not None
                and state.iteration % defense.refresh_period == 0):
            refresh_secured_set(state, config, rng)

        records.append(_iteration_record(state, test_pairs))
        reason = should_stop(state, state.model, defense, rng)

    state.log("stopped", reason=reason)
    return LoopHistory(
        arm=strategy, seed=seed, records=records, events=state.events,
        stop_reason=reason, budget_used=state.budget_used,
        pool_consumed=state.pool_consumed,
        relabel_events=state.relabel_events,
        discarded_points=state.discarded_points,
        terminal_accuracy_secured=accuracy(state.model, state.secured),
        terminal_accuracy_test=accuracy(state.model, test_pairs),
        final_trust={p.id: p.trust for p in workforce},
        final_model=state.model)


def _iteration_record(state: LoopState, test_pairs) -> dict:
    return {
        "iteration": state.iteration,
        "labeled_size": len(state.labeled),
        "budget_used": state.budget_used,
        "pool_consumed": state.pool_consumed,
        "accuracy_secured": accuracy(state.model, state.secured),
        "accuracy_test": accuracy(state.model, test_pairs),
        "relabel_events": state.relabel_events,
        "discarded_points": state.discarded_points,
    }
