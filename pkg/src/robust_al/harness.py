"""Experiment harness: seeded multi-run execution, statistics, reports.

Every (seed, arm) cell derives its RNG seed by hashing (master_seed,
seed_index, arm), so adding arms or seeds never perturbs existing cells and
results are identical no matter how many workers run them. The stopping
target defaults to one point below the clean reference: the test accuracy of
a model trained on the full pool with ground-truth labels.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from .attacks import (
    DeepfoolSpec,
    GaussianSpec,
    PgdSpec,
    PoisonSpec,
    craft_poison,
    poison_attack_success,
)
from .data import SyntheticParams, generate_synthetic, read_cifar_binary, stratified_split
from .labelers import LabelerProfile
from .loop import DefenseConfig, LoopConfig, run as run_loop
from .model import TrainConfig, accuracy, predict, train

CSV_COLUMNS = ("seed", "arm", "budget_used", "terminal_test_accuracy",
               "stop_reason", "relabel_events", "discarded_points")
ARMS = ("baseline", "proposed")


@dataclass(frozen=True)
class WorkforceConfig:
    n_labelers: int = 11
    error_rate: float = 0.05
    target_class: int = 0
    decoy_class: int = 1


@dataclass(frozen=True)
class CifarConfig:
    path: str
    classes: tuple[int, int] = (0, 6)
    cap: int = 3000
    split: tuple[float, float, float] = (0.5, 0.25, 0.25)

    def __post_init__(self):
        if self.cap > 3000:
            raise ValueError("cifar cap must not exceed 3000")


@dataclass(frozen=True)
class PoisonCampaignConfig:
    n_targets: int = 20
    per_target: int = 25
    watermark: float = 0.2
    beta: float = 0.25
    max_iters: int = 100
    step: float = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticParams | CifarConfig = SyntheticParams()
    workforce: WorkforceConfig = WorkforceConfig()
    attack: str = "none"  # none | mislabel | poison
    arms: tuple[str, ...] = ARMS
    n_seeds: int = 30
    master_seed: int = 0
    loop: LoopConfig = LoopConfig()
    poison: PoisonCampaignConfig = PoisonCampaignConfig()
    target_accuracy: float | None = None
    out_dir: str = "results"
    jobs: int = 1
    trace: bool = False

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("need at least one seed")
        if self.attack not in ("none", "mislabel", "poison"):
            raise ValueError(f"unknown attack kind {self.attack!r}")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ValueError(f"unknown arms: {bad}")


@dataclass
class ExperimentReport:
    config: dict
    clean_reference: float
    target_accuracy: float
    rows: list[dict]
    stats: dict[str, dict]
    failures: dict[str, int]
    errors: list[dict]
    runtime_seconds: float
    traces: dict = field(default_factory=dict, repr=False)


@dataclass
class CampaignReport:
    config: dict
    clean_reference: float
    target_accuracy: float
    rows: list[dict]
    per_arm: dict[str, dict]
    corpus: list[dict]
    errors: list[dict]
    runtime_seconds: float


def cell_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed derived from the master seed and cell coordinates."""
    key = ":".join(str(p) for p in (master_seed, *parts)).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") % (2 ** 63)


def build_workforce(cfg: WorkforceConfig, malicious: bool) -> list[LabelerProfile]:
    """Fresh profiles (trust matters, so never share across runs)."""
    profiles = []
    for i in range(cfg.n_labelers):
        if malicious and i == cfg.n_labelers - 1:
            profiles.append(LabelerProfile(i, cfg.error_rate,
                                           target_class=cfg.target_class,
                                           decoy_class=cfg.decoy_class))
        else:
            profiles.append(LabelerProfile(i, cfg.error_rate))
    return profiles


def load_dataset(config: ExperimentConfig):
    ds = config.dataset
    if isinstance(ds, SyntheticParams):
        return generate_synthetic(ds, seed=cell_seed(config.master_seed, "dataset"))
    instances = read_cifar_binary(ds.path, ds.classes, ds.cap)
    rng = np.random.default_rng(cell_seed(config.master_seed, "dataset"))
    return stratified_split(instances, ds.split, rng)


def clean_reference(pool, test_set, train_cfg: TrainConfig, master_seed: int):
    """Full-pool ground-truth model and its test accuracy."""
    pairs = [(inst, inst.true_label) for inst in pool]
    model = train(pairs, train_cfg, seed=cell_seed(master_seed, "reference"))
    acc = accuracy(model, [(t, t.true_label) for t in test_set])
    return model, acc


def _resolve_target(config: ExperimentConfig, reference_accuracy: float) -> float:
    if config.target_accuracy is not None:
        return config.target_accuracy
    return reference_accuracy - 0.01


def _loop_config_with_target(config: ExperimentConfig, target: float) -> LoopConfig:
    defense = replace(config.loop.defense, target_accuracy=target)
    return replace(config.loop, defense=defense)


def _run_cell(args):
    """One (seed_index, arm) run; module-level so worker processes can call it."""
    (config, loop_cfg, pool, reserve, test_set, seed_index, arm) = args
    workforce = build_workforce(config.workforce,
                                malicious=config.attack == "mislabel")
    seed = cell_seed(config.master_seed, seed_index, arm)
    history = run_loop(pool, reserve, test_set, workforce, loop_cfg, arm, seed)
    row = {
        "seed": seed_index,
        "arm": arm,
        "budget_used": history.budget_used,
        "terminal_test_accuracy": history.terminal_accuracy_test,
        "stop_reason": history.stop_reason,
        "relabel_events": history.relabel_events,
        "discarded_points": history.discarded_points,
        "pool_consumed": history.pool_consumed,
        "terminal_secured_accuracy": history.terminal_accuracy_secured,
        "cell_seed": seed,
    }
    return row, history.records


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run every (seed, arm) cell and aggregate labeling-budget statistics."""
    t0 = time.perf_counter()
    pool, reserve, test_set = load_dataset(config)
    _, ref_acc = clean_reference(pool, test_set, config.loop.train,
                                 config.master_seed)
    target = _resolve_target(config, ref_acc)
    loop_cfg = _loop_config_with_target(config, target)

    cells = [(idx, arm) for idx in range(config.n_seeds) for arm in config.arms]
    args = [(config, loop_cfg, pool, reserve, test_set, idx, arm)
            for idx, arm in cells]
    rows, traces, errors = [], {}, []
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool_exec:
            outcomes = list(pool_exec.map(_run_cell_safe, args))
    else:
        outcomes = [_run_cell_safe(a) for a in args]
    for (idx, arm), outcome in zip(cells, outcomes):
        if "error" in outcome:
            errors.append({"seed": idx, "arm": arm, "error": outcome["error"]})
        else:
            rows.append(outcome["row"])
            traces[(idx, arm)] = outcome["records"]

    rows.sort(key=lambda r: (r["seed"], r["arm"]))
    stats = {arm: budget_stats([r["budget_used"] for r in rows if r["arm"] == arm])
             for arm in config.arms}
    failures = {arm: sum(1 for r in rows
                         if r["arm"] == arm and r["stop_reason"] != "accuracy")
                for arm in config.arms}
    return ExperimentReport(
        config=config_to_dict(config), clean_reference=ref_acc,
        target_accuracy=target, rows=rows, stats=stats, failures=failures,
        errors=errors, runtime_seconds=time.perf_counter() - t0, traces=traces)


def _run_cell_safe(args):
    try:
        row, records = _run_cell(args)
        return {"row": row, "records": records}
    except Exception as exc:  # carried into the report, run continues
        return {"error": f"{type(exc).__name__}: {exc}"}


def budget_stats(values) -> dict:
    if not values:
        return {}
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        "min": float(arr.min()),
        "p25": float(np.percentile(arr, 25)),
        "p50": float(np.percentile(arr, 50)),
        "p75": float(np.percentile(arr, 75)),
        "max": float(arr.max()),
    }


def run_poison_campaign(config: ExperimentConfig) -> CampaignReport:
    """Per-target poison injection runs against each arm.

    Targets are the first correctly classified test instances; bases are the
    first pool instances of the opposite class. Poisons are crafted against
    the clean reference model, injected into the pool with their base-class
    labels, and judged successful iff the arm's final model classifies the
    target as the attacker's class. Only successful poison sets enter the
    saved corpus.
    """
    t0 = time.perf_counter()
    pc = config.poison
    pool, reserve, test_set = load_dataset(config)
    ref_model, ref_acc = clean_reference(pool, test_set, config.loop.train,
                                         config.master_seed)
    target_acc = _resolve_target(config, ref_acc)
    loop_cfg = _loop_config_with_target(config, target_acc)

    targets = [t for t in test_set
               if predict(ref_model, t).predicted == t.true_label][:pc.n_targets]
    next_id = max(inst.id for split in (pool, reserve, test_set)
                  for inst in split) + 1
    poison_sets: dict[int, list] = {}
    base_sets: dict[int, list] = {}
    for tgt in targets:
        bases = [p for p in pool if p.true_label != tgt.true_label][:pc.per_target]
        crafted = []
        for base in bases:
            spec = PoisonSpec(target=tgt, base=base, beta=pc.beta,
                              watermark=pc.watermark, max_iters=pc.max_iters,
                              step=pc.step)
            poison, _ = craft_poison(ref_model, spec, instance_id=next_id)
            next_id += 1
            crafted.append(poison)
        poison_sets[tgt.id] = crafted
        base_sets[tgt.id] = bases

    rows, errors, corpus = [], [], []
    per_arm: dict[str, dict] = {}
    for arm in config.arms:
        workforce = build_workforce(config.workforce, malicious=False)
        clean_run = run_loop(pool, reserve, test_set, workforce, loop_cfg, arm,
                             cell_seed(config.master_seed, "campaign-clean", arm))
        no_attack_acc = clean_run.terminal_accuracy_test
        successes = 0
        clean_accs = []
        for k, tgt in enumerate(targets):
            goal = base_sets[tgt.id][0].true_label
            try:
                workforce = build_workforce(config.workforce, malicious=False)
                poisoned_pool = pool + poison_sets[tgt.id]
                hist = run_loop(poisoned_pool, reserve, test_set, workforce,
                                loop_cfg, arm,
                                cell_seed(config.master_seed, "campaign", k, arm))
            except Exception as exc:
                errors.append({"arm": arm, "target": tgt.id,
                               "error": f"{type(exc).__name__}: {exc}"})
                continue
            poison_ids = {p.id for p in poison_sets[tgt.id]}
            bought = _ids_bought(hist.events)
            success = poison_attack_success(hist.final_model, tgt, goal)
            clean_ok = hist.terminal_accuracy_test >= ref_acc - 0.02
            clean_accs.append(hist.terminal_accuracy_test)
            successes += int(success and clean_ok)
            rows.append({
                "arm": arm, "target": tgt.id, "target_class": tgt.true_label,
                "goal": goal, "success": success, "clean_ok": clean_ok,
                "clean_accuracy": hist.terminal_accuracy_test,
                "budget_used": hist.budget_used,
                "stop_reason": hist.stop_reason,
                "poisons_injected": len(poison_ids),
                "poisons_labeled": len(poison_ids & bought),
            })
            if success and clean_ok and arm == "baseline":
                corpus.append({"target": tgt.id,
                               "poison_ids": sorted(poison_ids),
                               "base_ids": [b.id for b in base_sets[tgt.id]]})
        per_arm[arm] = {
            "verified_successes": successes,
            "targets": len(targets),
            "mean_clean_accuracy": float(np.mean(clean_accs)) if clean_accs else None,
            "no_attack_accuracy": no_attack_acc,
        }
    return CampaignReport(
        config=config_to_dict(config), clean_reference=ref_acc,
        target_accuracy=target_acc, rows=rows, per_arm=per_arm, corpus=corpus,
        errors=errors, runtime_seconds=time.perf_counter() - t0)


def _ids_bought(events) -> set[int]:
    bought = set()
    for ev in events:
        if ev["kind"] == "seeded" or ev["kind"] == "queried":
            bought.update(ev["ids"])
    return bought


# ---------------------------------------------------------------------------
# report emission


def emit_reports(report: ExperimentReport, out_dir, formats=("csv", "json"),
                 traces: bool = False) -> list[Path]:
    """Write rows.csv, summary.json, and optional per-cell iteration traces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = out / "rows.csv"
        _write_rows_csv(path, report.rows)
        written.append(path)
    if "json" in formats:
        path = out / "summary.json"
        payload = {
            "config": report.config,
            "clean_reference": report.clean_reference,
            "target_accuracy": report.target_accuracy,
            "stats": report.stats,
            "failures_to_reach_target": report.failures,
            "rows": report.rows,
            "errors": report.errors,
            "runtime_seconds": report.runtime_seconds,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
        written.append(path)
    if traces and getattr(report, "traces", None):
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
        for (idx, arm), records in report.traces.items():
            path = trace_dir / f"trace_{arm}_{idx}.jsonl"
            with open(path, "w") as fh:
                for rec in records:
                    fh.write(json.dumps(rec) + "\n")
            written.append(path)
    return written


def emit_campaign_reports(report: CampaignReport, out_dir,
                          formats=("csv", "json")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = out / "campaign.csv"
        cols = ("arm", "target", "target_class", "goal", "success", "clean_ok",
                "clean_accuracy", "budget_used", "stop_reason",
                "poisons_injected", "poisons_labeled")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            writer.writeheader()
            for row in report.rows:
                writer.writerow(row)
        written.append(path)
    if "json" in formats:
        path = out / "campaign.json"
        payload = asdict(report)
        path.write_text(json.dumps(payload, indent=2) + "\n")
        written.append(path)
    return written


def _write_rows_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_rows_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append({
                "seed": int(raw["seed"]),
                "arm": raw["arm"],
                "budget_used": int(raw["budget_used"]),
                "terminal_test_accuracy": float(raw["terminal_test_accuracy"]),
                "stop_reason": raw["stop_reason"],
                "relabel_events": int(raw["relabel_events"]),
                "discarded_points": int(raw["discarded_points"]),
            })
    return rows


def summarize_rows(rows) -> dict:
    """Table-style budget statistics recomputed from raw rows."""
    arms = sorted({r["arm"] for r in rows})
    return {
        "stats": {arm: budget_stats([r["budget_used"] for r in rows
                                     if r["arm"] == arm]) for arm in arms},
        "failures_to_reach_target": {
            arm: sum(1 for r in rows
                     if r["arm"] == arm and r["stop_reason"] != "accuracy")
            for arm in arms},
    }


def report_from_directory(in_dir, formats=("csv", "json")) -> list[Path]:
    """Recompute summary statistics from rows.csv left by a previous run."""
    in_path = Path(in_dir)
    rows = read_rows_csv(in_path / "rows.csv")
    summary = summarize_rows(rows)
    written = []
    if "json" in formats:
        path = in_path / "report.json"
        path.write_text(json.dumps(summary, indent=2) + "\n")
        written.append(path)
    if "csv" in formats:
        path = in_path / "report.csv"
        arms = sorted(summary["stats"])
        fields = ("mean", "std", "min", "p25", "p50", "p75", "max")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("arm", *fields, "failures_to_reach_target"))
            for arm in arms:
                st = summary["stats"][arm]
                writer.writerow((arm, *(st[f] for f in fields),
                                 summary["failures_to_reach_target"][arm]))
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# configuration files


def _augmentation_from_json(entries):
    specs = []
    for entry in entries:
        if isinstance(entry, str):
            entry = {"method": entry}
        method = entry.get("method")
        kwargs = {k: v for k, v in entry.items() if k != "method"}
        if "clip" in kwargs and kwargs["clip"] is not None:
            kwargs["clip"] = tuple(kwargs["clip"])
        if method == "pgd":
            specs.append(PgdSpec(**kwargs))
        elif method == "deepfool":
            specs.append(DeepfoolSpec(**kwargs))
        elif method == "gaussian":
            specs.append(GaussianSpec(**kwargs))
        else:
            raise ValueError(f"unknown augmentation method {method!r}")
    return tuple(specs)


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    ds_doc = dict(doc.pop("dataset", {"kind": "synthetic"}))
    kind = ds_doc.pop("kind", "synthetic")
    if kind == "synthetic":
        dataset = SyntheticParams(**ds_doc)
    elif kind == "cifar":
        if "classes" in ds_doc:
            ds_doc["classes"] = tuple(ds_doc["classes"])
        if "split" in ds_doc:
            ds_doc["split"] = tuple(ds_doc["split"])
        dataset = CifarConfig(**ds_doc)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")

    loop_doc = dict(doc.pop("loop", {}))
    train_doc = dict(loop_doc.pop("train", {}))
    if "hidden" in train_doc:
        train_doc["hidden"] = tuple(train_doc["hidden"])
    defense_doc = dict(loop_doc.pop("defense", {}))
    if "augmentation" in defense_doc:
        defense_doc["augmentation"] = _augmentation_from_json(
            defense_doc["augmentation"])
    if "cluster_range" in loop_doc:
        loop_doc["cluster_range"] = tuple(loop_doc["cluster_range"])
    loop_cfg = LoopConfig(train=TrainConfig(**train_doc),
                          defense=DefenseConfig(**defense_doc), **loop_doc)

    workforce = WorkforceConfig(**doc.pop("workforce", {}))
    poison = PoisonCampaignConfig(**doc.pop("poison", {}))
    if "arms" in doc:
        doc["arms"] = tuple(doc["arms"])
    if "seeds" in doc:
        doc["n_seeds"] = doc.pop("seeds")
    if "out" in doc:
        doc["out_dir"] = doc.pop("out")
    return ExperimentConfig(dataset=dataset, workforce=workforce,
                            loop=loop_cfg, poison=poison, **doc)


def config_from_file(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def config_to_dict(config: ExperimentConfig) -> dict:
    doc = asdict(config)
    ds = doc["dataset"]
    ds["kind"] = "synthetic" if isinstance(config.dataset, SyntheticParams) else "cifar"
    doc["loop"]["defense"]["augmentation"] = [
        {"method": type(s).__name__.replace("Spec", "").lower(), **asdict(s)}
        for s in config.loop.defense.augmentation]
    return doc
