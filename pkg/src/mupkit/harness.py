"""Experiment orchestration: transfer matrices, ratio sweeps, ablations.

Every run is a pure function of (models, dataset, configs): reports embed
sha256 fingerprints of all inputs and no timestamps, so rerunning a
committed experiment reproduces the report byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import container, model_zoo
from .attacks import AdvResult, AttackConfig, run_attack
from .nn_core import Batch, Network, ShapeError, forward

SCHEMA_VERSION = 1


class AccuracyGuardError(RuntimeError):
    """A victim model failed the clean-accuracy floor; rates against it
    would be meaningless."""


_EVAL_STREAM = 0xE7A1


@dataclass(frozen=True)
class EvalConfig:
    eval_count: int = 500
    attack_batch_size: int = 50
    accuracy_floor: float = 0.7
    eval_seed: int | None = None  # None: leading test examples

    def __post_init__(self):
        if self.eval_count < 1 or self.attack_batch_size < 1:
            raise ValueError("eval_count and attack_batch_size must be positive")
        if not 0.0 <= self.accuracy_floor <= 1.0:
            raise ValueError(f"accuracy_floor must be in [0, 1], got {self.accuracy_floor}")


def eval_batch(dataset: model_zoo.Dataset, count: int, seed: int | None = None) -> Batch:
    """Evaluation inputs drawn from the test split.

    With seed=None, the first `count` examples (the split is stored
    pre-shuffled). A seed draws a subset without replacement instead; paired
    runs that vary only this seed give honest repeats even for attacks that
    consume no randomness of their own.
    """
    n = min(count, len(dataset.test))
    if seed is None:
        return Batch(dataset.test.images[:n], dataset.test.labels[:n])
    rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_STREAM]))
    idx = np.sort(rng.choice(len(dataset.test), size=n, replace=False))
    return Batch(dataset.test.images[idx], dataset.test.labels[idx])


def verify_ball(clean: np.ndarray, adv: np.ndarray, eps: float) -> bool:
    """Independent recheck of the perturbation contract; deliberately uses
    nothing from the attack module."""
    if clean.shape != adv.shape:
        return False
    return bool(
        np.all(np.abs(adv - clean) <= eps)
        and adv.min() >= 0.0
        and adv.max() <= 255.0
    )


def run_attack_chunked(net: Network, batch: Batch, cfg: AttackConfig,
                       chunk_size: int) -> AdvResult:
    """run_attack over fixed-size chunks, merged into one AdvResult.

    Chunking bounds peak memory for the stacked-copy inner gradients.
    Importance masks are computed per chunk, so chunk_size is part of the
    experiment configuration, not a free performance knob.
    """
    n = len(batch)
    if chunk_size >= n:
        return run_attack(net, batch, cfg)
    parts = []
    for start in range(0, n, chunk_size):
        sub = Batch(batch.images[start : start + chunk_size],
                    batch.labels[start : start + chunk_size])
        parts.append(run_attack(net, sub, cfg, example_offset=start))
    return AdvResult(
        clean=np.concatenate([p.clean for p in parts]),
        adversarial=np.concatenate([p.adversarial for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        whitebox_success=np.concatenate([p.whitebox_success for p in parts]),
        loss_trace=np.concatenate([p.loss_trace for p in parts], axis=1),
        config=cfg,
    )


# --------------------------------------------------------------------------
# Success accounting


@dataclass(frozen=True)
class SuccessStats:
    rate: float  # fraction with victim top-1 != label
    rate_clean_correct: float  # same, restricted to clean-correct examples
    clean_accuracy: float


def _outcomes(victim: Network, adv: AdvResult, labels: np.ndarray):
    if labels.max() >= victim.num_classes:
        raise ShapeError(
            f"labels reach class {labels.max()} but victim has {victim.num_classes}"
        )
    clean_correct = forward(victim, adv.clean).argmax(axis=1) == labels
    fooled = forward(victim, adv.adversarial).argmax(axis=1) != labels
    return fooled, clean_correct


def evaluate_success(victim: Network, adv: AdvResult, labels=None) -> SuccessStats:
    """Untargeted success: victim top-1 differs from the ground truth.

    Also reported: the rate restricted to examples the victim classified
    correctly when clean, and that clean accuracy itself.
    """
    labels = adv.labels if labels is None else np.asarray(labels, dtype=np.int64)
    fooled, clean_correct = _outcomes(victim, adv, labels)
    restricted = float(fooled[clean_correct].mean()) if clean_correct.any() else 0.0
    return SuccessStats(
        rate=float(fooled.mean()),
        rate_clean_correct=restricted,
        clean_accuracy=float(clean_correct.mean()),
    )


def _guard_accuracy(zoo: dict[str, Network], batch: Batch, floor: float) -> dict[str, float]:
    accs = {}
    for name, net in zoo.items():
        acc = float((forward(net, batch.images).argmax(axis=1) == batch.labels).mean())
        if acc < floor:
            raise AccuracyGuardError(
                f"model {name!r} clean accuracy {acc:.3f} is below the floor {floor}"
            )
        accs[name] = acc
    return accs


def _fingerprints(zoo: dict[str, Network], dataset: model_zoo.Dataset) -> dict[str, str]:
    prints = {"dataset": container.fingerprint(model_zoo.save_dataset(dataset))}
    for name, net in zoo.items():
        prints[f"model:{name}"] = container.fingerprint(model_zoo.save(net))
    return prints


# --------------------------------------------------------------------------
# Transfer matrix


@dataclass(frozen=True)
class TransferCell:
    surrogate: str
    victim: str
    method: str
    whitebox: bool  # surrogate == victim; excluded from transfer averages
    stats: SuccessStats
    outcomes: np.ndarray  # bool [B], per-example fooled flags
    ratio: float
    metric: str
    masking: str


@dataclass(frozen=True)
class TransferReport:
    cells: tuple[TransferCell, ...]
    transfer_averages: dict  # method -> {"overall": x, "per_surrogate": {...}}
    clean_accuracy: dict
    fingerprints: dict
    config: dict
    eval_count: int


def _method_columns(cfg: AttackConfig):
    metric = cfg.mup_metric if cfg.masking == "mup" else ""
    ratio = cfg.mup_ratio if cfg.masking == "mup" else 0.0
    return ratio, metric, cfg.masking


def transfer_matrix(zoo: dict[str, Network], dataset: model_zoo.Dataset,
                    methods: dict[str, AttackConfig],
                    cfg: EvalConfig = EvalConfig()) -> TransferReport:
    """For every (surrogate, method): craft once, evaluate on every victim.

    White-box diagonal cells are kept in the grid but flagged and left out
    of the per-method transfer averages.
    """
    if len(zoo) < 2:
        raise ValueError("need at least 2 models for a transfer matrix")
    batch = eval_batch(dataset, cfg.eval_count, cfg.eval_seed)
    accs = _guard_accuracy(zoo, batch, cfg.accuracy_floor)

    cells = []
    averages = {}
    for method_name, acfg in methods.items():
        per_surrogate = {}
        for s_name, s_net in zoo.items():
            adv = run_attack_chunked(s_net, batch, acfg, cfg.attack_batch_size)
            transfer_rates = []
            for v_name, v_net in zoo.items():
                fooled, clean_correct = _outcomes(v_net, adv, batch.labels)
                restricted = float(fooled[clean_correct].mean()) if clean_correct.any() else 0.0
                stats = SuccessStats(float(fooled.mean()), restricted, accs[v_name])
                ratio, metric, masking = _method_columns(acfg)
                cells.append(TransferCell(
                    surrogate=s_name, victim=v_name, method=method_name,
                    whitebox=s_name == v_name, stats=stats, outcomes=fooled,
                    ratio=ratio, metric=metric, masking=masking,
                ))
                if s_name != v_name:
                    transfer_rates.append(stats.rate)
            per_surrogate[s_name] = float(np.mean(transfer_rates))
        averages[method_name] = {
            "overall": float(np.mean(list(per_surrogate.values()))),
            "per_surrogate": per_surrogate,
        }

    return TransferReport(
        cells=tuple(cells),
        transfer_averages=averages,
        clean_accuracy=accs,
        fingerprints=_fingerprints(zoo, dataset),
        config={
            "eval": asdict(cfg),
            "methods": {name: asdict(a) for name, a in methods.items()},
        },
        eval_count=len(batch),
    )


# --------------------------------------------------------------------------
# Ratio sweep


@dataclass(frozen=True)
class SweepSample:
    ratio: float
    mean_rate: float
    per_victim: dict


@dataclass(frozen=True)
class SweepCurve:
    surrogate: str
    method: str
    samples: tuple[SweepSample, ...]

    def __post_init__(self):
        ratios = [s.ratio for s in self.samples]
        if not ratios or ratios[0] != 0.0:
            raise ValueError("sweep must start at ratio 0 (the baseline anchor)")
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise ValueError(f"sweep ratios must be strictly increasing, got {ratios}")

    @property
    def ratios(self) -> list[float]:
        return [s.ratio for s in self.samples]

    @property
    def rates(self) -> list[float]:
        return [s.mean_rate for s in self.samples]


def ratio_sweep(surrogate: str, zoo: dict[str, Network], dataset: model_zoo.Dataset,
                r_values, base: AttackConfig,
                cfg: EvalConfig = EvalConfig()) -> SweepCurve:
    """Mean transfer rate from one surrogate as the masking ratio varies.

    Clean inputs and all RNG seeds are shared across ratios, so the curve
    differences come from the mask alone; the r=0 point reproduces the
    unmasked baseline bitwise.
    """
    r_values = [float(r) for r in r_values]
    if not r_values or r_values[0] != 0.0:
        raise ValueError("r_values must start at 0")
    if any(b <= a for a, b in zip(r_values, r_values[1:])):
        raise ValueError(f"r_values must be strictly increasing, got {r_values}")
    if surrogate not in zoo:
        raise ValueError(f"surrogate {surrogate!r} not in zoo")
    victims = {n: m for n, m in zoo.items() if n != surrogate}
    if not victims:
        raise ValueError("no victims besides the surrogate")

    batch = eval_batch(dataset, cfg.eval_count, cfg.eval_seed)
    _guard_accuracy(zoo, batch, cfg.accuracy_floor)

    samples = []
    for r in r_values:
        acfg = replace(base, masking="mup", mup_ratio=r)
        adv = run_attack_chunked(zoo[surrogate], batch, acfg, cfg.attack_batch_size)
        per_victim = {}
        for v_name, v_net in victims.items():
            fooled, _ = _outcomes(v_net, adv, batch.labels)
            per_victim[v_name] = float(fooled.mean())
        samples.append(SweepSample(r, float(np.mean(list(per_victim.values()))), per_victim))
    return SweepCurve(surrogate=surrogate, method=base.inner, samples=tuple(samples))


# --------------------------------------------------------------------------
# Metric ablation


@dataclass(frozen=True)
class AblationRow:
    label: str  # "none" | "taylor" | "magnitude"
    mean_rate: float
    per_victim: dict
    config: dict
    optimizer_fingerprint: str  # config hash with the masking fields held out


@dataclass(frozen=True)
class AblationReport:
    surrogate: str
    ratio: float
    rows: tuple[AblationRow, ...]
    fingerprints: dict


_MASKING_FIELDS = ("masking", "mup_ratio", "mup_metric")


def _optimizer_fingerprint(acfg: AttackConfig) -> str:
    shared = {k: v for k, v in asdict(acfg).items() if k not in _MASKING_FIELDS}
    return container.fingerprint(json.dumps(shared, sort_keys=True).encode())


def metric_ablation(surrogate: str, zoo: dict[str, Network], dataset: model_zoo.Dataset,
                    base: AttackConfig, ratio: float,
                    cfg: EvalConfig = EvalConfig()) -> AblationReport:
    """Side-by-side rates for no masking vs both importance metrics at the
    same ratio, under one optimizer and one set of seeds."""
    if surrogate not in zoo:
        raise ValueError(f"surrogate {surrogate!r} not in zoo")
    victims = {n: m for n, m in zoo.items() if n != surrogate}
    if not victims:
        raise ValueError("no victims besides the surrogate")
    batch = eval_batch(dataset, cfg.eval_count, cfg.eval_seed)
    _guard_accuracy(zoo, batch, cfg.accuracy_floor)

    variants = {
        "none": replace(base, masking="none"),
        "taylor": replace(base, masking="mup", mup_ratio=ratio, mup_metric="taylor"),
        "magnitude": replace(base, masking="mup", mup_ratio=ratio, mup_metric="magnitude"),
    }
    rows = []
    for label, acfg in variants.items():
        adv = run_attack_chunked(zoo[surrogate], batch, acfg, cfg.attack_batch_size)
        per_victim = {}
        for v_name, v_net in victims.items():
            fooled, _ = _outcomes(v_net, adv, batch.labels)
            per_victim[v_name] = float(fooled.mean())
        rows.append(AblationRow(
            label=label,
            mean_rate=float(np.mean(list(per_victim.values()))),
            per_victim=per_victim,
            config=asdict(acfg),
            optimizer_fingerprint=_optimizer_fingerprint(acfg),
        ))
    return AblationReport(
        surrogate=surrogate, ratio=float(ratio), rows=tuple(rows),
        fingerprints=_fingerprints(zoo, dataset),
    )


# --------------------------------------------------------------------------
# Report emission (JSON + CSV, no timestamps)

CSV_COLUMNS = ("surrogate", "victim", "method", "masking", "metric", "ratio",
               "whitebox", "clean_accuracy", "rate", "rate_clean_correct")


def transfer_report_json(report: TransferReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "transfer",
        "eval_count": report.eval_count,
        "config": report.config,
        "fingerprints": report.fingerprints,
        "clean_accuracy": report.clean_accuracy,
        "transfer_averages": report.transfer_averages,
        "cells": [
            {
                "surrogate": c.surrogate, "victim": c.victim, "method": c.method,
                "masking": c.masking, "metric": c.metric, "ratio": c.ratio,
                "whitebox": c.whitebox, "rate": c.stats.rate,
                "rate_clean_correct": c.stats.rate_clean_correct,
                "clean_accuracy": c.stats.clean_accuracy,
                "outcomes": [int(o) for o in c.outcomes],
            }
            for c in report.cells
        ],
    }


def transfer_report_csv(report: TransferReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(CSV_COLUMNS)
    for c in report.cells:
        writer.writerow([
            c.surrogate, c.victim, c.method, c.masking, c.metric,
            f"{c.ratio:g}", int(c.whitebox), f"{c.stats.clean_accuracy:.6f}",
            f"{c.stats.rate:.6f}", f"{c.stats.rate_clean_correct:.6f}",
        ])
    return out.getvalue()


def sweep_json(curve: SweepCurve, fingerprints: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "sweep",
        "surrogate": curve.surrogate,
        "method": curve.method,
        "fingerprints": fingerprints or {},
        "samples": [
            {"ratio": s.ratio, "mean_rate": s.mean_rate, "per_victim": s.per_victim}
            for s in curve.samples
        ],
    }


def sweep_csv(curve: SweepCurve) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(("surrogate", "victim", "ratio", "rate"))
    for s in curve.samples:
        for victim, rate in s.per_victim.items():
            writer.writerow([curve.surrogate, victim, f"{s.ratio:g}", f"{rate:.6f}"])
    return out.getvalue()


def ablation_json(report: AblationReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "ablation",
        "surrogate": report.surrogate,
        "ratio": report.ratio,
        "fingerprints": report.fingerprints,
        "rows": [
            {
                "label": r.label, "mean_rate": r.mean_rate, "per_victim": r.per_victim,
                "config": r.config, "optimizer_fingerprint": r.optimizer_fingerprint,
            }
            for r in report.rows
        ],
    }


def ablation_csv(report: AblationReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(("surrogate", "victim", "label", "ratio", "rate"))
    for r in report.rows:
        for victim, rate in r.per_victim.items():
            writer.writerow([report.surrogate, victim, r.label, f"{report.ratio:g}", f"{rate:.6f}"])
    return out.getvalue()


# --------------------------------------------------------------------------
# Adversarial-batch containers


def save_adv(result: AdvResult) -> bytes:
    meta = {
        "format": "adv",
        "schema_version": SCHEMA_VERSION,
        "config": asdict(result.config),
    }
    tensors = {
        "clean": result.clean,
        "adversarial": result.adversarial,
        "labels": result.labels.astype(np.float64),
        "loss_trace": result.loss_trace,
        "whitebox_success": result.whitebox_success.astype(np.float64),
    }
    return container.pack(meta, tensors)


def load_adv(data: bytes) -> AdvResult:
    meta, tensors = container.unpack(data)
    if meta.get("format") != "adv":
        raise container.ContainerError(f"not an adv container: {meta.get('format')!r}")
    return AdvResult(
        clean=tensors["clean"],
        adversarial=tensors["adversarial"],
        labels=tensors["labels"].astype(np.int64),
        whitebox_success=tensors["whitebox_success"].astype(bool),
        loss_trace=tensors["loss_trace"],
        config=AttackConfig(**meta["config"]),
    )
