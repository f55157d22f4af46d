"""Weighted sampling, patient-level stratified folds and the early-stopped MIL loop."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from milgrade.errors import ContractError, NumericError
from milgrade.model import Bag, MilConfig, MilParams, init_params, mil_loss, mil_loss_and_grad
from milgrade.numerics import AdamState, adam_update_

IMPROVEMENT_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ContractError("batch_size, max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ContractError("patience must not exceed max_epochs")
        if not 0 < self.val_fraction < 1:
            raise ContractError("val_fraction must lie in (0, 1)")

    @classmethod
    def probe(cls, **kw) -> "TrainConfig":
        """Patch-probe defaults: lr 1e-5, batch 8, patience 15."""
        base = dict(learning_rate=1e-5, batch_size=8, patience=15)
        base.update(kw)
        return cls(**base)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    best_epoch: int


def logs_csv(logs: Sequence[EpochLog]) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e.epoch},{e.train_loss!r},{e.val_loss!r}" for e in logs]
    return "\n".join(lines) + "\n"


def weighted_sample_indices(labels: Sequence[int], n_draws: int, seed) -> np.ndarray:
    """I.i.d. draws with replacement, P(i) proportional to 1 / count(class of i)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("cannot sample from an empty label list")
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    w = 1.0 / counts[inverse]
    rng = np.random.default_rng(seed)
    return rng.choice(labels.size, size=n_draws, replace=True, p=w / w.sum())


# ---------------------------------------------------------------- fold plans


@dataclass
class Fold:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]
    folds: list[Fold] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "folds": [
                    {"fold": i, "train": f.train_ids, "val": f.val_ids, "test": f.test_ids}
                    for i, f in enumerate(self.folds)
                ],
            },
            indent=1,
        )


def _patient_groups(records):
    slides = defaultdict(list)
    labels = defaultdict(list)
    for r in records:
        if r.label is None:
            raise ContractError(f"slide {r.slide_id} has no label")
        if not r.patient_id:
            raise ContractError(f"slide {r.slide_id} has no patient_id")
        slides[r.patient_id].append(r.slide_id)
        labels[r.patient_id].append(int(r.label))
    patient_class = {}
    for p, labs in labels.items():
        vals, counts = np.unique(labs, return_counts=True)
        patient_class[p] = int(vals[np.argmax(counts)])
    return {p: sorted(s) for p, s in slides.items()}, patient_class


def stratified_patient_folds(records, k: int = 5, seed: int = 0, val_fraction: float = 0.25) -> FoldPlan:
    """Patients are dealt per class to the folds holding the fewest patients of that class.

    Ties go to the fold with fewer slides, then to a seeded fold order. For
    single-slide patients this is a round-robin deal and fold class counts
    differ by at most one. The plan depends only on the record set, not its order.
    """
    if k < 2:
        raise ContractError("k must be >= 2")
    slides, pclass = _patient_groups(records)
    patients = sorted(slides)
    if k > len(patients):
        raise ContractError(f"k={k} exceeds the number of patients ({len(patients)})")
    rng = np.random.default_rng(seed)
    fold_rank = rng.permutation(k)
    classes = sorted(set(pclass.values()))

    class_count = np.zeros((max(classes) + 1, k), dtype=np.int64)
    slide_count = np.zeros(k, dtype=np.int64)
    fold_of_patient = {}
    for c in classes:
        group = [p for p in patients if pclass[p] == c]
        group = [group[i] for i in rng.permutation(len(group))]
        # larger patients first so multiplicity is balanced greedily; stable keeps the shuffle
        group.sort(key=lambda p: -len(slides[p]))
        for p in group:
            f = min(range(k), key=lambda j: (class_count[c, j], slide_count[j], fold_rank[j]))
            fold_of_patient[p] = f
            class_count[c, f] += 1
            slide_count[f] += len(slides[p])

    assignments = {s: fold_of_patient[p] for p in patients for s in slides[p]}
    plan = FoldPlan(k=k, assignments=assignments)
    for f in range(k):
        rest = [p for p in patients if fold_of_patient[p] != f]
        val_patients = _stratified_val(rest, pclass, val_fraction, np.random.default_rng([seed, f]))
        test = sorted(s for p in patients if fold_of_patient[p] == f for s in slides[p])
        val = sorted(s for p in val_patients for s in slides[p])
        train = sorted(s for p in rest if p not in val_patients for s in slides[p])
        plan.folds.append(Fold(train, val, test))
    return plan


def _stratified_val(patients, pclass, val_fraction, rng) -> set:
    by_class = defaultdict(list)
    for p in patients:
        by_class[pclass[p]].append(p)
    val = set()
    for c in sorted(by_class):
        group = by_class[c]
        group = [group[i] for i in rng.permutation(len(group))]
        n_val = min(int(np.floor(val_fraction * len(group) + 0.5)), len(group) - 1)
        val.update(group[:n_val])
    if not val and len(patients) >= 2:
        largest = max(sorted(by_class), key=lambda c: len(by_class[c]))
        val.add(sorted(by_class[largest])[0])
    return val


def train_val_split(records, val_fraction: float = 0.25, seed: int = 0) -> tuple[list[str], list[str]]:
    """Patient-level stratified train/val split of a whole cohort (no test fold)."""
    slides, pclass = _patient_groups(records)
    patients = sorted(slides)
    if len(patients) < 2:
        raise ContractError("need at least two patients for a train/val split")
    val_patients = _stratified_val(patients, pclass, val_fraction, np.random.default_rng(seed))
    train = sorted(s for p in patients if p not in val_patients for s in slides[p])
    val = sorted(s for p in val_patients for s in slides[p])
    return train, val


# ---------------------------------------------------------------- MIL training


def mean_loss(params: MilParams, bags: Sequence[Bag]) -> float:
    return float(np.mean([mil_loss(params, b) for b in bags]))


def train_mil(
    train_bags: Sequence[Bag],
    val_bags: Sequence[Bag],
    config: MilConfig,
    tcfg: TrainConfig = TrainConfig(),
    init: Optional[MilParams] = None,
) -> tuple[MilParams, list[EpochLog]]:
    """Adam, one bag per step, weighted sampling, early stopping on mean validation loss.

    Epoch 0 is the untrained model, so the returned checkpoint is never worse
    on validation than the starting point.
    """
    if not train_bags or not val_bags:
        raise ContractError("train and validation bag sets must be non-empty")
    params = init.copy() if init is not None else init_params(config, tcfg.seed)
    states = {name: AdamState.zeros_like(a, learning_rate=tcfg.learning_rate) for name, a in params.blocks().items()}
    labels = [b.label for b in train_bags]

    val0 = check_finite(mean_loss(params, val_bags), 0, "validation set")
    train0 = mean_loss(params, train_bags)
    best, best_val, best_epoch = params.copy(), val0, 0
    ref_val, ref_epoch = val0, 0  # patience clock; only resets on > IMPROVEMENT_EPS gains
    logs = [EpochLog(0, train0, val0, 0)]

    for epoch in range(1, tcfg.max_epochs + 1):
        order = weighted_sample_indices(labels, len(train_bags), [tcfg.seed, epoch])
        losses = []
        for i in order:
            bag = train_bags[i]
            loss, grads = mil_loss_and_grad(params, bag)
            check_finite(loss, epoch, f"slide {bag.slide_id}")
            losses.append(loss)
            for name, p in params.blocks().items():
                adam_update_(p, getattr(grads, name), states[name])
        val = check_finite(mean_loss(params, val_bags), epoch, "validation set")
        if val < best_val:
            best, best_val, best_epoch = params.copy(), val, epoch
        if val < ref_val - IMPROVEMENT_EPS:
            ref_val, ref_epoch = val, epoch
        logs.append(EpochLog(epoch, float(np.mean(losses)), val, best_epoch))
        if epoch - ref_epoch >= tcfg.patience:
            break
    return best, logs


def check_finite(loss: float, epoch: int, where: str) -> float:
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at epoch {epoch} ({where})")
    return loss
