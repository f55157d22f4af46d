"""K-fold evaluation of the MIL head and the majority-vote baseline on held-out test folds."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from milgrade.baseline import majority_vote, probe_predict_bag, train_probe
from milgrade.errors import ContractError
from milgrade.io import UNLABELED
from milgrade.metrics import cohen_kappa, confusion, fold_summary, per_class_f1, weighted_f1
from milgrade.model import Bag, MilConfig, predict
from milgrade.training import EpochLog, FoldPlan, TrainConfig, stratified_patient_folds, train_mil

METHODS = ("abmil", "vote")
N_CLASSES = 5


@dataclass
class FoldResult:
    fold: int
    test_ids: list[str]
    y_true: list[int]
    y_pred: list[int]
    weighted_f1: float
    kappa: float
    per_class_f1: np.ndarray
    logs: list[EpochLog] = field(default_factory=list, repr=False)


@dataclass
class CVResult:
    method: str
    plan: FoldPlan
    folds: list[FoldResult]

    def summary(self) -> dict[str, tuple[float, float]]:
        return {
            "weighted_f1": fold_summary([f.weighted_f1 for f in self.folds]),
            "kappa": fold_summary([f.kappa for f in self.folds]),
        }


def worker_count(threads: Optional[int] = None) -> int:
    if threads is None:
        raw = os.environ.get("MILGRADE_THREADS", "").strip()
        threads = int(raw) if raw else 0
    return threads if threads > 0 else (os.cpu_count() or 1)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def evaluate_predictions(fold: int, test_ids, y_true, y_pred, logs=()) -> FoldResult:
    cm = confusion(y_true, y_pred, N_CLASSES)
    return FoldResult(
        fold=fold,
        test_ids=list(test_ids),
        y_true=list(y_true),
        y_pred=list(y_pred),
        weighted_f1=weighted_f1(cm),
        kappa=cohen_kappa(cm),
        per_class_f1=per_class_f1(cm),
        logs=list(logs),
    )


def labeled_patch_set(ids, by_id, labels_by_id):
    """Stack the labeled patches of the given slides; unlabeled (255) patches are skipped."""
    xs, ys = [], []
    for s in ids:
        lab = labels_by_id.get(s)
        if lab is None:
            continue
        keep = lab != UNLABELED
        xs.append(np.asarray(by_id[s].embeddings, dtype=np.float64)[keep])
        ys.append(lab[keep])
    if not xs:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def cross_validate(
    bags: Sequence[Bag],
    k: int = 5,
    config: Optional[MilConfig] = None,
    tcfg: TrainConfig = TrainConfig(),
    method: str = "abmil",
    patch_labels: Optional[Sequence[Optional[np.ndarray]]] = None,
    probe_cfg: Optional[TrainConfig] = None,
    threads: Optional[int] = None,
) -> CVResult:
    """Train per fold on its train split (early stopping on its val split), score its test split.

    ``method="vote"`` trains the patch probe on the train slides' labeled
    patches and needs ``patch_labels`` aligned with ``bags``.
    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    if not bags:
        raise ContractError("no bags to cross-validate")
    by_id = {b.slide_id: b for b in bags}
    if len(by_id) != len(bags):
        raise ContractError("duplicate slide ids")
    if config is None:
        config = MilConfig(input_dim=bags[0].embeddings.shape[1])
    labels_by_id = {}
    if method == "vote":
        if patch_labels is None:
            raise ContractError("majority-vote CV needs per-patch labels")
        labels_by_id = {b.slide_id: lab for b, lab in zip(bags, patch_labels)}
        probe_cfg = probe_cfg or TrainConfig.probe(seed=tcfg.seed)

    plan = stratified_patient_folds(bags, k, tcfg.seed, tcfg.val_fraction)

    def run(f: int) -> FoldResult:
        fold = plan.folds[f]
        test = [by_id[s] for s in fold.test_ids]
        y_true = [b.label for b in test]
        if method == "abmil":
            fcfg = replace(tcfg, seed=fold_seed(tcfg.seed, f))
            params, logs = train_mil([by_id[s] for s in fold.train_ids], [by_id[s] for s in fold.val_ids], config, fcfg)
            y_pred = [predict(params, b)[0] for b in test]
        else:
            fcfg = replace(probe_cfg, seed=fold_seed(probe_cfg.seed, f))
            probe, logs = train_probe(
                labeled_patch_set(fold.train_ids, by_id, labels_by_id), labeled_patch_set(fold.val_ids, by_id, labels_by_id), fcfg
            )
            y_pred = [majority_vote(probe_predict_bag(probe, b.embeddings, b.coords)) for b in test]
        return evaluate_predictions(f, fold.test_ids, y_true, y_pred, logs)

    # one BLAS thread per fold keeps every digit independent of the worker count
    with threadpool_limits(limits=1, user_api="blas"):
        workers = min(worker_count(threads), k)
        if workers == 1:
            results = [run(f) for f in range(k)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, range(k)))
    return CVResult(method, plan, results)
