from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pytest

from milgrade.cv import cross_validate
from milgrade.errors import ContractError, NumericError
from milgrade.model import MilConfig, init_params, predict
from milgrade.synth import SyntheticSpec, synth_generate
from milgrade.training import (
    TrainConfig,
    logs_csv,
    mean_loss,
    stratified_patient_folds,
    train_mil,
    train_val_split,
    weighted_sample_indices,
)

# chi-square critical values at p = 0.001
CHI2_001 = {1: 10.828, 4: 18.467}


@dataclass
class Rec:
    slide_id: str
    patient_id: str
    label: Optional[int]


def test_weighted_sampler_two_classes():
    labels = ["A", "A", "A", "B"]
    idx = weighted_sample_indices(labels, 100_000, seed=0)
    freq_b = np.mean(idx == 3)
    assert abs(freq_b - 0.5) <= 0.02
    counts = np.array([np.sum(idx != 3), np.sum(idx == 3)])
    chi2 = np.sum((counts - 50_000) ** 2 / 50_000)
    assert chi2 < CHI2_001[1]


def test_weighted_sampler_five_classes():
    counts = [59, 19, 9, 5, 51]
    labels = np.repeat(np.arange(5), counts)
    idx = weighted_sample_indices(labels, 100_000, seed=1)
    obs = np.bincount(labels[idx], minlength=5)
    assert np.all(np.abs(obs / 1e5 - 0.2) <= 0.02)
    assert np.sum((obs - 20_000) ** 2 / 20_000) < CHI2_001[4]
    # within a class the draw is uniform
    within = np.bincount(idx[labels[idx] == 3], minlength=len(labels))[labels == 3]
    assert within.min() > 0.8 * within.mean()


def test_weighted_sampler_single_class_and_determinism():
    idx = weighted_sample_indices([7] * 12, 120, seed=3)
    assert set(idx.tolist()) == set(range(12))
    np.testing.assert_array_equal(idx, weighted_sample_indices([7] * 12, 120, seed=3))
    assert not np.array_equal(idx, weighted_sample_indices([7] * 12, 120, seed=4))
    with pytest.raises(ContractError):
        weighted_sample_indices([], 3, 0)


def check_plan(plan, recs, k):
    by_id = {r.slide_id: r for r in recs}
    tests = [set(f.test_ids) for f in plan.folds]
    assert set().union(*tests) == set(by_id)
    assert sum(len(t) for t in tests) == len(by_id)
    patient_fold = defaultdict(set)
    for f, t in enumerate(tests):
        for s in t:
            patient_fold[by_id[s].patient_id].add(f)
    assert all(len(v) == 1 for v in patient_fold.values())
    for f, fold in enumerate(plan.folds):
        roles = [set(fold.train_ids), set(fold.val_ids), set(fold.test_ids)]
        assert set().union(*roles) == set(by_id) and sum(map(len, roles)) == len(by_id)
        pats = [{by_id[s].patient_id for s in r} for r in roles]
        assert not (pats[0] & pats[1] or pats[0] & pats[2] or pats[1] & pats[2])
        assert all(plan.assignments[s] == f for s in fold.test_ids)
    # per class, patient counts per fold differ by at most one
    pclass = {}
    for r in recs:
        pclass.setdefault(r.patient_id, r.label)
    for c in set(pclass.values()):
        per_fold = [sum(1 for p, fs in patient_fold.items() if pclass[p] == c and f in fs) for f in range(k)]
        assert max(per_fold) - min(per_fold) <= 1


def test_fold_example_ten_slides():
    recs = [Rec(f"s{c}{i}", f"p{c}{i}", c) for c in range(5) for i in range(2)]
    plan = stratified_patient_folds(recs, 5, seed=11)
    check_plan(plan, recs, 5)
    for fold in plan.folds:
        labels = [int(s[1]) for s in fold.test_ids]
        assert len(labels) == 2 and len(set(labels)) == 2


def test_fold_example_pigeonhole():
    recs = [Rec(f"a{i}", f"pa{i}", 2) for i in range(5)] + [Rec(f"b{i}", f"pb{i}", 0) for i in range(7)]
    plan = stratified_patient_folds(recs, 5, seed=0)
    for fold in plan.folds:
        assert sum(s.startswith("a") for s in fold.test_ids) == 1


@pytest.mark.parametrize("seed", range(25))
def test_fold_invariants_random_cohorts(seed):
    r = np.random.default_rng(seed)
    n_pat = int(r.integers(5, 40))
    recs = []
    for p in range(n_pat):
        label = int(r.integers(0, 5))
        for s in range(int(r.integers(1, 4))):
            recs.append(Rec(f"s{p}_{s}", f"p{p}", label))
    k = int(r.integers(2, 6))
    plan = stratified_patient_folds(recs, k, seed=seed)
    check_plan(plan, recs, k)
    single = [Rec(f"x{i}", f"px{i}", int(r.integers(0, 5))) for i in range(n_pat)]
    plan = stratified_patient_folds(single, k, seed=seed)
    for c in range(5):
        per_fold = Counter(plan.assignments[x.slide_id] for x in single if x.label == c)
        counts = [per_fold.get(f, 0) for f in range(k)]
        assert max(counts) - min(counts) <= 1


def test_fold_plan_order_independent_and_errors():
    recs = [Rec(f"s{i}", f"p{i // 2}", i % 5) for i in range(30)]
    a = stratified_patient_folds(recs, 5, seed=4)
    b = stratified_patient_folds(list(reversed(recs)), 5, seed=4)
    assert a.to_json() == b.to_json()
    with pytest.raises(ContractError):
        stratified_patient_folds(recs[:4], 5)
    with pytest.raises(ContractError):
        stratified_patient_folds(recs, 1)
    with pytest.raises(ContractError):
        stratified_patient_folds([Rec("s", "p", None)] * 3, 2)


def test_train_val_split_patient_level():
    recs = [Rec(f"s{i}", f"p{i // 3}", (i // 3) % 5) for i in range(60)]
    train, val = train_val_split(recs, 0.25, seed=2)
    assert set(train) | set(val) == {r.slide_id for r in recs} and not set(train) & set(val)
    pt = {r.patient_id for r in recs if r.slide_id in train}
    pv = {r.patient_id for r in recs if r.slide_id in val}
    assert not pt & pv
    assert len(pv) == 5  # 4 patients per class, round(0.25 * 4) = 1 each


def test_train_config_rules():
    assert (TrainConfig().learning_rate, TrainConfig().batch_size, TrainConfig().patience) == (1e-4, 1, 20)
    probe = TrainConfig.probe()
    assert (probe.learning_rate, probe.batch_size, probe.patience) == (1e-5, 8, 15)
    with pytest.raises(ContractError):
        TrainConfig(patience=30, max_epochs=10)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0)


def small_cohort(seed=0, n=30):
    bags, _, _ = synth_generate(SyntheticSpec(n_slides=n, dim=8, patches_per_slide=(5, 15), seed=seed))
    return bags


def test_train_mil_checkpoint_and_determinism():
    bags = small_cohort()
    cfg = MilConfig(8, proj_dim=16, attn_dim=8)
    tcfg = TrainConfig(learning_rate=1e-3, max_epochs=15, patience=5, seed=2)
    params, logs = train_mil(bags[:20], bags[20:], cfg, tcfg)
    params2, logs2 = train_mil(bags[:20], bags[20:], cfg, tcfg)
    assert logs == logs2
    assert all(a.tobytes() == b.tobytes() for a, b in zip(params.blocks().values(), params2.blocks().values()))
    best = logs[-1].best_epoch
    assert abs(mean_loss(params, bags[20:]) - logs[best].val_loss) <= 1e-9
    assert all(logs[best].val_loss <= e.val_loss for e in logs)
    assert all(e.best_epoch <= e.epoch for e in logs)
    assert logs[0].epoch == 0 and logs[0].val_loss == pytest.approx(mean_loss(init_params(cfg, 2), bags[20:]))
    assert logs_csv(logs).splitlines()[0] == "epoch,train_loss,val_loss"
    assert len(logs_csv(logs).splitlines()) == len(logs) + 1


def test_train_mil_stops_on_patience():
    bags = small_cohort(1)
    # labels shuffled: no signal, validation loss soon stops improving
    r = np.random.default_rng(0)
    for b, lab in zip(bags, r.permutation([b.label for b in bags])):
        b.label = int(lab)
    _, logs = train_mil(bags[:20], bags[20:], MilConfig(8, 16, 8), TrainConfig(learning_rate=1e-2, max_epochs=100, patience=4))
    assert len(logs) < 101
    improved = [e.epoch for i, e in enumerate(logs[1:], 1) if e.val_loss < min(x.val_loss for x in logs[:i]) - 1e-6]
    last = max([0] + improved)
    assert logs[-1].epoch - last >= 4


def test_train_mil_non_finite_loss():
    bags = small_cohort(2, n=6)
    params = init_params(MilConfig(8, 16, 8), 0)
    params.W_clf[:] = np.inf
    with pytest.raises(NumericError, match="epoch 0"):
        train_mil(bags[:4], bags[4:], params.config, TrainConfig(max_epochs=2, patience=1), init=params)
    with pytest.raises(ContractError):
        train_mil([], bags, params.config)


def _fit_default(cohort_seed):
    bags, _, _ = synth_generate(SyntheticSpec(n_slides=100, seed=cohort_seed))
    by = {b.slide_id: b for b in bags}
    train, val = train_val_split(bags, 0.25, 0)
    val_bags = [by[s] for s in val]
    params, logs = train_mil([by[s] for s in train], val_bags, MilConfig(64), TrainConfig(seed=cohort_seed))
    acc = np.mean([predict(params, b)[0] == b.label for b in val_bags])
    return logs, acc


@pytest.mark.slow
def test_train_mil_learns_easy_cohort():
    logs, acc = _fit_default(0)
    best = logs[logs[-1].best_epoch].val_loss
    assert logs[0].val_loss > 1.5  # near ln 5 untrained
    assert best < 0.5
    assert acc >= 0.9


@pytest.mark.slow
@pytest.mark.xfail(reason="best val loss 0.18-0.48 across cohort seeds at default settings; see decisions ledger", strict=False)
def test_train_mil_easy_cohort_val_loss_below_0_3():
    bests = []
    for seed in range(3):
        logs, _ = _fit_default(seed)
        bests.append(logs[logs[-1].best_epoch].val_loss)
    assert np.mean(bests) < 0.3


def test_cross_validate_shuffle_invariant():
    bags = small_cohort(3, n=25)
    cfg = MilConfig(8, 16, 8)
    tcfg = TrainConfig(learning_rate=1e-3, max_epochs=6, patience=3, seed=5)
    a = cross_validate(bags, 5, cfg, tcfg, threads=1)
    shuffled = [bags[i] for i in np.random.default_rng(0).permutation(len(bags))]
    b = cross_validate(shuffled, 5, cfg, tcfg, threads=2)
    assert a.summary() == b.summary()
    assert [f.test_ids for f in a.folds] == [f.test_ids for f in b.folds]
    for f in a.folds:
        assert 0 <= f.weighted_f1 <= 1 and f.kappa <= 1


def test_cross_validate_vote_needs_labels():
    bags = small_cohort(4, n=10)
    with pytest.raises(ContractError):
        cross_validate(bags, 5, method="vote")
    with pytest.raises(ContractError):
        cross_validate(bags, 5, method="knn")
