import dataclasses
import json
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from moodshift.errors import ConfigError, DataError
from moodshift.labels import LabeledChunk
from moodshift.models import parameter_checksum
from moodshift.training import (
    ChunkDataset,
    FoldPlan,
    HyperGrid,
    HyperParams,
    RunRecord,
    _batches,
    plan_folds,
    run_grid,
    train_model,
)

FAST = HyperParams(learning_rate=1e-3, batch_size=32, epochs=4, patience=10)


def subjects(n):
    return [f"s{i:02d}" for i in range(n)]


def test_plan_folds_deterministic():
    a = plan_folds(subjects(12), 5, seed=7)
    assert a == plan_folds(subjects(12), 5, seed=7)
    assert a != plan_folds(subjects(12), 5, seed=8)


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 40), st.integers(0, 10_000), st.integers(2, 7))
def test_plan_folds_partition(n, seed, folds):
    n = max(n, folds)
    strata = {s: i % 3 for i, s in enumerate(subjects(n))}
    plan = plan_folds(subjects(n), folds, seed, strata)
    tests = [plan.test_subjects(f) for f in range(folds)]
    assert set().union(*tests) == set(subjects(n))
    assert sum(len(t) for t in tests) == n
    sizes = [len(t) for t in tests]
    assert max(sizes) - min(sizes) <= 1
    for f in range(folds):
        assert not plan.test_subjects(f) & plan.train_subjects(f)


def test_fifteen_subjects_three_per_fold():
    plan = plan_folds(subjects(15), 5, seed=0)
    assert [len(plan.test_subjects(f)) for f in range(5)] == [3] * 5


def test_too_few_subjects():
    with pytest.raises(DataError):
        plan_folds(subjects(4), 5)


def test_plan_json_round_trip():
    plan = plan_folds(subjects(9), 5, seed=1)
    assert FoldPlan.from_json(json.loads(json.dumps(plan.to_json()))) == plan


def test_split_keeps_subjects_apart(small_dataset):
    ds, plan = small_dataset
    for f in range(5):
        tr, te = plan.split(ds, f)
        assert {ds.subjects[i] for i in tr}.isdisjoint({ds.subjects[i] for i in te})
        assert sorted(tr + te) == list(range(len(ds)))


def test_split_unknown_subject(small_dataset):
    ds, plan = small_dataset
    partial = FoldPlan({s: f for s, f in list(plan.assignments.items())[:-1]}, 5, 0)
    with pytest.raises(DataError):
        partial.split(ds, 0)


def _dataset(labels, subjects_):
    chunks = [LabeledChunk(f"v{i}", s, 0, m, 0) for i, (m, s) in enumerate(zip(labels, subjects_))]
    n = len(chunks)
    return ChunkDataset(chunks, torch.rand(n, 3, 5, 32, 32),
                        torch.tensor([m + 1 for m in labels]), torch.ones(n, dtype=torch.long))


def test_missing_class_in_training_fold():
    subs = subjects(5)
    # the only negative chunk sits in the test fold
    ds = _dataset([-1, 1, 0, 1, 0], subs)
    plan = FoldPlan({s: i for i, s in enumerate(subs)}, 5, 0)
    with pytest.raises(DataError, match="absent"):
        train_model("1cnn", "none", ds, plan, 0, FAST)


def test_unknown_arch(small_dataset):
    ds, plan = small_dataset
    with pytest.raises(ConfigError):
        train_model("3cnn", "none", ds, plan, 0, FAST)


def test_delta_required_for_two_branch(small_dataset):
    ds, plan = small_dataset
    no_delta = dataclasses.replace(ds, delta=torch.full_like(ds.delta, -100))
    with pytest.raises(DataError):
        train_model("2cnn", "none", no_delta, plan, 0, FAST)


def test_batches_merge_singletons():
    parts = _batches(torch.arange(65), 32)
    assert [len(p) for p in parts] == [32, 33]
    assert torch.equal(torch.cat(parts), torch.arange(65))


def test_hyperparams_validation():
    with pytest.raises(ConfigError):
        HyperParams(learning_rate=0)
    with pytest.raises(ConfigError):
        HyperParams().distillation()
    with pytest.raises(ConfigError):
        HyperGrid(learning_rates=())


def test_grid_sizes():
    g = HyperGrid()
    assert len(g.points("1cnn")) == 2 * 3 * 2
    assert len(g.points("tsnet")) == 2 * 3 * 2 * 3 * 6
    assert {p.batch_size for p in g.points("tsnet")} == {16, 64, 128}


def test_run_record_std_is_sample_std():
    rec = RunRecord("1cnn", "none", {}, 0, [0.5, 0.7, 0.9])
    assert rec.mean == pytest.approx(0.7) and rec.std == pytest.approx(0.2)


def test_initial_loss_near_ln3(small_dataset):
    ds, plan = small_dataset
    _, res = train_model("1cnn", "none", ds, plan, 0, FAST, seed=0)
    assert abs(res.initial_loss - math.log(3)) <= 0.2


def test_same_seed_same_curve(small_dataset):
    ds, plan = small_dataset
    _, a = train_model("1cnn", "none", ds, plan, 1, FAST, seed=5)
    m, b = train_model("1cnn", "none", ds, plan, 1, FAST, seed=5)
    assert a.loss_curve == b.loss_curve
    assert a.test_accuracy == b.test_accuracy
    assert m.metadata["data_fingerprint"]


def test_loss_decreases_and_fits_separable(small_dataset):
    ds, plan = small_dataset
    hyper = HyperParams(learning_rate=1e-3, batch_size=16, epochs=40, patience=10)
    _, res = train_model("1cnn", "none", ds, plan, 0, hyper, seed=0)
    assert res.loss_curve[-1] < res.initial_loss
    assert res.train_accuracy >= 0.95


def test_tsnet_teacher_frozen(small_dataset):
    ds, plan = small_dataset
    hyper = dataclasses.replace(FAST, epochs=2, temperature=3.0, alpha=0.1)
    model, res = train_model("tsnet", "none", ds, plan, 0, hyper, seed=0)
    assert res.teacher_checksum == parameter_checksum(model.module.teacher)
    assert set(res.stage_curves) == {"mood_branch", "delta_branch", "mlp"}


def test_2cnn_trains(small_dataset):
    ds, plan = small_dataset
    _, res = train_model("2cnn", "none", ds, plan, 2, FAST, seed=0)
    assert 0.0 <= res.test_accuracy <= 1.0
    assert abs(res.initial_loss - 2 * math.log(3)) <= 0.4


def test_run_grid_singleton(small_dataset, tmp_path):
    ds, plan = small_dataset
    grid = HyperGrid(learning_rates=(1e-3,), batch_sizes=(32,), dropout_rates=(0.5,),
                     epochs=3)
    best, records = run_grid("1cnn", "none", ds, grid, plan, seed=0, out_dir=tmp_path)
    assert len(records) == 1 and best is records[0]
    assert best.mean == pytest.approx(sum(best.fold_accuracies) / 5)
    root = tmp_path / "1cnn_none"
    for f in range(5):
        assert (root / grid.points("1cnn")[0].tag() / f"fold{f}" / "checkpoint" / "params.pt").exists()
    saved = json.loads((root / "best.json").read_text())
    assert saved["best"]["fold_accuracies"] == best.fold_accuracies
    assert FoldPlan.from_json(json.loads((root / "folds.json").read_text())) == plan


def test_run_grid_tie_break(small_dataset, monkeypatch):
    ds, plan = small_dataset
    import moodshift.training as tr

    class Stub:
        def __init__(self, fold):
            self.fold = fold
            self.test_accuracy = 0.5
            self.train_accuracy = 0.5

    monkeypatch.setattr(tr, "_run_one", lambda job: (None, Stub(job[4])))
    grid = HyperGrid(learning_rates=(1e-3, 1e-5), batch_sizes=(256, 64), dropout_rates=(0.4,))
    best, _ = run_grid("1cnn", "none", ds, grid, plan)
    assert best.hyperparameters["learning_rate"] == 1e-5
    assert best.hyperparameters["batch_size"] == 64
