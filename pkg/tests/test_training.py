import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ballseg import model as mdl
from ballseg.data import synth_dataset
from ballseg.training import (
    TrainConfig,
    TrainingDiverged,
    _epoch_batches,
    _prefetch,
    lr_schedule,
    make_folds,
    mean_loss,
    sgd_step,
    split_train_val,
    train,
    validation_set,
    write_run,
)

from fixtures import SMOKE, SMOKE_NET


class Stub:
    """Minimal scene stand-in for the split helpers, which only read ids."""

    def __init__(self, scene_id, arena_id):
        self.scene_id = scene_id
        self.arena_id = arena_id


def stub_scenes(arena_sizes):
    out = []
    for a, n in enumerate(arena_sizes):
        out += [Stub(f"a{a}-s{i}", f"arena{a}") for i in range(n)]
    return out


def check_partition(scenes, spec):
    assert set(spec.assignment) == {s.scene_id for s in scenes}
    arena_to_folds = {}
    for s in scenes:
        arena_to_folds.setdefault(s.arena_id, set()).add(spec.assignment[s.scene_id])
    assert all(len(f) == 1 for f in arena_to_folds.values())
    assert sorted({f for fs in arena_to_folds.values() for f in fs}) == list(range(spec.k))
    total = sum(len(spec.fold_scenes(scenes, f)) for f in range(spec.k))
    assert total == len(scenes)


def test_one_arena_per_fold():
    scenes = stub_scenes([5, 3, 8, 4, 6, 2, 7])
    spec = make_folds(scenes, 7, seed=0)
    check_partition(scenes, spec)
    assert sorted(spec.arena_folds.values()) == list(range(7))


def test_thirty_arenas_seven_folds():
    rng = np.random.default_rng(0)
    scenes = stub_scenes(rng.integers(5, 15, size=30).tolist())
    spec = make_folds(scenes, 7, seed=3)
    check_partition(scenes, spec)
    per_fold = np.bincount(list(spec.arena_folds.values()), minlength=7)
    assert per_fold.min() >= 3 and per_fold.max() <= 5


def test_too_few_arenas():
    with pytest.raises(ValueError, match="K=8.*found 7"):
        make_folds(stub_scenes([3] * 7), 8, seed=0)


def test_folds_are_seeded():
    scenes = stub_scenes([4] * 12)
    assert make_folds(scenes, 4, 1).assignment == make_folds(scenes, 4, 1).assignment
    assert any(make_folds(scenes, 4, s).assignment != make_folds(scenes, 4, 1).assignment for s in range(2, 6))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=7, max_size=40), st.integers(0, 2**31))
def test_fold_partition_property(sizes, seed):
    scenes = stub_scenes(sizes)
    check_partition(scenes, make_folds(scenes, 7, seed))


def test_split_sizes_and_partition():
    scenes = stub_scenes([100])
    tr, va = split_train_val(scenes, 0)
    assert (len(tr), len(va)) == (90, 10)
    assert {s.scene_id for s in tr}.isdisjoint(s.scene_id for s in va)
    assert {s.scene_id for s in tr + va} == {s.scene_id for s in scenes}
    again = split_train_val(scenes, 0)
    assert [s.scene_id for s in again[1]] == [s.scene_id for s in va]
    assert len(split_train_val(stub_scenes([11]), 0)[1]) == 2
    with pytest.raises(ValueError, match="at least 10"):
        split_train_val(stub_scenes([9]), 0)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(cfg, 0) == 0.001
    assert lr_schedule(cfg, 39) == 0.001
    assert lr_schedule(cfg, 40) == 0.0005
    assert lr_schedule(cfg, 80) == 0.00025
    lrs = [lr_schedule(cfg, e) for e in range(300)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(cfg, -1)


def test_train_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)


def test_sgd_reduces_loss_on_a_fixed_batch(smoke):
    tr, _ = smoke
    cfg = TrainConfig(learning_rate=0.001, crop_size=(96, 64))
    x, m = next(_epoch_batches(tr, cfg, 0))
    w = mdl.build_network(SMOKE_NET, 0)
    losses = []
    for _ in range(11):
        w, loss = sgd_step(w, x, m, cfg.learning_rate)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_epoch_batches_drop_short_tail(smoke):
    tr, _ = smoke  # 18 scenes
    batches = list(_epoch_batches(tr, TrainConfig(batch_size=4, crop_size=(96, 64)), 0))
    assert len(batches) == 4
    assert all(x.shape == (4, 6, 64, 96) and m.shape == (4, 1, 64, 96) for x, m in batches)


def test_prefetch_preserves_order_and_errors():
    assert list(_prefetch(iter(range(50)), depth=2)) == list(range(50))

    def broken():
        yield 1
        raise KeyError("boom")

    with pytest.raises(KeyError):
        list(_prefetch(broken(), depth=1))


def test_smoke_training_halves_loss(smoke_run):
    initial, _, history = smoke_run
    assert len(history.train_loss) == 30
    assert history.train_loss[-1] < 0.5 * initial


def test_best_epoch_is_validation_minimum(smoke, smoke_run):
    _, weights, history = smoke_run
    assert history.val_loss[history.best_epoch] == min(history.val_loss)
    vx, vm = validation_set(smoke[1], TrainConfig(**SMOKE))
    assert mean_loss(weights, vx, vm, 2) == pytest.approx(history.val_loss[history.best_epoch], rel=1e-6)


def test_training_is_reproducible(smoke):
    tr, va = smoke
    cfg = TrainConfig(**dict(SMOKE, epochs=2))
    a = train(tr, va, SMOKE_NET, cfg)
    b = train(tr, va, SMOKE_NET, cfg)
    assert a[1] == b[1]
    assert all(a[0].params[n].tobytes() == b[0].params[n].tobytes() for n in a[0].params)
    c = train(tr, va, SMOKE_NET, TrainConfig(**dict(SMOKE, epochs=2, workers=3)))
    assert c[1] == a[1]


def test_single_epoch_single_batch(smoke):
    tr, va = smoke
    updates = []
    cfg = TrainConfig(**dict(SMOKE, epochs=1, batch_size=len(tr)))
    _, history = train(tr, va, SMOKE_NET, cfg, on_epoch=lambda e, h: updates.append(e))
    assert len(history.train_loss) == len(history.val_loss) == 1
    assert history.best_epoch == 0 and updates == [0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(smoke):
    tr, va = smoke
    with pytest.raises(TrainingDiverged, match="epoch 0, batch"):
        train(tr, va, SMOKE_NET, TrainConfig(**dict(SMOKE, learning_rate=1e6, epochs=1)))


def test_channel_mismatch_rejected(smoke):
    tr, va = smoke
    with pytest.raises(ValueError, match="input-channel mismatch"):
        train(tr, va, SMOKE_NET, TrainConfig(**dict(SMOKE, use_diff=False)))


def test_write_run(tmp_path, smoke_run):
    _, weights, history = smoke_run
    write_run(tmp_path, weights, history, {"train": TrainConfig(**SMOKE), "note": (1, 2)})
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["train"]["learning_rate"] == 0.1 and cfg["train"]["crop_size"] == [96, 64]
    rows = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert len(rows) == 30
    assert [r["best"] for r in rows].count("1") == 1
    assert math.isclose(float(rows[0]["val_loss"]), history.val_loss[0], rel_tol=1e-12)
    back = mdl.load_weights(tmp_path / "weights.bsgw")
    assert mdl.weights_to_bytes(back) == mdl.weights_to_bytes(weights)
