import math

import numpy as np
import pytest

from implab.data import gaussian_mixture, make_dataset, read_idx, two_spirals, write_idx, idx_dataset
from implab.exceptions import ConfigurationError, FormatError
from implab.masks import Mask, magnitude_prune
from implab.model import ModelSpec, Network
from implab.train import Checkpoint, TrainSchedule, dense_baseline, initial_checkpoint, train


def test_spirals_shapes_and_disjoint():
    ds = two_spirals(n_train=100, n_test=50, seed=0)
    assert ds.X_train.shape == (100, 2) and ds.X_test.shape == (50, 2)
    both = np.concatenate([ds.X_train, ds.X_test])
    assert np.unique(both, axis=0).shape[0] == 150
    assert set(np.unique(ds.y_train)) == {0, 1}


def test_mixture_descriptor_roundtrip():
    ds = gaussian_mixture(n_train=60, n_test=40, n_features=3, n_classes=3, seed=4)
    again = make_dataset(ds.descriptor)
    assert np.array_equal(ds.X_train, again.X_train) and np.array_equal(ds.y_test, again.y_test)


def test_epoch_covers_every_example_once():
    ds = two_spirals(n_train=103, n_test=10)
    batches = ds.train_batches(seed=1, epoch=0, batch_size=10)
    assert len(batches) == ds.steps_per_epoch(10) == 11
    seen = np.concatenate([ds.batch_indices(1, k, 10) for k in range(11)])
    assert np.array_equal(np.sort(seen), np.arange(103))


def test_idx_roundtrip(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(5, 4, 3)).astype(np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    for name, arr in [("x.idx", imgs), ("y.idx", labels), ("f.idx", rng.normal(size=(2, 3)))]:
        write_idx(tmp_path / name, arr)
        back = read_idx(tmp_path / name)
        assert back.dtype == arr.dtype and np.array_equal(back, arr)
    raw = (tmp_path / "x.idx").read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 3])
    assert int.from_bytes(raw[4:8], "big") == 5
    ds = idx_dataset(tmp_path / "x.idx", tmp_path / "y.idx", tmp_path / "x.idx", tmp_path / "y.idx")
    assert ds.X_train.shape == (5, 12) and ds.X_train.max() <= 1.0


def test_idx_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x03")
    with pytest.raises(FormatError):
        read_idx(tmp_path / "bad")
    (tmp_path / "short").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 9, 1, 2]))
    with pytest.raises(FormatError):
        read_idx(tmp_path / "short")


def closed_form_lr(kind, step, T=400, lr=0.3, milestones=(100, 250), factor=0.5, warmup=40):
    if kind == "constant":
        return lr
    if kind == "step":
        return lr * factor ** sum(step >= m for m in milestones)
    if step < warmup:
        return lr * (step + 1) / warmup
    return 0.5 * lr * (1 + math.cos(math.pi * (step - warmup) / (T - warmup)))


@pytest.mark.parametrize("kind", ["constant", "step", "cosine"])
def test_lr_schedule_closed_form(kind):
    sch = TrainSchedule(total_steps=400, lr=0.3, kind=kind, milestones=(100, 250), factor=0.5, warmup=40)
    for step in np.linspace(0, 399, 20).astype(int):
        assert sch.lr_at(int(step)) == pytest.approx(closed_form_lr(kind, int(step)), rel=1e-14)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        TrainSchedule(total_steps=0)
    with pytest.raises(ConfigurationError):
        TrainSchedule(kind="exp")


@pytest.fixture
def setup(spirals, small_net):
    sch = TrainSchedule(total_steps=60, lr=0.05, milestones=(30, 45), batch_size=16)
    return small_net, spirals, sch


def test_zero_steps_returns_start(setup):
    net, ds, sch = setup
    ck = initial_checkpoint(net, 0)
    out = train(net, ds, ck, None, sch, 0)
    assert np.array_equal(out.params.values, ck.params.values) and out.step == 0


def test_training_deterministic(setup):
    net, ds, sch = setup
    a = train(net, ds, initial_checkpoint(net, 0), None, sch, 40)
    b = train(net, ds, initial_checkpoint(net, 0), None, sch, 40)
    assert a.params.values.tobytes() == b.params.values.tobytes()
    assert a.step == 40


def test_resume_is_bit_identical(setup, tmp_path):
    from implab.io import load_checkpoint, save_checkpoint

    net, ds, sch = setup
    full = train(net, ds, initial_checkpoint(net, 0, data_seed=7), None, sch, 50)
    half = train(net, ds, initial_checkpoint(net, 0, data_seed=7), None, sch, 23)
    save_checkpoint(tmp_path / "c.plck", half, net.spec)
    loaded, _ = load_checkpoint(tmp_path / "c.plck")
    rest = train(net, ds, loaded, None, sch, 27)
    assert rest.params.values.tobytes() == full.params.values.tobytes()
    assert rest.momentum.tobytes() == full.momentum.tobytes()


def test_masked_entries_stay_zero(setup):
    net, ds, sch = setup
    w = train(net, ds, initial_checkpoint(net, 0), None, sch, 20)
    mask = magnitude_prune(w.params, Mask.ones(net.layout), 0.6)
    ck = w.masked(mask)
    off = mask.full(net.layout) == 0
    for _ in range(5):
        ck = train(net, ds, ck, mask, sch, 4)
        assert np.linalg.norm(ck.params.values[off]) == 0.0


def test_unmasked_start_rejected(setup):
    net, ds, sch = setup
    ck = initial_checkpoint(net, 0)
    mask = magnitude_prune(ck.params, Mask.ones(net.layout), 0.5)
    with pytest.raises(ValueError):
        train(net, ds, ck, mask, sch, 1)


def test_divergence_reports_step(setup):
    net, ds, _ = setup
    wild = TrainSchedule(total_steps=200, lr=1e6, kind="constant", batch_size=16)
    from implab.exceptions import NonFiniteError

    with pytest.raises(NonFiniteError) as info:
        train(net, ds, initial_checkpoint(net, 0), None, wild, 200)
    assert info.value.step is not None and np.all(np.isfinite(info.value.checkpoint.params.values))


def test_dense_baseline_four_replicates(setup):
    net, ds, sch = setup
    base = dense_baseline(net, ds, sch, 4)
    assert len(base.errors) == 4
    assert base.eps == pytest.approx(np.std(base.errors, ddof=1))
    assert base.eps > 0


def test_identical_seeds_flagged(setup):
    net, ds, sch = setup
    with pytest.raises(ConfigurationError):
        dense_baseline(net, ds, sch, 2, seeds=[3, 3])


def test_finetune_schedule():
    sch = TrainSchedule(total_steps=100, lr=2.0, weight_decay=1e-4)
    ft = sch.finetune()
    assert ft.kind == "constant" and ft.lr == pytest.approx(0.02) and ft.weight_decay == 0.0
