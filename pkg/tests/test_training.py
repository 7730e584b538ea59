import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asos.data import RasterSample, SynthConfig, generate_synthetic, stack_samples
from asos.model import ModelConfig
from asos.training import (TrainConfig, TrainingDiverged, augment_batch, cutmix, make_scheduler,
                           occlude_random_activations, paste_stripe, scale_input, train)

from conftest import tiny_config


def sample(label, value=0, shape=(100, 100, 2), sid="s"):
    return RasterSample(sid, np.full(shape, value, np.uint16), float(label), (0.0, 0.0), "synthetic-A")


class TestScale:
    @pytest.mark.parametrize("raw, expected", [(10000, 1.0), (0, 0.0), (2500, 0.25)])
    def test_values(self, raw, expected):
        assert scale_input(np.array([raw]))[0] == expected

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            scale_input(np.array([10001]))


class TestCutMix:
    def test_same_class(self, rng):
        for label in (0, 1):
            assert cutmix(sample(label), sample(label, 5000), rng).label == label

    def test_fig6_mixed_label(self, rng):
        m = cutmix(sample(1), sample(0, 10000), rng, edge="top", width=28)
        assert m.label == pytest.approx(0.72, abs=1e-12)
        assert m.provenance[2] == pytest.approx(0.28)

    def test_empty_stripe(self, rng):
        a = sample(1, 3000)
        m = cutmix(a, sample(0, 9000), rng, edge="left", width=0)
        np.testing.assert_array_equal(m.pixels, scale_input(a.pixels))
        assert m.label == 1.0

    def test_half_stripe(self, rng):
        m = cutmix(sample(0), sample(1, 10000), rng, edge="right", width=50)
        assert m.label == 0.5

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            cutmix(sample(0), sample(1, shape=(50, 100, 2)), rng)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(8, 40), st.integers(8, 40),
           st.sampled_from([0.0, 1.0]), st.sampled_from([0.0, 1.0]))
    def test_label_matches_pasted_pixel_count(self, seed, h, w, la, lb):
        rng = np.random.default_rng(seed)
        a = sample(la, 0, (h, w, 1))
        b = sample(lb, 10000, (h, w, 1))
        m = cutmix(a, b, rng)
        pasted = int((m.pixels == 1.0).sum())
        f = pasted / (h * w)
        assert f <= 0.5 + 1e-12
        assert abs(m.label - ((1 - f) * la + f * lb)) < 1e-9

    def test_stripes_touch_an_edge(self):
        a, b = np.zeros((10, 12, 1)), np.ones((10, 12, 1))
        out, f = paste_stripe(a, b, "bottom", 3)
        assert out[7:].all() and not out[:7].any() and f == 3 * 12 / 120


class TestOcclusion:
    def test_rate_zero(self, rng):
        m = rng.uniform(-1, 1, (16, 16, 3))
        np.testing.assert_array_equal(occlude_random_activations(m, 0.0, rng), m)

    def test_rate_one(self, rng):
        m = rng.uniform(-1, 1, (16, 16, 3))
        assert not occlude_random_activations(m, 1.0, rng).any()

    def test_binomial_count(self, rng):
        m = rng.uniform(0.1, 1, (256, 256, 3))
        out = occlude_random_activations(m, 0.3, rng)
        zeroed = (out == 0).all(axis=-1)
        # whole vectors only
        assert ((out == 0).any(axis=-1) == zeroed).all()
        n, p = 256 * 256, 0.3
        assert abs(zeroed.sum() - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_mse_zero_for_exact_labels():
    y = torch.tensor([0.0, 0.3, 0.72, 1.0])
    assert torch.nn.functional.mse_loss(y.clone(), y).item() == 0.0


def test_one_cycle_schedule():
    cfg = TrainConfig()
    opt = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=cfg.max_lr / cfg.div_factor)
    sched = make_scheduler(opt, cfg, 100)
    lrs = []
    for _ in range(100):
        lrs.append(sched.get_last_lr()[0])
        opt.step()
        sched.step()
    lrs = np.array(lrs)
    assert lrs[0] < cfg.max_lr
    assert np.isclose(lrs.max(), cfg.max_lr)
    assert (np.isclose(lrs, cfg.max_lr, rtol=1e-9)).sum() == 1
    assert lrs[-1] < lrs[0]
    assert lrs[-1] <= cfg.max_lr / 25


def test_augment_batch_labels_and_range(rng):
    X = np.stack([np.full((64, 64, 2), 0, np.uint16), np.full((64, 64, 2), 10000, np.uint16)])
    y = np.array([0.0, 1.0])
    out, labels = augment_batch(X, y, TrainConfig(cutmix_prob=1.0), rng)
    assert out.min() >= 0 and out.max() <= 1
    # label of each tile equals the share of pixels coming from the wild tile
    np.testing.assert_allclose(labels, out[..., 0].mean(axis=(1, 2)), atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(cutmix_max_fraction=0.6)
    with pytest.raises(ValueError):
        TrainConfig(occlusion_rate=(0.5, 0.2))
    with pytest.raises(ValueError):
        TrainConfig(rotations=(45,))


@pytest.fixture(scope="module")
def two_tiles():
    samples = generate_synthetic(SynthConfig(n_samples=2, size=64, seed=0))
    a = next(s for s in samples if s.label == 0)
    b = next(s for s in samples if s.label == 1)
    return stack_samples([a, b])


def test_overfit_sanity(two_tiles):
    X, y = two_tiles
    cfg = TrainConfig(epochs=50, cutmix_prob=0.0, occlusion_rate=(0.0, 0.0), rotations=(), seed=0)
    model, hist = train(X, y, cfg, model_config=ModelConfig(n_in=3, tile_size=64))
    assert hist.rows[-1]["train_acc"] == 1.0
    losses = np.array(hist.losses)
    assert (np.diff(losses) <= 1e-12).all()


def test_fixed_seed_identical_history(two_tiles):
    X, y = two_tiles
    X = np.concatenate([X] * 4)
    y = np.concatenate([y] * 4)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=7)
    _, h1 = train(X, y, cfg, model_config=tiny_config())
    _, h2 = train(X, y, cfg, model_config=tiny_config())
    np.testing.assert_equal(h1.rows, h2.rows)


def test_divergence_aborts(two_tiles):
    X, y = two_tiles
    cfg = TrainConfig(epochs=3, max_lr=1e12, div_factor=1.0, cutmix_prob=0.0, seed=0)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(X, y, cfg, model_config=tiny_config())


def test_history_csv(tmp_path, two_tiles):
    X, y = two_tiles
    _, h = train(X, y, TrainConfig(epochs=2), model_config=tiny_config(), X_val=X, y_val=y)
    h.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,train_acc,val_acc"
    assert len(lines) == 3


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(np.zeros((0, 64, 64, 3)), np.zeros(0))
