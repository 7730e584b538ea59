import numpy as np
import pytest
import torch

from asos.model import (CHECKPOINT_VERSION, ASOSNet, Classifier, EncoderDecoder, ModelConfig, build_model,
                        count_parameters, load_checkpoint, save_checkpoint)

from conftest import tiny_config, tiny_model


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig()).eval()


def test_default_shapes(default_model):
    with torch.no_grad():
        a, y = default_model(torch.rand(1, 10, 256, 256))
    assert a.shape == (1, 3, 256, 256)
    assert y.shape == (1,)


def test_small_input_shape():
    ed = EncoderDecoder(ModelConfig(n_in=3, n_m=4)).eval()
    with torch.no_grad():
        assert ed(torch.rand(2, 3, 64, 64)).shape == (2, 4, 64, 64)


def test_parameter_counts(default_model):
    n_ed = count_parameters(default_model.encoder_decoder)
    n_cls = count_parameters(default_model.classifier)
    assert abs(n_ed - 1.8e6) <= 0.2 * 1.8e6
    assert abs(n_cls - 2.0e5) <= 0.2 * 2.0e5


def test_indivisible_input_rejected():
    ed = EncoderDecoder(tiny_config())
    with pytest.raises(ValueError, match="pad"):
        ed(torch.rand(1, 3, 70, 64))


def test_classifier_bound_to_tile_size():
    clf = Classifier(tiny_config(tile_size=64))
    with pytest.raises(ValueError, match="64x64"):
        clf(torch.rand(1, 3, 128, 128))


def test_classifier_zero_map_deterministic():
    clf = Classifier(ModelConfig()).eval()
    with torch.no_grad():
        y1 = clf(torch.zeros(1, 3, 256, 256)).item()
        y2 = clf(torch.zeros(1, 3, 256, 256)).item()
    assert 0.0 <= y1 <= 1.0
    assert y1 == y2


@pytest.mark.parametrize("hw", [(64, 64), (128, 128), (256, 256), (256, 512)])
def test_ranges_on_random_inputs(hw):
    model = tiny_model(tile_size=hw[0] if hw[0] == hw[1] else 64)
    gen = torch.Generator().manual_seed(hw[1])
    with torch.no_grad():
        x = torch.rand(3, 3, *hw, generator=gen) * 4 - 1.5
        a = model.encoder_decoder(x)
        assert a.shape[-2:] == hw
        assert a.abs().max() <= 1.0
        if hw[0] == hw[1]:
            _, y = model(x)
            assert ((y >= 0) & (y <= 1)).all()


def test_forward_returns_consumed_map():
    model = tiny_model()
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        a, y = model(x)
        assert torch.equal(model.classifier(a), y)
        a2, y2 = model(x)
    assert torch.equal(a, a2) and torch.equal(y, y2)


def test_random_occlusion_only_in_training():
    model = tiny_model()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a_eval, _ = model(x, occlusion_rate=1.0)
        assert a_eval.abs().sum() > 0
        model.train()
        a_train, _ = model(x, occlusion_rate=1.0)
        assert a_train.abs().sum() == 0


def _receptive_radius(model, size=256):
    """Largest column offset at which a centre-pixel perturbation changes the output."""
    x = torch.rand(1, model.config.n_in, 64, size, dtype=torch.float64)
    x2 = x.clone()
    x2[..., size // 2] += 1.0
    with torch.no_grad():
        d = (model.encoder_decoder(x2) - model.encoder_decoder(x)).abs().sum(dim=(0, 1, 2))
    cols = torch.nonzero(d > 1e-12).flatten()
    return int(max(size // 2 - cols.min(), cols.max() - size // 2))


def test_translation_consistency():
    model = tiny_model(double=True)
    r = _receptive_radius(model)
    W = 2 * r + 160
    W += -W % 16
    x = torch.rand(1, 3, 64, W, dtype=torch.float64)
    shifted = torch.roll(x, 16, dims=-1)
    with torch.no_grad():
        a = model.encoder_decoder(x)
        b = model.encoder_decoder(shifted)
    lo, hi = 16 + r + 1, W - r - 1
    assert hi > lo
    torch.testing.assert_close(b[..., lo:hi], torch.roll(a, 16, dims=-1)[..., lo:hi], rtol=0, atol=1e-10)


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(seed=3)
    save_checkpoint(tmp_path / "m.pt", model, extra={"note": 1})
    back, extra = load_checkpoint(tmp_path / "m.pt")
    assert extra == {"note": 1}
    assert back.config == model.config
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(back(x)[1], model(x)[1])
    raw = torch.load(tmp_path / "m.pt", weights_only=False)
    assert raw["version"] == CHECKPOINT_VERSION


def test_checkpoint_version_checked(tmp_path):
    torch.save({"config": {}}, tmp_path / "x.pt")
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "x.pt")


def test_seeded_construction():
    a, b = build_model(tiny_config(), seed=5), build_model(tiny_config(), seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert isinstance(a, ASOSNet)


@pytest.mark.parametrize("kw", [{"n_in": 0}, {"widths": (4, 4, 4)}, {"tile_size": 40}, {"tile_size": 32}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_default_input_scaling_range():
    ed = EncoderDecoder(ModelConfig()).eval()
    x = torch.from_numpy(np.ones((1, 10, 64, 64), np.float32))
    with torch.no_grad():
        a = ed(x)
    assert a.min() >= -1 and a.max() <= 1
