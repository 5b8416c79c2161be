import numpy as np
import pytest

from kinject import engine
from kinject.engine import Adam, Tensor, backward, softmax_cross_entropy
from kinject.errors import ShapeMismatch, UnknownScale
from kinject.net import (
    BackboneConfig,
    ModelState,
    forward_hidden,
    forward_injection,
    forward_mlp,
    load_model,
    save_model,
    tiny,
    tiny_res,
)

SCALES = {"KI-S": 48, "KI-M": 64, "KI-L": 64}


@pytest.fixture(scope="module")
def model():
    # a wider variant of the tiny layout, to pin the d_h=128 shape contracts
    cfg = BackboneConfig(channels=(32, 64, 128), residual=(False,) * 3, resolution=64)
    return ModelState(cfg, SCALES, n_categories=6, seed=0)


def batch(n, cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, cfg.in_channels, cfg.resolution, cfg.resolution)).astype(
        np.float32
    )


def test_forward_hidden_shape(model):
    nu = forward_hidden(model, batch(2, model.backbone))
    assert nu.shape == (2, 128)


def test_forward_hidden_rejects_wrong_resolution(model):
    with pytest.raises(ShapeMismatch):
        forward_hidden(model, np.zeros((1, 3, 32, 32), dtype=np.float32))


def test_identical_images_identical_rows(model):
    img = batch(1, model.backbone, seed=3)
    pair = np.concatenate([img, img])
    nu = forward_hidden(model, pair)
    assert np.array_equal(nu.data[0], nu.data[1])


def test_forward_hidden_finite_over_random_batches():
    cfg = BackboneConfig(channels=(16, 32, 32), residual=(False,) * 3, resolution=32)
    m = ModelState(cfg, {"KI-M": 16}, n_categories=4, seed=1)
    for i in range(100):
        nu = forward_hidden(m, batch(2, cfg, seed=i))
        assert np.all(np.isfinite(nu.data))


def test_injection_shape_and_norm(model):
    nu = forward_hidden(model, batch(3, model.backbone))
    out = forward_injection(model, nu, "KI-M")
    assert out.shape == (3, 64)
    norms = np.linalg.norm(out.data, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)


def test_injection_unknown_scale(model):
    nu = forward_hidden(model, batch(1, model.backbone))
    with pytest.raises(UnknownScale):
        forward_injection(model, nu, "KI-X")


def test_injection_dropout_zero_train_equals_eval():
    m = ModelState(BackboneConfig(channels=(32, 64, 128), residual=(False,) * 3, resolution=64), {"KI-M": 64}, n_categories=6, seed=2, head_dropout=0.0)
    nu = forward_hidden(m, batch(2, m.backbone))
    a = forward_injection(m, nu, "KI-M", train=True, dropout_seed=1)
    b = forward_injection(m, nu, "KI-M", train=False)
    assert np.array_equal(a.data, b.data)


def test_mlp_shape_and_zero_logits(model):
    nu = forward_hidden(model, batch(2, model.backbone))
    logits = forward_mlp(model, nu)
    assert logits.shape == (2, 6)

    zeroed = ModelState(BackboneConfig(channels=(32, 64, 128), residual=(False,) * 3, resolution=64), SCALES, n_categories=6, seed=0)
    zeroed.params["mlp.w"].data[:] = 0.0
    zeroed.params["mlp.b"].data[:] = 0.0
    logits = forward_mlp(zeroed, forward_hidden(zeroed, batch(2, zeroed.backbone)))
    assert np.all(logits.data == 0.0)


def test_mlp_argmax_shift_invariant(model):
    nu = forward_hidden(model, batch(4, model.backbone))
    base = forward_mlp(model, nu).data.argmax(axis=1)
    shifted = ModelState(BackboneConfig(channels=(32, 64, 128), residual=(False,) * 3, resolution=64), SCALES, n_categories=6, seed=0)
    shifted.params["mlp.b"].data += 3.5
    assert np.array_equal(
        forward_mlp(shifted, forward_hidden(shifted, batch(4, shifted.backbone))).data.argmax(axis=1),
        base,
    )


def test_freeze_blocks_optimizer_updates():
    m = ModelState(tiny(32), {"KI-M": 16}, n_categories=4, seed=3)
    m.freeze("backbone")
    before = m.group_hash("backbone")
    opt = Adam(m.trainable_params(), lr=0.05)
    images = batch(4, m.backbone, seed=5)
    labels = np.array([0, 1, 2, 3])
    for _ in range(3):
        opt.zero_grad()
        loss = softmax_cross_entropy(forward_mlp(m, forward_hidden(m, images)), labels)
        backward(loss)
        opt.step()
    assert m.group_hash("backbone") == before
    assert "backbone" in m.frozen


def test_residual_zero_conv_acts_as_pooled_stem_identity():
    cfg = tiny_res(32)
    m = ModelState(cfg, {"KI-M": 16}, n_categories=4, seed=4)
    for name, p in m.params.items():
        if name.startswith("backbone.b"):
            p.data[:] = 0.0
    x = Tensor(batch(2, cfg, seed=6))
    stem = engine.relu(
        engine.bias_add(
            engine.conv2d(x, m.params["backbone.stem.w"], padding=1),
            m.params["backbone.stem.b"],
        )
    )
    pooled = stem
    for _ in range(3):
        pooled = engine.maxpool2d(pooled, 2)
    expected = engine.global_avg_pool(pooled)
    nu = forward_hidden(m, x)
    assert np.allclose(nu.data, expected.data, atol=1e-6)


def test_save_load_reproduces_logits(tmp_path, model):
    images = batch(3, model.backbone, seed=7)
    logits = forward_mlp(model, forward_hidden(model, images)).data
    path = tmp_path / "model.kinj"
    save_model(model, path)
    loaded = load_model(path)
    again = forward_mlp(loaded, forward_hidden(loaded, images)).data
    assert np.array_equal(logits, again)


def test_save_load_preserves_frozen_groups(tmp_path):
    m = ModelState(tiny(32), {"KI-M": 16}, n_categories=4, seed=8)
    m.freeze("backbone")
    m.freeze("inject.KI-M")
    path = tmp_path / "frozen.kinj"
    save_model(m, path)
    loaded = load_model(path)
    assert loaded.frozen == {"backbone", "inject.KI-M"}
    assert not loaded.params["backbone.b0.w"].requires_grad
    assert loaded.params["mlp.w"].requires_grad


def test_backbone_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(channels=(), residual=())
    with pytest.raises(ValueError):
        BackboneConfig(channels=(8, 16), residual=(False,))
    with pytest.raises(ValueError):
        BackboneConfig(channels=(8, 16), residual=(False, True), resolution=64)
    with pytest.raises(ValueError):
        BackboneConfig(channels=(8, 8), residual=(False, False), resolution=30)
