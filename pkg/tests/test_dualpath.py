import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import model_gradcheck, randomize, tiny_config, tiny_config_3d
from isample import nn
from isample.dualpath import DualPathConfig, DualPathNet, GeometryError, build_model, full_image_inference
from isample.volume import Volume
from oracles import single_window_oracle

DEFAULT_PARAM_COUNT = 39378  # frozen on first build of the default 2D config
DEFAULT_TRAINABLE = 38834


def test_default_config_builds():
    cfg = DualPathConfig()
    model = build_model(cfg, np.random.default_rng(0))
    assert cfg.output_extent == (9, 9)
    assert nn.param_count(model.params()) == DEFAULT_PARAM_COUNT
    assert nn.param_count(model.params(), trainable_only=True) == DEFAULT_TRAINABLE


def test_fusion_mismatch_rejected_with_extent():
    with pytest.raises(GeometryError, match="axis 0: low-res path yields"):
        DualPathConfig(low_patch=18).validate()
    with pytest.raises(GeometryError, match="axis 1"):
        DualPathConfig(low_patch=(17, 16)).validate()


def test_low_path_must_be_deeper():
    with pytest.raises(GeometryError, match="at least as deep"):
        DualPathConfig(low_blocks=[["standard", 16]]).validate()


def test_full_scale_3d_low_path_sees_further():
    cfg = DualPathConfig(
        rank=3, high_blocks=[["standard", 30]] * 4, low_blocks=[["standard", 30]] * 4 + [["bottleneck", 60]] * 2,
        high_patch=25, low_patch=21,
    )
    high = nn.receptive_field(cfg.high_specs(), 3, 1)
    low = nn.receptive_field(cfg.low_specs(), 3, cfg.downsample)
    assert all(l > h for l, h in zip(low, high))


def test_classifier_excluded_from_decay():
    model = DualPathNet(DualPathConfig(), np.random.default_rng(0))
    flags = {p.name: p.decay for p in model.params()}
    assert flags["head.classifier.w"] is False and flags["head.classifier.b"] is False
    assert flags["high.stem.conv.w"] and flags["head.fc0.w"]


def _inputs(cfg, rng, batch=2):
    high = rng.standard_normal((batch, 1) + cfg.high_extent)
    low = rng.standard_normal((batch, 1) + cfg.low_extent)
    return high, low


def test_forward_probabilities(rng):
    cfg = DualPathConfig()
    model = DualPathNet(cfg, rng)
    high, low = _inputs(cfg, rng)
    p = model.forward(high.astype(np.float32), low.astype(np.float32), training=True)
    assert p.shape == (2, 2, 9, 9)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_zero_classifier_gives_uniform_output(rng):
    cfg = DualPathConfig(num_classes=3)
    model = randomize(DualPathNet(cfg, rng), rng)
    model.classifier.w.value[:] = 0
    model.classifier.b.value[:] = 0
    high, low = _inputs(cfg, rng)
    p = model.forward(high.astype(np.float32), low.astype(np.float32))
    np.testing.assert_allclose(p, 1 / 3, atol=1e-7)


def test_constant_input_gives_constant_output(rng):
    cfg = DualPathConfig()
    model = randomize(DualPathNet(cfg, rng), rng)
    high = np.full((1, 1) + cfg.high_extent, 0.7, np.float32)
    low = np.full((1, 1) + cfg.low_extent, 0.7, np.float32)
    p = model.forward(high, low)
    np.testing.assert_allclose(p, p[..., :1, :1] * np.ones_like(p), atol=1e-6)


def test_extent_mismatch_rejected(rng):
    cfg = tiny_config()
    model = DualPathNet(cfg, rng)
    with pytest.raises(GeometryError):
        model.forward(np.zeros((1, 1, 9, 9)), np.zeros((1, 1, 5, 5)))


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradients_2d(seed):
    assert model_gradcheck(tiny_config(num_classes=3), seed) <= 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradients_3d(seed):
    assert model_gradcheck(tiny_config_3d(), seed) <= 1e-3


def test_dropout_gradients_with_fixed_masks():
    cfg = tiny_config(dropout=0.5)
    rng = np.random.default_rng(5)
    model = randomize(DualPathNet(cfg, rng, np.float64), rng)
    high, low = _inputs(cfg, rng)
    r = rng.standard_normal((2, 2) + cfg.output_extent)

    def f():
        model.set_rng(np.random.default_rng(77))
        return float((model.logits(high, low, training=True) * r).sum())

    f()
    model.backward(r)
    grads = {p.name: p.grad.copy() for p in model.params() if p.trainable}
    for name in ("head.fc0.w", "high.stem.conv.w", "low.block0.conv2.w"):
        p = next(q for q in model.params() if q.name == name)
        idx, num = nn.numerical_gradient(f, p.value, 1e-6, 10, rng)
        assert nn.relative_error(grads[name].reshape(-1)[idx], num) <= 1e-3


# --- fully convolutional inference --------------------------------------------------------


@pytest.mark.parametrize("dims", [(68, 68), (71, 80)])
def test_tiled_inference_equals_single_window(rng, dims):
    cfg = DualPathConfig()
    model = randomize(DualPathNet(cfg, rng), rng)
    image = rng.standard_normal(dims).astype(np.float32)
    expected = single_window_oracle(model, image)
    for tile in (None, 16, 23, 64):
        got = full_image_inference(model, Volume(image, (1.0, 1.0)), tile)
        assert got.shape == (2,) + dims
        np.testing.assert_allclose(got, expected, atol=1e-5)


def test_tiled_inference_3d(rng):
    cfg = tiny_config_3d()
    model = randomize(DualPathNet(cfg, rng), rng)
    image = rng.standard_normal((20, 21, 22)).astype(np.float32)
    a = full_image_inference(model, Volume(image, (1.5, 1.0, 1.0)))
    b = full_image_inference(model, Volume(image, (1.5, 1.0, 1.0)), tile=8)
    np.testing.assert_allclose(a, b, atol=1e-5)
    np.testing.assert_allclose(a, single_window_oracle(model, image), atol=1e-5)


def test_inference_probabilities_and_determinism(rng):
    cfg = DualPathConfig()
    model = randomize(DualPathNet(cfg, rng), rng)
    v = Volume(rng.standard_normal((70, 75)), (1.0, 1.0))
    a = full_image_inference(model, v)
    b = full_image_inference(model, v)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-6)


def test_inference_rejects_small_image(rng):
    model = randomize(DualPathNet(DualPathConfig(), rng), rng)
    with pytest.raises(GeometryError, match="smaller than one context window"):
        full_image_inference(model, Volume(np.zeros((67, 100)), (1.0, 1.0)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_argmax_invariant_to_logit_shift(seed, shift):
    z = np.random.default_rng(seed).standard_normal((2, 3, 4, 4))
    assert (np.argmax(nn.softmax(z), 1) == np.argmax(nn.softmax(z + shift), 1)).all()


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 2), st.integers(1, 3), st.integers(0, 2), st.sampled_from([1, 2, 3, 4]),
    st.integers(1, 6), st.integers(0, 2**16),
)
def test_accepted_configs_forward(n_high, extra_low, pad_out, factor, out, seed):
    kinds = ["standard", "bottleneck"]
    rng = np.random.default_rng(seed)
    high_blocks = [[kinds[int(rng.integers(2))], 4] for _ in range(n_high)]
    low_blocks = [[kinds[int(rng.integers(2))], 4] for _ in range(n_high + extra_low)]
    probe = DualPathConfig(high_blocks=high_blocks, low_blocks=low_blocks, downsample=factor,
                           high_stem=2, low_stem=2, head_widths=[3], dropout=0.0)
    high_patch = out + probe.high_shrink
    low_patch = -(-out // factor) + probe.low_shrink + pad_out  # pad_out > 0 must be rejected
    cfg = DualPathConfig(high_blocks=high_blocks, low_blocks=low_blocks, downsample=factor, high_stem=2,
                         low_stem=2, head_widths=[3], dropout=0.0, high_patch=high_patch, low_patch=low_patch)
    if pad_out:
        with pytest.raises(GeometryError):
            cfg.validate()
        return
    try:
        cfg.validate()
    except GeometryError as exc:
        assert "does not cover" in str(exc)  # the only other legitimate rejection
        return
    model = DualPathNet(cfg, rng)
    p = model.forward(*(a.astype(np.float32) for a in _inputs(cfg, rng, 1)), training=True)
    assert p.shape == (1, 2, out, out)
