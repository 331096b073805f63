import numpy as np
import pytest

from isample import nn
from isample.dualpath import DualPathConfig, DualPathNet


def tiny_config(**overrides) -> DualPathConfig:
    """Small valid 2D geometry: output 3x3, low path at factor 2."""
    base = dict(
        high_stem=2, high_blocks=[["standard", 3]], low_stem=2, low_blocks=[["standard", 3]],
        head_widths=[4], downsample=2, high_patch=9, low_patch=8, dropout=0.0,
    )
    base.update(overrides)
    return DualPathConfig(**base)


def tiny_config_3d(**overrides) -> DualPathConfig:
    base = dict(
        rank=3, high_stem=2, high_blocks=[["bottleneck", 4]], low_stem=2,
        low_blocks=[["bottleneck", 4], ["standard", 4]], head_widths=[4], downsample=2,
        high_patch=7, low_patch=10, dropout=0.0,
    )
    base.update(overrides)
    return DualPathConfig(**base)


def randomize(model: DualPathNet, rng, scale=0.1) -> DualPathNet:
    """Perturb every parameter (including zero-initialised bn scales) and mark statistics ready."""
    for p in model.params():
        if p.name.endswith("running_var"):
            p.value = rng.uniform(0.5, 1.5, p.value.shape).astype(p.value.dtype)
        elif p.name.endswith("running_mean"):
            p.value = (scale * rng.standard_normal(p.value.shape)).astype(p.value.dtype)
        elif p.name.endswith(".scale"):
            p.value = rng.uniform(0.5, 1.5, p.value.shape).astype(p.value.dtype)
        else:
            p.value = (p.value + scale * rng.standard_normal(p.value.shape)).astype(p.value.dtype)
    model.set_stats_ready(True)
    return model


def model_gradcheck(cfg, seed, batch=2):
    """Worst relative error over sampled entries of every trainable tensor of a float64 model."""
    rng = np.random.default_rng(seed)
    model = randomize(DualPathNet(cfg, rng, np.float64), rng)
    high = rng.standard_normal((batch, 1) + cfg.high_extent)
    low = rng.standard_normal((batch, 1) + cfg.low_extent)
    target = rng.integers(0, cfg.num_classes, (batch,) + cfg.output_extent)
    z = model.logits(high, low, training=True)
    _, g = nn.softmax_cross_entropy(z, target)
    model.backward(g)
    grads = {p.name: p.grad.copy() for p in model.params() if p.trainable}

    def loss():
        return nn.softmax_cross_entropy(model.logits(high, low, training=True), target)[0]

    worst = 0.0
    for p in model.params():
        if p.trainable:
            idx, num = nn.numerical_gradient(loss, p.value, 1e-6, 8, rng)
            worst = max(worst, nn.relative_error(grads[p.name].reshape(-1)[idx], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
