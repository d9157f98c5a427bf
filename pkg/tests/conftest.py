import warnings

import numpy as np
import pytest

from evpnet import ModelConfig, Tensor, build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def warm_bn(model, seed=0, n=8):
    """One train-mode forward so eval-mode batch norm has statistics."""
    c, s = model.config.in_channels, model.config.input_size
    x = np.random.default_rng(seed).random((n, c, s, s)).astype(model.parameters()[0].dtype)
    model(Tensor(x), train=True)
    return model


def tiny_model(family="evpnet", seed=0, dtype=None, **kw):
    cfg = dict(family=family, depth=8, widths=(4, 8), input_size=8, num_classes=3, se_reduction=4)
    cfg.update(kw)
    return warm_bn(build(ModelConfig(**cfg), seed=seed, dtype=dtype), seed)


@pytest.fixture(autouse=True)
def _quiet_bn_warning():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="batch_norm: eval mode", category=RuntimeWarning)
        yield
