import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heatmil.errors import ConfigError, TrainingError
from heatmil.losses import LossConfig, bce_loss, loss_and_grad, smooth_targets, spectral_decoupling, total_loss
from heatmil.model import ModelConfig, ModelParams, logit
from heatmil.optim import AdamW
from heatmil.tensor import GradPair, finite_difference_gradient

from helpers import fd_close
from oracles import RefAdam

probs = arrays(np.float64, st.integers(1, 6), elements=st.floats(1e-6, 1 - 1e-6))


def test_bce_examples():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2))
    assert bce_loss([0.9], [0]) == pytest.approx(-math.log(0.1))
    assert 0 <= bce_loss([1.0], [1]) < 1e-6
    assert bce_loss([0.0, 1.0], [0, 1]) < 1e-6


def test_label_smoothing():
    assert np.allclose(smooth_targets([0, 1], 0.1), [0.05, 0.95])
    assert bce_loss([0.95], [1], LossConfig(label_smoothing=0.1)) < bce_loss([0.999], [1], LossConfig(label_smoothing=0.1))


def test_spectral_decoupling_examples():
    assert spectral_decoupling([0.0, 0.0], 0.3) == 0
    assert spectral_decoupling([1.0, 2.0], 0.01) == pytest.approx(0.025)
    assert spectral_decoupling([5.0, -3.0], 0.0) == 0


def test_total_loss_examples():
    assert total_loss([0.5], [0.0], [1], LossConfig(lambda_sd=0.7)) == pytest.approx(math.log(2))
    y, z = [0.3, 0.8], logit(np.array([0.3, 0.8]))
    assert total_loss(y, z, [0, 1], LossConfig(lambda_sd=0.0)) == bce_loss(y, [0, 1])


@given(probs, st.floats(0, 1), st.floats(0, 0.49))
def test_loss_nonnegative_and_consistent(p, lam, s):
    y = (np.arange(p.size) % 2).astype(float)
    cfg = LossConfig(lambda_sd=lam, label_smoothing=s)
    loss, _ = loss_and_grad(p, y, cfg)
    assert loss >= 0
    assert loss == pytest.approx(total_loss(p, logit(p), y, cfg), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.02, 0.98, size=3)
    y = rng.integers(0, 2, size=3)
    cfg = LossConfig(lambda_sd=0.05, label_smoothing=0.1)
    _, g = loss_and_grad(p, y, cfg)
    num = finite_difference_gradient(lambda v: loss_and_grad(v, y, cfg)[0], p.copy())
    fd_close(g, num)


def test_sd_gradient_is_lambda_z():
    z = np.array([0.3, -1.2, 2.0])
    num = finite_difference_gradient(lambda v: spectral_decoupling(v, 0.2), z.copy())
    np.testing.assert_allclose(num, 0.2 * z, atol=1e-9)


def test_clamped_components_have_zero_gradient():
    _, g = loss_and_grad([0.0, 1.0, 0.5], [1, 0, 1])
    assert g[0] == 0 and g[1] == 0 and g[2] != 0


def test_loss_config_validation():
    for bad in (dict(lambda_sd=-1), dict(label_smoothing=0.5), dict(eps_clip=0)):
        with pytest.raises(ConfigError):
            LossConfig(**bad)


# ---------------------------------------------------------------- AdamW


class Holder:
    def __init__(self, *arrays):
        self.tensors = {f"w{i}": GradPair(np.array(a, dtype=np.float64)) for i, a in enumerate(arrays)}


def test_zero_gradient_is_pure_decay():
    h = Holder([1.0, -2.0, 3.0])
    opt = AdamW(lr=0.1, weight_decay=0.5)
    opt.step(h)
    np.testing.assert_allclose(h.tensors["w0"].value, np.array([1.0, -2.0, 3.0]) * (1 - 0.05), rtol=0, atol=1e-15)


def test_first_step_magnitude():
    h = Holder([0.0])
    h.tensors["w0"].grad[:] = 1.0
    AdamW(lr=1e-3, weight_decay=0.0).step(h)
    assert h.tensors["w0"].value[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_quadratic_decreases():
    h = Holder([1.0])
    opt = AdamW(lr=0.01, weight_decay=0.0)
    losses = []
    for _ in range(100):
        w = h.tensors["w0"].value
        losses.append(0.5 * float(w[0] ** 2))
        h.tensors["w0"].grad[:] = w
        opt.step(h)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_matches_reference_adam_without_decay():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=7)
    h = Holder(w0)
    ref, w_ref = RefAdam(3e-3), w0.copy()
    opt = AdamW(lr=3e-3, weight_decay=0.0)
    for _ in range(50):
        g = rng.normal(size=7)
        h.tensors["w0"].grad[:] = g
        opt.step(h)
        w_ref = ref.step(w_ref, g)
    np.testing.assert_allclose(h.tensors["w0"].value, w_ref, rtol=1e-13, atol=1e-15)


def test_decay_is_decoupled():
    rng = np.random.default_rng(1)
    w0 = rng.normal(size=4)
    h = Holder(w0)
    ref, w_ref = RefAdam(1e-2), w0.copy()
    opt = AdamW(lr=1e-2, weight_decay=0.1)
    for _ in range(10):
        g = rng.normal(size=4)
        h.tensors["w0"].grad[:] = g
        opt.step(h)
        w_ref = ref.step(w_ref * (1 - 1e-2 * 0.1), g)
    np.testing.assert_allclose(h.tensors["w0"].value, w_ref, rtol=1e-12)


def test_non_finite_gradient_names_step():
    h = Holder([1.0])
    opt = AdamW()
    opt.step(h)
    h.tensors["w0"].grad[:] = np.nan
    with pytest.raises(TrainingError, match="step 2"):
        opt.step(h)


def test_works_on_model_params():
    params = ModelParams.init(ModelConfig(embed_dim=4, proj_dim=2, hidden_dim=2), 0)
    before = params.copy()
    for p in params.tensors.values():
        p.grad[...] = 1.0
    AdamW(lr=1e-2).step(params)
    assert all(params[n].dtype == np.float32 for n in params.tensors)
    assert not params.equals(before)
