import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inrd.errors import ContractError, NumericError
from inrd.inr import (FFMLP, SIREN, InrConfig, InrModel, fit_single, fourier_encode, forward,
                      forward_from, init, layer_forward, make_grid, model_input, reconstruct)
from inrd.synth import synth_image


def tiny(backbone=SIREN, **kw):
    base = dict(backbone=backbone, hidden_layers=3, width=8, output_dim=3, feature_count=6,
                sigma_b=2.0, dtype="float64")
    base.update(kw)
    return InrConfig(**base)


def test_grid_examples():
    g = make_grid(2, 2)
    assert g.coords.tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]
    g = make_grid(1, 3)
    assert g.coords[:, 1].tolist() == [-1, 0, 1]
    assert (g.coords[:, 0] == -1).all()
    assert make_grid(3, 3).coords[4].tolist() == [0, 0]
    with pytest.raises(ContractError):
        make_grid(0, 4)


@given(st.integers(2, 40), st.integers(2, 40))
@settings(max_examples=30, deadline=None)
def test_grid_endpoints_exact(h, w):
    c = make_grid(h, w).coords
    assert c[:, 0].min() == -1 and c[:, 0].max() == 1
    assert c[:, 1].min() == -1 and c[:, 1].max() == 1
    assert c[0].tolist() == [-1, -1]
    assert len(c) == h * w


def test_fourier_examples():
    m = init(tiny(FFMLP), 0)
    enc = fourier_encode(m, np.zeros((1, 2)))
    F = m.config.feature_count
    assert np.array_equal(enc[0, :F], np.zeros(F)) and np.array_equal(enc[0, F:], np.ones(F))
    B = np.zeros((1, 2))
    B[0, 0] = 0.5
    m1 = InrModel(tiny(FFMLP, feature_count=1), m.weights, m.biases, m.w_out, m.b_out, B)
    enc = fourier_encode(m1, np.array([[1.0, 0.0]]))
    assert abs(enc[0, 0]) < 1e-12 and enc[0, 1] == -1.0
    with pytest.raises(ContractError):
        fourier_encode(init(tiny(SIREN), 0), np.zeros((1, 2)))


def test_fourier_matches_scalar_oracle():
    m = init(tiny(FFMLP), 4)
    x = make_grid(3, 4).coords
    enc = fourier_encode(m, x)
    F = m.config.feature_count
    for i, (y, xx) in enumerate(x):
        for f in range(F):
            arg = 2 * math.pi * (m.fourier_B[f, 0] * y + m.fourier_B[f, 1] * xx)
            assert abs(enc[i, f] - math.sin(arg)) < 1e-12
            assert abs(enc[i, F + f] - math.cos(arg)) < 1e-12


def test_siren_hand_example():
    cfg = InrConfig(SIREN, hidden_layers=1, width=1, output_dim=1, omega0=1.0, dtype="float64")
    m = InrModel(cfg, [np.array([[math.pi / 2, 0.0]])], [np.zeros(1)], np.array([[1.0]]), np.zeros(1))
    out = forward(m, np.array([[1.0, 0.0]])).output
    assert abs(out[0, 0] - 1.0) < 1e-15


def test_ffmlp_zero_first_layer_outputs_bias():
    m = init(tiny(FFMLP, hidden_layers=1), 1)
    m.weights[0][:] = 0
    m.b_out[:] = [0.1, 0.2, 0.3]
    res = forward(m, make_grid(3, 3), capture=[0])
    assert np.array_equal(res.activations[0], np.zeros((9, 8)))
    np.testing.assert_array_equal(res.output, np.tile([0.1, 0.2, 0.3], (9, 1)))


@pytest.mark.parametrize("all_layers", [True, False])
def test_two_layer_siren_unrolled(all_layers):
    cfg = tiny(SIREN, hidden_layers=2, width=3, output_dim=2, omega0=7.0, omega_all_layers=all_layers)
    m = init(cfg, 11)
    m.biases[0][:] = [0.1, -0.2, 0.05]
    m.biases[1][:] = [0.0, 0.3, -0.1]
    x = np.array([[-1.0, 0.5], [0.25, 0.0], [0.9, -0.7]])
    out = forward(m, x).output
    w1 = 7.0 if all_layers else 1.0
    for i in range(3):
        h0 = [math.sin(7.0 * (m.weights[0][j, 0] * x[i, 0] + m.weights[0][j, 1] * x[i, 1] + m.biases[0][j]))
              for j in range(3)]
        h1 = [math.sin(w1 * (sum(m.weights[1][j, t] * h0[t] for t in range(3)) + m.biases[1][j]))
              for j in range(3)]
        for c in range(2):
            ref = sum(m.w_out[c, t] * h1[t] for t in range(3)) + m.b_out[c]
            assert abs(out[i, c] - ref) < 1e-10


@pytest.mark.parametrize("backbone", [SIREN, FFMLP])
def test_layer_decomposition(backbone):
    m = init(tiny(backbone), 2)
    x = make_grid(5, 4)
    res = forward(m, x, capture=range(m.depth))
    prev = model_input(m, x)
    for layer in range(m.depth):
        np.testing.assert_allclose(layer_forward(m, layer, prev), res.activations[layer], atol=1e-6)
        prev = res.activations[layer]
    np.testing.assert_array_equal(forward_from(m, res.activations[1], 1), res.output)


@pytest.mark.parametrize("backbone", [SIREN, FFMLP])
def test_init_deterministic_and_bounded(backbone):
    a, b = init(tiny(backbone), 9), init(tiny(backbone), 9)
    for (na, xa), (nb, xb) in zip(a.named_arrays(), b.named_arrays()):
        assert na == nb and np.array_equal(xa, xb)
    assert not np.array_equal(a.weights[1], init(tiny(backbone), 10).weights[1])
    if backbone == SIREN:
        assert np.abs(a.weights[0]).max() <= 1 / 2
        bound = math.sqrt(6 / 8) / a.config.omega0
        assert np.abs(a.weights[1]).max() <= bound
    assert all(not bb.any() for bb in a.biases)


def test_fourier_scale_statistics():
    cfg = InrConfig(FFMLP, hidden_layers=1, width=1, feature_count=50_000, sigma_b=10.0)
    B = init(cfg, 0).fourier_B
    assert B.shape == (50_000, 2)
    assert abs(B.std() / 10.0 - 1) < 0.02
    assert not B.flags.writeable


def test_first_layer_width_per_backbone():
    assert init(tiny(FFMLP), 0).weights[0].shape == (8, 12)
    assert init(tiny(SIREN), 0).weights[0].shape == (8, 2)


def test_config_validation():
    for bad in (dict(hidden_layers=0), dict(width=0), dict(omega0=0.0), dict(backbone="mlp"),
                dict(backbone=FFMLP, sigma_b=0.0), dict(backbone=FFMLP, feature_count=0)):
        with pytest.raises(ContractError):
            tiny(**bad)
    cfg = tiny(FFMLP)
    assert InrConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_deterministic_and_nonfinite():
    m = init(tiny(SIREN), 3)
    x = make_grid(6, 6)
    assert np.array_equal(forward(m, x).output, forward(m, x).output)
    m.weights[1][0, 0] = np.inf
    with pytest.raises(NumericError) as info:
        forward(m, x)
    assert info.value.layer == 1


def test_fit_zero_iters_is_noop():
    m = init(tiny(SIREN), 0)
    img = synth_image("gradient", 8, 8, 0)
    fitted, curve = fit_single(m, img, 0, 1e-3)
    assert len(curve) == 0
    for (_, a), (_, b) in zip(m.named_arrays(), fitted.named_arrays()):
        assert np.array_equal(a, b)


def test_fit_nan_reports_iteration():
    m = init(tiny(SIREN), 0)
    with pytest.raises(NumericError) as info:
        fit_single(m, synth_image("gradient", 8, 8, 0), 5, 1e300)
    assert info.value.iteration is not None


@pytest.mark.parametrize("backbone", [
    SIREN,
    # a ReLU network has to drive its head to zero to go flat; Adam gets
    # to about 49 dB in 200 steps even at lr 5e-2 (see decisions ledger)
    pytest.param(FFMLP, marks=pytest.mark.xfail(strict=True, reason="ReLU net plateaus below 50 dB in 200 steps")),
])
def test_constant_image_reaches_50db(backbone):
    cfg = InrConfig(backbone, hidden_layers=3, width=32, feature_count=32, sigma_b=10.0)
    img = np.full((32, 32, 3), 0.5)
    _, curve = fit_single(init(cfg, 0), img, 200, 1e-2)
    assert curve.max() >= 50.0


def test_ffmlp_projection_untouched_by_training():
    m = init(tiny(FFMLP), 0)
    B = m.fourier_B.copy()
    fitted, _ = fit_single(m, synth_image("blobs", 8, 8, 1), 10, 1e-3)
    assert np.array_equal(fitted.fourier_B, B) and np.array_equal(m.fourier_B, B)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_siren_bandlimited_500_iters(seed):
    cfg = InrConfig(SIREN, hidden_layers=5, width=64)
    img = synth_image("bandlimited", 64, 64, seed)
    fitted, curve = fit_single(init(cfg, seed), img, 500, 1e-4)
    assert curve[-1] >= 30.0
    assert reconstruct(fitted, 64, 64).shape == (64, 64, 3)
