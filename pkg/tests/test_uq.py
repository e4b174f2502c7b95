import numpy as np
import pytest

from iglide import data as D
from iglide import models as M
from iglide import uq
from iglide.uq import UqConfig

from oracles import folded_normal_var, sample_var_se, two_point
from toys import identity_ae, linear_vae, one_site_decoder


def test_recon_error_examples():
    assert uq.recon_error([1.0, 2.0], [1.0, 2.0]) == 0
    assert uq.recon_error([1.0, 1.0], [0.0, 0.0]) == pytest.approx(np.sqrt(2))
    assert uq.recon_error([5.0, 1.0, 1.0], [0.0, 0.0, 0.0], slice(1, 3)) == pytest.approx(np.sqrt(2))


def test_monolithic_has_one_error_column(rng):
    m = M.build("ae", ["a", "b", "c"], M.ModelConfig(), rng)
    assert uq.epistemic(m, rng.random((4, 3)), UqConfig(5), rng).shape == (4, 1)


def test_zero_dropout_gives_zero_epistemic(rng):
    spec = D.GroupSpec.from_mapping({"g": ["a"], "h": ["b", "c"]})
    m = M.build("iglide_ae", ["a", "b", "c"], M.ModelConfig(dropout=0.0), rng, spec)
    assert np.all(uq.epistemic(m, rng.random((6, 3)), UqConfig(10), rng) == 0)


def test_two_point_epistemic():
    m = one_site_decoder(p=0.5)
    n = 10_000
    est = uq.epistemic(m, np.array([[1.0]]), UqConfig(n), np.random.default_rng(0))[0, 0]
    # x = 1: dropped -> x_hat = 0 (error 1), kept -> x_hat = 4 (error 3)
    var, mu4 = two_point(1.0, 3.0, 0.5)
    assert abs(est - var) < 3 * sample_var_se(mu4, var, n)


def test_epistemic_deterministic():
    m = one_site_decoder(p=0.3)
    x = np.array([[1.0], [0.5]])
    a = uq.epistemic(m, x, UqConfig(20), np.random.default_rng(4))
    b = uq.epistemic(m, x, UqConfig(20), np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_aleatoric_on_ae_is_unsupported(rng):
    with pytest.raises(uq.UnsupportedVariantError):
        uq.aleatoric(M.build("ae", ["a"], M.ModelConfig(), rng), np.zeros((1, 1)), UqConfig(), rng)


def test_collapsed_posterior_gives_zero_aleatoric():
    m = identity_ae(variant="vae")
    s = uq.aleatoric(m, np.array([[0.4]]), UqConfig(50), np.random.default_rng(0))
    assert s[0, 0] < 1e-12


def test_folded_normal_aleatoric():
    mu, sigma, c, x = 0.5, 0.8, 1.5, 1.0
    m = linear_vae(mu, sigma, c)
    n = 10_000
    draws = uq.aleatoric_draws(m, np.array([[x]]), UqConfig(n), np.random.default_rng(1))[:, 0, 0]
    est = draws.var(ddof=1)
    exact = folded_normal_var(x - c * mu, abs(c) * sigma)
    mu4 = np.mean((draws - draws.mean()) ** 4)
    assert abs(est - exact) < 3 * sample_var_se(mu4, est, n)


def test_aleatoric_keeps_decoder_deterministic():
    # with dropout on, the aleatoric pass must still use eval-mode decoding:
    # a collapsed posterior then gives exactly zero spread
    m = identity_ae(dropout=0.5, variant="vae")
    assert uq.aleatoric(m, np.array([[0.7]]), UqConfig(30), np.random.default_rng(0))[0, 0] < 1e-12


def test_epistemic_keeps_latent_fixed():
    # VAE with a wide posterior but no dropout: resampling z would create spread
    m = linear_vae(sigma=2.0)
    assert uq.epistemic(m, np.array([[1.0]]), UqConfig(30), np.random.default_rng(0))[0, 0] == 0


def test_estimate_bundle(rng):
    m = M.build("vae", ["a", "b"], M.ModelConfig(), rng)
    e = uq.estimate(m, rng.random((3, 2)), UqConfig(8), rng)
    assert e.sigma_e.shape == e.sigma_a.shape == e.mean_error.shape == (3, 1)
    assert np.all(e.sigma_e >= 0) and np.all(e.sigma_a >= 0)


def test_needs_two_samples():
    with pytest.raises(ValueError):
        UqConfig(1)


def test_estimates_converge():
    m = one_site_decoder(p=0.2)
    x = np.array([[1.0]])
    var, _ = two_point(1.0, 1.5, 0.8)  # dropped: error 1; kept: x_hat 2.5, error 1.5
    errs = [abs(uq.epistemic(m, x, UqConfig(n), np.random.default_rng(n))[0, 0] - var) for n in (100, 10_000)]
    assert errs[1] < max(errs[0], 0.01 * var)
