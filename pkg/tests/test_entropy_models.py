import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from splitcodec.entropy_models import (
    PROB_FLOOR,
    FactorizedDensity,
    FourierDensity,
    GaussianParams,
    gaussian_bits,
    gaussian_interval_prob,
    rate_w,
    rate_w_fourier,
    rate_y,
)


def test_factorized_parameter_count():
    assert FactorizedDensity(4).params_per_channel() == 118


def test_factorized_cdf_is_monotone_and_bounded():
    torch.manual_seed(0)
    d = FactorizedDensity(3)
    with torch.no_grad():
        for p in d.parameters():
            p.add_(torch.randn_like(p))
        x = torch.linspace(-60, 60, 2001).unsqueeze(1).repeat(1, 3)
        c = d.cdf(x)
    assert torch.all(c[1:] >= c[:-1])
    assert float(c.min()) >= 0.0 and float(c.max()) <= 1.0


def test_factorized_likelihood_matches_cdf_difference_and_sums_to_one():
    torch.manual_seed(1)
    d = FactorizedDensity(2).double()
    w = torch.arange(-2000, 2001, dtype=torch.float64).unsqueeze(1).repeat(1, 2)
    with torch.no_grad():
        lik = d.likelihood(w)
        diff = d.cdf(w + 0.5) - d.cdf(w - 0.5)
    np.testing.assert_allclose(lik.numpy(), np.maximum(diff.numpy(), PROB_FLOOR), rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(diff.sum(0).numpy(), 1.0, atol=1e-6)


def test_factorized_channel_mismatch():
    with pytest.raises(ValueError):
        FactorizedDensity(3).cdf(torch.zeros(5, 2))


def _random_fourier(seed, k=12):
    torch.manual_seed(seed)
    d = FourierDensity(2, n_coefficients=k).double()
    with torch.no_grad():
        d.coef_re.copy_(torch.randn(2, k, dtype=torch.float64))
        d.coef_im.copy_(torch.randn(2, k, dtype=torch.float64))
        d.log_scale.copy_(torch.randn(2, dtype=torch.float64) * 0.5 + 1.0)
        d.offset.copy_(torch.randn(2, dtype=torch.float64))
    return d


@pytest.mark.parametrize("seed", range(5))
def test_fourier_density_integrates_to_one(seed):
    d = _random_fourier(seed)

    def pdf(x, ch):
        z = torch.zeros(1, 2, dtype=torch.float64)
        z[0, ch] = x
        with torch.no_grad():
            return float(d.density(z)[0, ch])

    for ch in range(2):
        total, _ = integrate.quad(pdf, -np.inf, np.inf, args=(ch,), limit=400)
        assert abs(total - 1.0) < 1e-3


def test_fourier_cdf_matches_integrated_density():
    d = _random_fourier(7)
    xs = torch.tensor([[-3.0, 0.5], [0.0, 2.0], [4.0, -1.0]], dtype=torch.float64)
    with torch.no_grad():
        cdf = d.cdf(xs).numpy()
    for i in range(3):
        for ch in range(2):
            def pdf(x):
                z = torch.zeros(1, 2, dtype=torch.float64)
                z[0, ch] = x
                with torch.no_grad():
                    return float(d.density(z)[0, ch])
            val, _ = integrate.quad(pdf, -np.inf, float(xs[i, ch]), limit=400)
            assert cdf[i, ch] == pytest.approx(val, abs=1e-6)


def test_fourier_density_non_negative_on_grid():
    d = _random_fourier(3)
    u = torch.linspace(-1, 1, 4001, dtype=torch.float64).unsqueeze(0).repeat(2, 1)
    with torch.no_grad():
        assert float(d.density_u(u).min()) >= -1e-12


def test_fourier_degenerate_coefficients():
    d = FourierDensity(1, n_coefficients=4)
    with torch.no_grad():
        d.coef_re.zero_()
        d.coef_im.zero_()
    with pytest.raises(ValueError, match="degenerate"):
        d.cdf(torch.zeros(3, 1))


def test_gaussian_interval_prob_matches_scipy():
    y = np.array([0.0, 1.0, -3.0, 7.0, 40.0])
    mu = np.array([0.2, -0.4, -3.1, 0.0, 0.0])
    sigma = np.array([1.0, 0.5, 0.05, 2.0, 1.0])
    expected = stats.norm.cdf(y + 0.5, mu, sigma) - stats.norm.cdf(y - 0.5, mu, sigma)
    got = gaussian_interval_prob(torch.tensor(y), torch.tensor(mu), torch.tensor(sigma)).numpy()
    np.testing.assert_allclose(got[:4], expected[:4], rtol=1e-9)
    assert got[4] == PROB_FLOOR


def test_gaussian_bits_and_totals():
    y = torch.zeros(2, 3)
    params = GaussianParams(torch.zeros(2, 3), torch.full((2, 3), 1e-3))
    assert float(gaussian_bits(y, params).max()) < 1e-9
    params = GaussianParams(torch.zeros(2, 3), torch.ones(2, 3))
    p0 = stats.norm.cdf(0.5) - stats.norm.cdf(-0.5)
    assert float(rate_y(y, params)) == pytest.approx(-6 * math.log2(p0), rel=1e-5)
    with pytest.raises(ValueError):
        gaussian_bits(torch.zeros(2, 2), params)
    with pytest.raises(ValueError):
        GaussianParams(torch.zeros(2), torch.zeros(3))


def test_rate_w_variants():
    torch.manual_seed(0)
    f = FourierDensity(2, 8)
    w = torch.tensor([[0.0, 1.0], [-2.0, 3.0]])
    with torch.no_grad():
        assert float(rate_w_fourier(w, f)) == pytest.approx(float(rate_w(w, f)))
    with pytest.raises(TypeError):
        rate_w_fourier(w, FactorizedDensity(2))
