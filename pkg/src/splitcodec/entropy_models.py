"""Density models for the hyper-prior ``W`` and the latent ``Y``, and their rates.

All rates are in bits. Interval probabilities are floored at ``PROB_FLOOR``
before taking the logarithm so that the rate is always finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PROB_FLOOR = 2.0 ** -24
SIGMA_MIN = 0.01
_SQRT1_2 = 1.0 / math.sqrt(2.0)


def interval_bits(prob: torch.Tensor) -> torch.Tensor:
    """Per-element code length ``-log2(max(prob, 2^-24))``."""
    return -torch.log2(prob.clamp_min(PROB_FLOOR))


def std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * _SQRT1_2)


class HyperDensity(nn.Module):
    """A fully factorized density with one CDF per channel of ``W``.

    Subclasses implement ``cdf`` on inputs shaped ``(..., C)``.
    """

    channels: int

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def likelihood(self, w: torch.Tensor) -> torch.Tensor:
        return (self.cdf(w + 0.5) - self.cdf(w - 0.5)).clamp_min(PROB_FLOOR)

    def bits(self, w: torch.Tensor) -> torch.Tensor:
        return interval_bits(self.likelihood(w))


class FactorizedDensity(HyperDensity):
    """Per-channel monotone MLP whose sigmoid output is a CDF.

    Matrices are reparameterized through softplus and hidden layers use the
    gate ``x + tanh(a) * tanh(x)``, so every layer is non-decreasing in its
    input. With ``filters=(3,)*8`` each channel owns 118 parameters.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3,) * 8, init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        widths = (1, *self.filters, 1)
        scale = init_scale ** (1.0 / (len(widths) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(widths) - 1):
            init = math.log(math.expm1(1.0 / scale / widths[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, widths[i + 1], widths[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, widths[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(widths) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, widths[i + 1], 1)))

    def params_per_channel(self) -> int:
        return sum(p[0].numel() for p in self.parameters())

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        if shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {shape[-1]}")
        h = x.reshape(-1, self.channels).transpose(0, 1).unsqueeze(1)  # C x 1 x N
        h = h.to(self.matrices[0].dtype)
        n_layers = len(self.matrices)
        for i in range(n_layers):
            h = torch.matmul(F.softplus(self.matrices[i]), h) + self.biases[i]
            if i < n_layers - 1:
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h.squeeze(1).transpose(0, 1).reshape(shape)

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def likelihood(self, w: torch.Tensor) -> torch.Tensor:
        lower = self.logits(w - 0.5)
        upper = self.logits(w + 0.5)
        # evaluate in the tail where the sigmoid difference does not cancel
        sign = -torch.sign(lower + upper).detach()
        lik = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        return lik.clamp_min(PROB_FLOOR)


class FourierDensity(HyperDensity):
    """Baseline hyper-prior density built from a squared Fourier series.

    On ``u`` in (-1, 1) the density is ``|sum_k c_k exp(i pi k u)|^2`` divided
    by its integral ``2 sum_k |c_k|^2``. The real line is mapped onto (-1, 1)
    with ``u = tanh((y - offset) / scale)``.
    """

    def __init__(self, channels: int, n_coefficients: int = 60, init_scale: float = 4.0, init_noise: float = 0.05):
        super().__init__()
        self.channels = channels
        self.n_coefficients = k = n_coefficients
        re = torch.randn(channels, k) * init_noise
        re[:, 0] = 1.0
        self.coef_re = nn.Parameter(re)
        self.coef_im = nn.Parameter(torch.randn(channels, k) * init_noise)
        self.log_scale = nn.Parameter(torch.full((channels,), math.log(init_scale)))
        self.offset = nn.Parameter(torch.zeros(channels))
        # selector summing the m-th sub-diagonal of a k x k matrix
        rows = torch.arange(k).unsqueeze(1)
        cols = torch.arange(k).unsqueeze(0)
        sel = (rows - cols).unsqueeze(0) == torch.arange(k).view(k, 1, 1)
        self.register_buffer("_diag_selector", sel.reshape(k, k * k).to(torch.float32), persistent=False)
        self.register_buffer("_freqs", torch.arange(1, k, dtype=torch.float32), persistent=False)

    def autocorrelation(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Real and imaginary parts of ``r_m = sum_k c_{k+m} conj(c_k)``, m = 0..K-1."""
        re, im = self.coef_re, self.coef_im
        outer_re = re.unsqueeze(2) * re.unsqueeze(1) + im.unsqueeze(2) * im.unsqueeze(1)
        outer_im = im.unsqueeze(2) * re.unsqueeze(1) - re.unsqueeze(2) * im.unsqueeze(1)
        sel = self._diag_selector.to(re.dtype)
        c = self.channels
        r_re = outer_re.reshape(c, -1) @ sel.T
        r_im = outer_im.reshape(c, -1) @ sel.T
        return r_re, r_im

    def _per_channel(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        return x.reshape(-1, self.channels).transpose(0, 1)  # C x N

    def _check(self, r0: torch.Tensor) -> None:
        if bool((r0 <= 0).any()):
            raise ValueError("degenerate Fourier density: all coefficients are zero")

    def _antiderivative(self, u, r_re, r_im):
        m = self._freqs.to(u.dtype)
        ang = math.pi * u.unsqueeze(-1) * m  # C x N x (K-1)
        w = (2.0 / (math.pi * m))
        series = (r_re[:, None, 1:] * torch.sin(ang) + r_im[:, None, 1:] * torch.cos(ang)) * w
        return r_re[:, :1] * u + series.sum(-1)

    def cdf_u(self, u: torch.Tensor) -> torch.Tensor:
        """CDF in the bounded coordinate; ``u`` has shape (C, N)."""
        r_re, r_im = self.autocorrelation()
        r_re, r_im = r_re.to(u.dtype), r_im.to(u.dtype)
        self._check(r_re[:, 0])
        lower = self._antiderivative(-torch.ones_like(u[:, :1]), r_re, r_im)
        return (self._antiderivative(u, r_re, r_im) - lower) / (2.0 * r_re[:, :1])

    def density_u(self, u: torch.Tensor) -> torch.Tensor:
        r_re, r_im = self.autocorrelation()
        r_re, r_im = r_re.to(u.dtype), r_im.to(u.dtype)
        self._check(r_re[:, 0])
        m = self._freqs.to(u.dtype)
        ang = math.pi * u.unsqueeze(-1) * m
        series = 2.0 * (r_re[:, None, 1:] * torch.cos(ang) - r_im[:, None, 1:] * torch.sin(ang))
        return (r_re[:, :1] + series.sum(-1)) / (2.0 * r_re[:, :1])

    def to_u(self, x: torch.Tensor) -> torch.Tensor:
        z = self._per_channel(x)
        scale = torch.exp(self.log_scale).to(z.dtype).unsqueeze(1)
        return torch.tanh((z - self.offset.to(z.dtype).unsqueeze(1)) / scale)

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        out = self.cdf_u(self.to_u(x))
        return out.transpose(0, 1).reshape(x.shape).clamp(0.0, 1.0)

    def density(self, x: torch.Tensor) -> torch.Tensor:
        """Density on the real line (change of variables through tanh)."""
        u = self.to_u(x)
        scale = torch.exp(self.log_scale).to(u.dtype).unsqueeze(1)
        d = self.density_u(u) * (1.0 - u * u) / scale
        return d.transpose(0, 1).reshape(x.shape)


@dataclass
class GaussianParams:
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and sigma {tuple(self.sigma.shape)} differ in shape")


def gaussian_interval_prob(y, mu, sigma) -> torch.Tensor:
    """Mass of N(mu, sigma^2) on [y - 1/2, y + 1/2], floored at 2^-24.

    Evaluated on the side of the mean that keeps both CDF terms in the
    accurate lower tail.
    """
    y, mu, sigma = (torch.as_tensor(t, dtype=torch.get_default_dtype()) if not torch.is_tensor(t) else t
                    for t in (y, mu, sigma))
    v = (y - mu).abs()
    upper = std_normal_cdf((0.5 - v) / sigma)
    lower = std_normal_cdf((-0.5 - v) / sigma)
    return (upper - lower).clamp_min(PROB_FLOOR)


def gaussian_bits(y: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    if y.shape != params.mu.shape:
        raise ValueError(f"latent shape {tuple(y.shape)} does not match parameters {tuple(params.mu.shape)}")
    return interval_bits(gaussian_interval_prob(y, params.mu, params.sigma))


def rate_y(y: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    """Total bits of the latent under the conditional Gaussian model."""
    return gaussian_bits(y, params).sum()


def rate_w(w: torch.Tensor, density: HyperDensity) -> torch.Tensor:
    """Total bits of the hyper-prior under its factorized density."""
    return density.bits(w).sum()


def rate_w_fourier(w: torch.Tensor, density: FourierDensity) -> torch.Tensor:
    if not isinstance(density, FourierDensity):
        raise TypeError("rate_w_fourier needs a FourierDensity")
    return rate_w(w, density)


def factorized_cdf(density: FactorizedDensity, x: torch.Tensor) -> torch.Tensor:
    return density.cdf(x)


def fourier_cdf(density: FourierDensity, y: torch.Tensor) -> torch.Tensor:
    return density.cdf(y)
