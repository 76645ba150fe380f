"""Per-domain batch norm, Gaussian spatial priors and output smoothing.

Each dataset ("domain") owns its own normalisation statistics and affine
parameters, a small set of anisotropic Gaussian prior maps, and the width of
the blur applied to the final prediction.  Everything else in the model is
shared across domains.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigurationError, Tensor, exp, matmul, mean, parameter, sqrt

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class RegistryError(KeyError):
    """Unknown domain id."""


class UsageError(ValueError):
    """Call violates a documented usage contract."""


@dataclass
class BNState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: Tensor
    beta: Tensor


@dataclass
class DomainContext:
    domain_id: str
    bn_state: dict = field(default_factory=dict)
    # columns: mu_x, mu_y, log_sigma_x, log_sigma_y, log_amplitude
    prior_params: Tensor | None = None
    smooth_log_sigma: Tensor | None = None
    prior_map: Tensor | None = None  # only for the free-map prior variant

    def add_bn_site(self, site_id, channels):
        self.bn_state[site_id] = BNState(
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            gamma=parameter(np.ones(channels), name=f"{self.domain_id}.{site_id}.gamma"),
            beta=parameter(np.zeros(channels), name=f"{self.domain_id}.{site_id}.beta"),
        )

    def named_parameters(self):
        for site, st in sorted(self.bn_state.items()):
            yield f"domain.{self.domain_id}.bn.{site}.gamma", st.gamma
            yield f"domain.{self.domain_id}.bn.{site}.beta", st.beta
        if self.prior_params is not None:
            yield f"domain.{self.domain_id}.prior_params", self.prior_params
        if self.prior_map is not None:
            yield f"domain.{self.domain_id}.prior_map", self.prior_map
        yield f"domain.{self.domain_id}.smooth_log_sigma", self.smooth_log_sigma

    def named_buffers(self):
        for site, st in sorted(self.bn_state.items()):
            yield f"domain.{self.domain_id}.bn.{site}.running_mean", st.running_mean
            yield f"domain.{self.domain_id}.bn.{site}.running_var", st.running_var


def registry(domains, n_priors=4, prior_sigma=0.25, smooth_sigma=1.0, free_prior_shape=None):
    """Build one independent :class:`DomainContext` per id, keyed by id."""
    domains = list(domains)
    if len(set(domains)) != len(domains):
        raise ConfigurationError(f"duplicate domain ids in {domains}")
    table = {}
    for d in domains:
        row = [0.5, 0.5, math.log(prior_sigma), math.log(prior_sigma), 0.0]
        ctx = DomainContext(
            domain_id=d,
            prior_params=parameter(np.tile(row, (n_priors, 1)).reshape(n_priors, 5), name=f"{d}.prior_params"),
            smooth_log_sigma=parameter(math.log(smooth_sigma), name=f"{d}.smooth_log_sigma"),
        )
        if free_prior_shape is not None:
            ctx.prior_map = parameter(np.ones(free_prior_shape), name=f"{d}.prior_map")
        table[d] = ctx
    return table


def lookup(table, domain_id):
    try:
        return table[domain_id]
    except KeyError:
        raise RegistryError(f"unknown domain {domain_id!r}; known: {sorted(table)}") from None


# ------------------------------------------------------------------ batch norm


def domain_batch_norm(x, domain, site_id, mode="train", batch_domains=None):
    """Normalise an N×C×H×W batch with the statistics of ``domain``.

    ``batch_domains`` (optional) lists the domain of every sample; a batch that
    mixes domains is rejected because per-domain statistics would be undefined.
    """
    if batch_domains is not None and any(d != domain.domain_id for d in batch_domains):
        raise UsageError(f"mixed-domain batch {sorted(set(batch_domains))} at BN site {site_id!r}")
    try:
        st = domain.bn_state[site_id]
    except KeyError:
        raise RegistryError(f"domain {domain.domain_id!r} has no BN site {site_id!r}") from None
    shape = (1, -1, 1, 1)
    if mode == "train":
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        xhat = xc / sqrt(var + BN_EPS)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        st.running_mean[:] = (1 - BN_MOMENTUM) * st.running_mean + BN_MOMENTUM * mu.data.reshape(-1)
        st.running_var[:] = (1 - BN_MOMENTUM) * st.running_var + BN_MOMENTUM * unbiased
    elif mode in ("eval", "infer"):
        rm = st.running_mean.astype(x.dtype).reshape(shape)
        rs = np.sqrt(st.running_var.astype(x.dtype) + BN_EPS).reshape(shape)
        xhat = (x - Tensor(rm, dtype=x.dtype)) / Tensor(rs, dtype=x.dtype)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    return xhat * st.gamma.reshape(shape) + st.beta.reshape(shape)


# ------------------------------------------------------------------ priors


def render_priors(domain, H, W):
    """Render the domain's Gaussian priors as a P×H×W tensor.

    Pixel (u, v) sits at normalised coordinates (u/W, v/H) with u the column.
    """
    if domain.prior_map is not None:
        return exp(domain.prior_map)
    p = domain.prior_params
    n = p.shape[0]
    dtype = p.dtype
    if n == 0:
        return Tensor(np.zeros((0, H, W)), dtype=dtype)
    u = Tensor((np.arange(W) / W).reshape(1, 1, W), dtype=dtype)
    v = Tensor((np.arange(H) / H).reshape(1, H, 1), dtype=dtype)
    mu_x = p[:, 0].reshape(n, 1, 1)
    mu_y = p[:, 1].reshape(n, 1, 1)
    sx = exp(p[:, 2]).reshape(n, 1, 1)
    sy = exp(p[:, 3]).reshape(n, 1, 1)
    amp = exp(p[:, 4]).reshape(n, 1, 1)
    dx = (u - mu_x) / sx
    dy = (v - mu_y) / sy
    return amp * exp((dx * dx + dy * dy) * -0.5)


# ------------------------------------------------------------------ smoothing


def _reflect(i, n):
    # half-sample symmetric reflection: d c b a | a b c d | d c b a
    period = 2 * n
    i = i % period
    return i if i < n else period - 1 - i


def kernel_radius(sigma):
    return max(1, int(math.ceil(3.0 * sigma)))


def gaussian_kernel(log_sigma):
    """Normalised 1-D Gaussian kernel, truncated at ±3σ (odd length ≥ 3)."""
    sigma = math.exp(float(log_sigma.data))
    r = kernel_radius(sigma)
    offsets = Tensor(np.arange(-r, r + 1, dtype=np.float64) ** 2, dtype=log_sigma.dtype)
    inv_var = exp(log_sigma * -2.0)
    w = exp(offsets * inv_var * -0.5)
    return w / w.sum()


@functools.lru_cache(maxsize=64)
def _placement(r, n):
    # P[k, i, j] = 1 where output i draws input j through kernel tap k
    P = np.zeros((2 * r + 1, n, n))
    for k in range(2 * r + 1):
        for i in range(n):
            P[k, i, _reflect(i + k - r, n)] += 1.0
    return P


def blur_matrix(log_sigma, n):
    kern = gaussian_kernel(log_sigma)
    r = (kern.shape[0] - 1) // 2
    P = Tensor(_placement(r, n).reshape(2 * r + 1, n * n), dtype=kern.dtype)
    return matmul(kern.reshape(1, -1), P).reshape(n, n)


def smooth_prediction(pred, domain):
    """Separable Gaussian blur of a (…, H, W) map followed by renormalisation to sum 1."""
    H, W = pred.shape[-2:]
    Bh = blur_matrix(domain.smooth_log_sigma, H)
    Bw = blur_matrix(domain.smooth_log_sigma, W)
    out = matmul(matmul(Bh, pred), Bw.transpose(1, 0))
    total = out.sum(axis=(-2, -1), keepdims=True)
    return out / total

