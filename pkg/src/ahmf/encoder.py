"""Temporal-spatial working-memory encoder.

Per frame: a strided-conv feature pyramid, nearest-upsampled to a common grid
and concatenated; non-local spatial attention over that grid; domain batch
norm; domain Gaussian priors appended as extra channels; then one Conv-GRU
step.  The hidden states over time form the working memory.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import domain_batch_norm, render_priors
from .memory_fusion import MemorySlab
from .numerics import (
    ConfigurationError,
    DimensionError,
    Tensor,
    concat,
    conv2d,
    matmul,
    parameter,
    relu6,
    sigmoid,
    softmax,
    stack,
    tanh,
    upsample_nearest,
)

BN_SITE = "spatial"


@dataclass
class EncoderConfig:
    frame_channels: int = 3
    frame_height: int = 32
    frame_width: int = 32
    stub_channels: tuple = (8, 16, 32)
    H: int = 16
    W: int = 16
    gru_hidden: int = 8
    gru_kernel: int = 3
    sa_key_channels: int = 0  # 0 means fused_channels // 2
    sa_residual: bool = True
    attention_cap: int = 1024
    n_priors: int = 4

    @property
    def stub_levels(self):
        return len(self.stub_channels)

    @property
    def fused_channels(self):
        return int(sum(self.stub_channels))

    @property
    def key_channels(self):
        return self.sa_key_channels or max(1, self.fused_channels // 2)

    def level_shapes(self):
        return [
            (c, self.frame_height // 2 ** (l + 1), self.frame_width // 2 ** (l + 1))
            for l, c in enumerate(self.stub_channels)
        ]

    def validate(self):
        div = 2**self.stub_levels
        if self.frame_height % div or self.frame_width % div:
            raise ConfigurationError(
                f"frame {self.frame_height}×{self.frame_width} not divisible by 2^{self.stub_levels}"
            )
        for c, h, w in self.level_shapes():
            if self.H % h or self.W % w:
                raise ConfigurationError(f"pyramid level {h}×{w} does not divide target grid {self.H}×{self.W}")
        if self.H * self.W > self.attention_cap:
            raise ConfigurationError(
                f"spatial attention over {self.H}×{self.W} tokens exceeds cap {self.attention_cap}; "
                "use a smaller toy grid"
            )
        if self.gru_kernel % 2 == 0:
            raise ConfigurationError("Conv-GRU kernel size must be odd")
        return self


@dataclass
class FeatureVolume:
    """A (N,)T×C×H×W stack of per-frame feature maps."""

    values: Tensor

    @property
    def time(self):
        return self.values.shape[-4]

    @property
    def channels(self):
        return self.values.shape[-3]


def _init(rng, shape, fan_in, gain=1.0):
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


# ------------------------------------------------------------------ ops


def backbone_stub(frame, weights, cfg):
    """Strided 3×3 conv pyramid with relu6; returns one map per level (strides 2, 4, 8, …)."""
    h, w = frame.shape[-2:]
    div = 2 ** len(weights)
    if h % div or w % div:
        raise ConfigurationError(f"frame extents {h}×{w} not divisible by {div}")
    levels, x = [], frame
    for K, b in weights:
        x = relu6(conv2d(x, K, b, padding=K.shape[-1] // 2, stride=2))
        levels.append(x)
    return levels


def fuse_pyramid(levels, H, W):
    """Nearest-upsample every level to H×W and concatenate channels in level order."""
    ups = []
    for lv in levels:
        h, w = lv.shape[-2:]
        if H % h or W % w or H // h != W // w:
            raise ConfigurationError(f"level {h}×{w} cannot be upsampled to {H}×{W}")
        ups.append(upsample_nearest(lv, H // h))
    return concat(ups, axis=-3)


def spatial_attention(x, theta, phi, omega, cap=None, residual=False, return_attention=False):
    """Non-local attention over pixels with 1×1-conv projections.

    y_i = Σ_j softmax_j((θ x_i)·(φ x_j)) · ω x_j, computed for all pixels at once.
    """
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    n, c, h, w = x.shape
    if cap is not None and h * w > cap:
        raise ConfigurationError(f"spatial attention over {h * w} pixels exceeds cap {cap}; use a smaller grid")
    for K in (theta, phi, omega):
        if K.shape[-2:] != (1, 1):
            raise ConfigurationError("spatial attention projections must be 1×1 kernels")
    q = conv2d(x, theta).reshape(n, -1, h * w).transpose(0, 2, 1)  # n hw k
    k = conv2d(x, phi).reshape(n, -1, h * w)  # n k hw
    v = conv2d(x, omega).reshape(n, -1, h * w)  # n c' hw
    attn = softmax(matmul(q, k), axis=-1)  # n hw hw, rows index i
    y = matmul(v, attn.transpose(0, 2, 1)).reshape(n, -1, h, w)
    if residual:
        y = y + x
    if single:
        y = y.reshape(*y.shape[1:])
    return (y, attn) if return_attention else y


def concat_priors(x, priors):
    """Append prior channels after the feature channels (C×H×W or N×C×H×W)."""
    if priors.shape[0] == 0:
        return x
    if x.shape[-2:] != priors.shape[-2:]:
        raise DimensionError(f"priors {priors.shape} do not match features {x.shape}")
    if x.ndim == 4:
        tiled = concat([priors.reshape(1, *priors.shape)] * x.shape[0], axis=0)
        return concat([x, tiled], axis=1)
    return concat([x, priors], axis=0)


def conv_gru_step(x_t, h_prev, params):
    """One Conv-GRU update.

    ``params`` holds ``Wzr``/``bzr`` (update and reset gates stacked along the
    output channels) and ``Wh``/``bh`` for the candidate state.
    """
    if x_t.shape[-2:] != h_prev.shape[-2:] or x_t.ndim != h_prev.ndim:
        raise DimensionError(f"Conv-GRU input {x_t.shape} and hidden {h_prev.shape} disagree")
    ch = h_prev.shape[-3]
    pad = params["Wh"].shape[-1] // 2
    axis = -3
    gates = sigmoid(conv2d(concat([x_t, h_prev], axis=axis), params["Wzr"], params["bzr"], padding=pad))
    if gates.ndim == 4:
        z, r = gates[:, :ch], gates[:, ch:]
    else:
        z, r = gates[:ch], gates[ch:]
    cand = tanh(conv2d(concat([x_t, r * h_prev], axis=axis), params["Wh"], params["bh"], padding=pad))
    return (1.0 - z) * h_prev + z * cand


# ------------------------------------------------------------------ module


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng, use_spatial_attention=True):
        self.cfg = cfg.validate()
        self.use_spatial_attention = use_spatial_attention
        self.stub = []
        cin = cfg.frame_channels
        for l, c in enumerate(cfg.stub_channels):
            fan = cin * 9
            self.stub.append(
                (
                    parameter(_init(rng, (c, cin, 3, 3), fan, np.sqrt(2.0)), name=f"stub{l}.K"),
                    parameter(np.zeros(c), name=f"stub{l}.b"),
                )
            )
            cin = c
        C = cfg.fused_channels
        if use_spatial_attention:
            ck = cfg.key_channels
            self.theta = parameter(_init(rng, (ck, C, 1, 1), C), name="sa.theta")
            self.phi = parameter(_init(rng, (ck, C, 1, 1), C), name="sa.phi")
            self.omega = parameter(_init(rng, (C, C, 1, 1), C), name="sa.omega")
        else:
            # parameter-matched stand-in: a plain 1×1 conv with the same channel count
            self.proj = parameter(_init(rng, (C, C, 1, 1), C), name="sa.proj")
            self.proj_b = parameter(np.zeros(C), name="sa.proj_b")
        cx = C + cfg.n_priors + cfg.gru_hidden
        ch, k = cfg.gru_hidden, cfg.gru_kernel
        self.gru = {
            "Wzr": parameter(_init(rng, (2 * ch, cx, k, k), cx * k * k), name="gru.Wzr"),
            "bzr": parameter(np.zeros(2 * ch), name="gru.bzr"),
            "Wh": parameter(_init(rng, (ch, cx, k, k), cx * k * k), name="gru.Wh"),
            "bh": parameter(np.zeros(ch), name="gru.bh"),
        }

    def named_parameters(self):
        for l, (K, b) in enumerate(self.stub):
            yield f"encoder.stub{l}.K", K
            yield f"encoder.stub{l}.b", b
        if self.use_spatial_attention:
            yield "encoder.sa.theta", self.theta
            yield "encoder.sa.phi", self.phi
            yield "encoder.sa.omega", self.omega
        else:
            yield "encoder.sa.proj", self.proj
            yield "encoder.sa.proj_b", self.proj_b
        for key in ("Wzr", "bzr", "Wh", "bh"):
            yield f"encoder.gru.{key}", self.gru[key]

    def frame_features(self, frame, domain, mode):
        cfg = self.cfg
        x = fuse_pyramid(backbone_stub(frame, self.stub, cfg), cfg.H, cfg.W)
        if self.use_spatial_attention:
            x = spatial_attention(x, self.theta, self.phi, self.omega, cfg.attention_cap, cfg.sa_residual)
        else:
            x = conv2d(x, self.proj, self.proj_b)
        x = domain_batch_norm(x, domain, BN_SITE, mode)
        return concat_priors(x, render_priors(domain, cfg.H, cfg.W))

    def forward(self, frames, domain, mode="train"):
        """Encode an N×T×3×H₀×W₀ batch; returns the hidden states as N×T×Ch×H×W."""
        if not isinstance(frames, Tensor):
            frames = Tensor(frames)
        n, t = frames.shape[:2]
        if t < 1:
            raise ConfigurationError("need at least one frame")
        cfg = self.cfg
        h = Tensor(np.zeros((n, cfg.gru_hidden, cfg.H, cfg.W)), dtype=frames.dtype)
        states = []
        for i in range(t):
            x = self.frame_features(frames[:, i], domain, mode)
            h = conv_gru_step(x, h, self.gru)
            states.append(h)
        return stack(states, axis=1)


def encode_sequence(frames, domain, encoder, mode="eval"):
    """Encode one T×3×H₀×W₀ sequence (or an N×T batch) into a working-memory slab."""
    if not isinstance(frames, Tensor):
        frames = Tensor(frames)
    single = frames.ndim == 4
    if single:
        frames = frames.reshape(1, *frames.shape)
    hidden = encoder.forward(frames, domain, mode)
    n, t = hidden.shape[:2]
    tokens = hidden.reshape(t, -1) if single else hidden.reshape(n, t, -1)
    return MemorySlab(tokens, "working")
