"""Hybrid memory fusion between working memory and a long-term memory bank.

Working memory is the encoder output turned into one flat token per frame.
The long-term bank is a small set of learnable tokens of the same width.
Two multi-head cross-attention (MHCA) blocks exchange information:

* enhance:  queries from working memory, keys/values from the bank;
* update:   queries from the bank, keys/values from (enhanced) working memory.

The update block only runs in training mode.  Its result is blended into the
bank slots outside the gradient tape (an EMA write-back) once the optimizer
step has finished.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ConfigurationError,
    DimensionError,
    Tensor,
    conv2d,
    dropout,
    layer_norm,
    linear,
    matmul,
    parameter,
    relu6,
    softmax,
    stack,
    upsample_nearest,
)

ORIGINS = ("working", "long_term", "enhanced")
UPDATE_POSITIONS = ("after_hmf", "after_ca")


class ModeError(RuntimeError):
    """Operation not permitted in the current train/infer mode."""


@dataclass
class MemorySlab:
    """Flattened per-frame tokens, T×D (or N×T×D for a batch)."""

    tokens: Tensor
    origin: str = "working"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown slab origin {self.origin!r}")

    @property
    def width(self):
        return self.tokens.shape[-1]

    @property
    def length(self):
        return self.tokens.shape[-2]


@dataclass
class LongTermBank:
    slots: Tensor
    ema_alpha: float = 0.1
    update_position: str = "after_hmf"
    pending: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.slots.shape[0] < 1:
            raise ConfigurationError("long-term bank needs at least one slot")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigurationError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        if self.update_position not in UPDATE_POSITIONS:
            raise ConfigurationError(f"update_position must be one of {UPDATE_POSITIONS}")

    @classmethod
    def create(cls, M, D, rng, **kw):
        return cls(parameter(rng.standard_normal((M, D)), name="bank.slots"), **kw)

    def commit(self):
        """Apply the pending write-back, if any; returns True when slots changed."""
        if self.pending is None:
            return False
        a = self.ema_alpha
        new = (1.0 - a) * self.slots.data + a * self.pending
        if not np.all(np.isfinite(new)):
            raise FloatingPointError("bank write-back produced non-finite slots")
        self.slots.data[...] = new.astype(self.slots.dtype)
        self.pending = None
        return True


class MhcaParams:
    """Projections, output layer and post-attention layer norm of one MHCA block."""

    def __init__(self, D, heads, rng, name="mhca", dropout=0.0, residual=True):
        if heads < 1 or D % heads:
            raise ConfigurationError(f"heads={heads} must divide token width D={D}")
        self.D, self.heads, self.name = D, heads, name
        self.dropout, self.residual = dropout, residual
        s = 1.0 / math.sqrt(D)
        for key in ("q", "k", "v", "o"):
            setattr(self, f"W{key}", parameter(rng.standard_normal((D, D)) * s, name=f"{name}.W{key}"))
            setattr(self, f"b{key}", parameter(np.zeros(D), name=f"{name}.b{key}"))
        self.ln_gamma = parameter(np.ones(D), name=f"{name}.ln_gamma")
        self.ln_beta = parameter(np.zeros(D), name=f"{name}.ln_beta")

    @property
    def head_dim(self):
        return self.D // self.heads

    def named_parameters(self):
        for key in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "ln_gamma", "ln_beta"):
            yield f"{self.name}.{key}", getattr(self, key)


# ------------------------------------------------------------------ ops


def positional_encoding(T, D, dtype=np.float32):
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if D % 2:
        raise ConfigurationError(f"positional encoding needs an even width, got {D}")
    t = np.arange(T, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, D, 2, dtype=np.float64) / D)
    pe = np.empty((T, D))
    pe[:, 0::2] = np.sin(t * freq)
    pe[:, 1::2] = np.cos(t * freq)
    return pe.astype(dtype)


def _split_heads(x, heads):
    # (..., L, D) -> (..., heads, L, D/heads)
    *lead, L, D = x.shape
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return x.reshape(*lead, L, heads, D // heads).transpose(perm)


def _merge_heads(x):
    *lead, h, L, d = x.shape
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return x.transpose(perm).reshape(*lead, L, h * d)


def mhca(q_slab, kv_slab, params, training=False, rng=None, return_attention=False, origin="enhanced"):
    """Multi-head cross-attention from ``q_slab`` tokens onto ``kv_slab`` tokens.

    Sinusoidal position codes are added to the projected queries and keys (not
    the values).  After the output projection come dropout, the residual from
    the query tokens (when ``params.residual``) and layer norm.
    """
    xq = q_slab.tokens if isinstance(q_slab, MemorySlab) else q_slab
    xkv = kv_slab.tokens if isinstance(kv_slab, MemorySlab) else kv_slab
    if xq.shape[-1] != params.D or xkv.shape[-1] != params.D:
        raise ConfigurationError(f"token widths {xq.shape[-1]}/{xkv.shape[-1]} do not match MHCA width {params.D}")
    Lq, Lk = xq.shape[-2], xkv.shape[-2]
    dt = xq.dtype
    q = linear(xq, params.Wq, params.bq) + Tensor(positional_encoding(Lq, params.D, dt), dtype=dt)
    k = linear(xkv, params.Wk, params.bk) + Tensor(positional_encoding(Lk, params.D, dt), dtype=dt)
    v = linear(xkv, params.Wv, params.bv)
    qh, kh, vh = (_split_heads(a, params.heads) for a in (q, k, v))
    scores = matmul(qh, kh.transpose(*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2)) * (
        1.0 / math.sqrt(params.head_dim)
    )
    attn = softmax(scores, axis=-1)
    ctx = _merge_heads(matmul(attn, vh))
    out = dropout(linear(ctx, params.Wo, params.bo), params.dropout, rng, training)
    if params.residual:
        out = out + xq
    out = layer_norm(out, params.ln_gamma, params.ln_beta)
    slab = MemorySlab(out, origin)
    return (slab, attn) if return_attention else slab


def enhance_working(m_w, bank, params, training=False, rng=None):
    """Working-memory queries attend over the long-term bank."""
    return mhca(m_w, MemorySlab(bank.slots, "long_term"), params, training, rng)


def update_long_term(bank, m_w_source, params, mode="train"):
    """Compute the bank's cross-attended update from ``m_w_source`` and stage it.

    The blend ``slots ← (1−α)·slots + α·m_l^e`` is applied by
    :meth:`LongTermBank.commit`; per-sequence results in a batch are averaged.
    Returns the staged m_l^e array.
    """
    if mode != "train":
        raise ModeError("the long-term bank is frozen outside training")
    src = m_w_source.tokens if isinstance(m_w_source, MemorySlab) else m_w_source
    src = Tensor(src.data, dtype=src.dtype)  # no gradient flows through the write-back
    slots = Tensor(bank.slots.data, dtype=bank.slots.dtype)
    if src.ndim == 3:
        n = src.shape[0]
        slots = stack([slots] * n, axis=0)
    m_le = mhca(slots, src, params, training=False, origin="long_term").tokens.data
    if m_le.ndim == 3:
        m_le = m_le.mean(axis=0)
    bank.pending = m_le.astype(bank.slots.dtype)
    return bank.pending


def channel_attention(x, return_attention=False, scale=1.0):
    """Parameter-free attention across channels of a (…, C, H, W) map.

    Each channel is a vector over pixels; y_i = Σ_j softmax_j(scale·x_i·x_j) x_j.
    With scale 1 and layer-normed inputs of a few hundred pixels the softmax is
    one-hot to float32 precision, which makes the block an exact identity.
    """
    *lead, c, h, w = x.shape
    flat = x.reshape(*lead, c, h * w)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl)
    scores = matmul(flat, flat.transpose(perm))
    if scale != 1.0:
        scores = scores * scale
    attn = softmax(scores, axis=-1)
    y = matmul(attn, flat).reshape(*lead, c, h, w)
    return (y, attn) if return_attention else y


def channel_attention_spatial(x):
    """Literal-index variant: attention across pixels with channel vectors, no projections."""
    *lead, c, h, w = x.shape
    nl = len(lead)
    flat = x.reshape(*lead, c, h * w)
    perm = tuple(range(nl)) + (nl + 1, nl)
    pix = flat.transpose(perm)  # (..., hw, c)
    attn = softmax(matmul(pix, flat), axis=-1)
    return matmul(attn, pix).transpose(perm).reshape(*lead, c, h, w)


# ------------------------------------------------------------------ working-memory head


class WorkingMemoryHead:
    """Inverted residual block (expand → depthwise → project) plus upsampling."""

    def __init__(self, in_channels, out_channels, upsample, rng, expansion=2):
        hidden = in_channels * expansion
        if out_channels < 1 or out_channels > hidden:
            raise ConfigurationError(
                f"memory channels {out_channels} incompatible with {in_channels}×{expansion} expansion"
            )
        if upsample < 1:
            raise ConfigurationError("upsample factor must be >= 1")
        self.upsample = upsample
        self.We = parameter(rng.standard_normal((hidden, in_channels, 1, 1)) * np.sqrt(2.0 / in_channels), name="wm.We")
        self.be = parameter(np.zeros(hidden), name="wm.be")
        self.Wd = parameter(rng.standard_normal((hidden, 1, 3, 3)) * np.sqrt(2.0 / 9), name="wm.Wd")
        self.bd = parameter(np.zeros(hidden), name="wm.bd")
        self.Wp = parameter(rng.standard_normal((out_channels, hidden, 1, 1)) / np.sqrt(hidden), name="wm.Wp")
        self.bp = parameter(np.zeros(out_channels), name="wm.bp")

    def named_parameters(self):
        for key in ("We", "be", "Wd", "bd", "Wp", "bp"):
            yield f"wm_head.{key}", getattr(self, key)

    def __call__(self, encoded):
        return working_memory_head(encoded, self)


def working_memory_head(encoded, head):
    """Map a (N,)T×Ch×H×W encoder volume to one flat token per frame."""
    vol = encoded.values if hasattr(encoded, "values") else encoded
    *lead, c, h, w = vol.shape
    frames = vol.reshape(-1, c, h, w)
    hid = head.We.shape[0]
    x = relu6(conv2d(frames, head.We, head.be))
    x = relu6(conv2d(x, head.Wd, head.bd, padding=1, groups=hid))
    x = conv2d(x, head.Wp, head.bp)
    x = upsample_nearest(x, head.upsample)
    return MemorySlab(x.reshape(*lead, -1), "working")


# ------------------------------------------------------------------ fusion


class MemoryFusion:
    """Both MHCA blocks, the bank and channel attention, wired as in the model."""

    def __init__(self, C, H, W, rng, heads=4, bank_size=5, ema_alpha=0.1, update_position="after_hmf",
                 dropout=0.1, residual=True, use_channel_attention=True, channel_variant="channel",
                 ca_temperature=0.25):
        self.C, self.H, self.W = C, H, W
        D = C * H * W
        self.enhance = MhcaParams(D, heads, rng, "hmf.enhance", dropout, residual)
        self.update = MhcaParams(D, heads, rng, "hmf.update", dropout, residual)
        self.bank = LongTermBank.create(bank_size, D, rng, ema_alpha=ema_alpha, update_position=update_position)
        self.use_channel_attention = use_channel_attention
        if channel_variant not in ("channel", "spatial"):
            raise ConfigurationError(f"unknown channel-attention variant {channel_variant!r}")
        self.channel_variant = channel_variant
        # None keeps the raw dot product; otherwise scores are mean per-pixel products / temperature
        self.ca_scale = 1.0 if ca_temperature is None else 1.0 / (ca_temperature * H * W)

    @property
    def D(self):
        return self.C * self.H * self.W

    def named_parameters(self):
        yield from self.enhance.named_parameters()
        yield from self.update.named_parameters()
        yield "bank.slots", self.bank.slots

    def attend_channels(self, x):
        if not self.use_channel_attention:
            return x
        if self.channel_variant == "spatial":
            return channel_attention_spatial(x)
        return channel_attention(x, scale=self.ca_scale)

    def __call__(self, m_w, mode="infer", rng=None, bypass=False):
        return fuse(m_w, self, mode, rng, bypass)


def fuse(m_w, fusion, mode="infer", rng=None, bypass=False):
    """Enhance working memory with the bank, reshape, apply channel attention.

    In train mode the bank update is staged (see :func:`update_long_term`) after
    the prediction path has been computed, so the current step never sees it.
    ``bypass`` skips both MHCA blocks and the bank (the no-HMF ablation).
    """
    if mode not in ("train", "infer"):
        raise ModeError(f"unknown mode {mode!r}")
    tokens = m_w.tokens if isinstance(m_w, MemorySlab) else m_w
    if tokens.shape[-1] != fusion.D:
        raise DimensionError(f"working-memory width {tokens.shape[-1]} != C·H·W = {fusion.D}")
    training = mode == "train"
    if bypass:
        enhanced = tokens
    else:
        enhanced = enhance_working(m_w if isinstance(m_w, MemorySlab) else MemorySlab(tokens),
                                   fusion.bank, fusion.enhance, training, rng).tokens
    vol = enhanced.reshape(*enhanced.shape[:-1], fusion.C, fusion.H, fusion.W)
    out = fusion.attend_channels(vol)
    if training and not bypass:
        if fusion.bank.update_position == "after_hmf":
            src = enhanced
        else:
            src = out.reshape(*out.shape[:-3], fusion.D)
        update_long_term(fusion.bank, MemorySlab(src, "enhanced"), fusion.update, mode)
    return out
