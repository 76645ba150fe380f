"""End-to-end driver-attention model and its configuration."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from .domain import lookup, registry, smooth_prediction
from .encoder import BN_SITE, Encoder, EncoderConfig
from .memory_fusion import MemoryFusion, MemorySlab, WorkingMemoryHead
from .numerics import ConfigurationError, Tensor, conv2d, parameter, precision, softplus

ABLATIONS = ("full", "no_hmf", "no_sa", "no_ca")


@dataclass
class ModelConfig:
    frame_height: int = 32
    frame_width: int = 32
    stub_channels: tuple = (8, 16, 32)
    grid: int = 16
    gru_hidden: int = 8
    sa_residual: bool = True
    n_priors: int = 4
    mem_channels: int = 2
    upsample: int = 1
    heads: int = 4
    bank_size: int = 0  # 0 means one slot per frame (= seq_len)
    ema_alpha: float = 0.1
    update_position: str = "after_hmf"
    dropout: float = 0.1
    mhca_residual: bool = True
    channel_variant: str = "channel"
    ca_temperature: float | None = 0.25
    ablation: str = "full"
    seq_len: int = 5

    def encoder_config(self):
        return EncoderConfig(
            frame_height=self.frame_height,
            frame_width=self.frame_width,
            stub_channels=tuple(self.stub_channels),
            H=self.grid,
            W=self.grid,
            gru_hidden=self.gru_hidden,
            sa_residual=self.sa_residual,
            n_priors=self.n_priors,
        )

    @property
    def map_size(self):
        return self.grid * self.upsample

    @property
    def token_width(self):
        return self.mem_channels * self.map_size**2

    def to_dict(self):
        d = asdict(self)
        d["stub_channels"] = list(self.stub_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "stub_channels" in kw:
            kw["stub_channels"] = tuple(kw["stub_channels"])
        return cls(**kw)


def toy_config(**overrides):
    """The smallest model used by the end-to-end gradient check (T=2, C=2, H=W=4, heads=2)."""
    base = dict(
        frame_height=8,
        frame_width=8,
        stub_channels=(2, 2, 2),
        grid=4,
        gru_hidden=2,
        n_priors=1,
        mem_channels=2,
        upsample=1,
        heads=2,
        seq_len=2,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


class AttentionModel:
    """Encoder → working-memory head → hybrid memory fusion → prediction head."""

    def __init__(self, cfg: ModelConfig, domains, seed=0):
        if cfg.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {cfg.ablation!r}")
        domains = list(domains)
        if not domains:
            raise ConfigurationError("at least one domain is required")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ecfg = cfg.encoder_config()
        self.encoder = Encoder(ecfg, rng, use_spatial_attention=cfg.ablation != "no_sa")
        self.domains = registry(domains, n_priors=cfg.n_priors)
        for ctx in self.domains.values():
            ctx.add_bn_site(BN_SITE, ecfg.fused_channels)
        self.wm_head = WorkingMemoryHead(cfg.gru_hidden, cfg.mem_channels, cfg.upsample, rng)
        S = cfg.map_size
        self.fusion = MemoryFusion(
            cfg.mem_channels,
            S,
            S,
            rng,
            heads=cfg.heads,
            bank_size=cfg.bank_size or cfg.seq_len,
            ema_alpha=cfg.ema_alpha,
            update_position=cfg.update_position,
            dropout=cfg.dropout,
            residual=cfg.mhca_residual,
            use_channel_attention=cfg.ablation != "no_ca",
            channel_variant=cfg.channel_variant,
            ca_temperature=cfg.ca_temperature,
        )
        self.head_W = parameter(rng.standard_normal((1, cfg.mem_channels, 1, 1)) / np.sqrt(cfg.mem_channels), name="head.W")
        self.head_b = parameter(np.zeros(1), name="head.b")

    # ------------------------------------------------------------ parameters
    @property
    def uses_bank(self):
        return self.cfg.ablation != "no_hmf"

    def named_parameters(self):
        out = OrderedDict()
        for name, p in self.encoder.named_parameters():
            out[name] = p
        for name, p in self.wm_head.named_parameters():
            out[name] = p
        if self.uses_bank:
            for name, p in self.fusion.named_parameters():
                out[name] = p
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        for d in self.domains:
            for name, p in self.domains[d].named_parameters():
                out[name] = p
        return out

    def named_buffers(self):
        out = OrderedDict()
        for d in self.domains:
            for name, b in self.domains[d].named_buffers():
                out[name] = b
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def cast(self, dtype):
        """Convert every parameter in place (used by the float64 gradient check)."""
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    # ------------------------------------------------------------ forward
    def forward(self, frames, domain_id, mode="infer", rng=None):
        """Predict normalised attention maps, N×T×S×S, for a single-domain batch."""
        if mode not in ("train", "infer"):
            raise ConfigurationError(f"mode must be train or infer, got {mode!r}")
        domain = lookup(self.domains, domain_id)
        if not isinstance(frames, Tensor):
            frames = Tensor(frames, dtype=self.head_W.dtype)
        hidden = self.encoder.forward(frames, domain, "train" if mode == "train" else "eval")
        m_w = self.wm_head(hidden)
        fused = self.fusion(m_w, mode, rng, bypass=not self.uses_bank)
        n, t = fused.shape[:2]
        S = self.cfg.map_size
        logits = conv2d(fused.reshape(n * t, self.cfg.mem_channels, S, S), self.head_W, self.head_b)
        pos = softplus(logits).reshape(n, t, S, S)
        pred = pos / pos.sum(axis=(-2, -1), keepdims=True)
        return smooth_prediction(pred, domain)

    __call__ = forward

    def working_memory(self, frames, domain_id, mode="infer"):
        domain = lookup(self.domains, domain_id)
        hidden = self.encoder.forward(Tensor(frames, dtype=self.head_W.dtype), domain, "train" if mode == "train" else "eval")
        return self.wm_head(hidden)


def model_gradcheck_inputs(seed=0, dtype=np.float64):
    """Toy model and batch used for the end-to-end gradient check."""
    with precision(dtype):
        cfg = toy_config()
        model = AttentionModel(cfg, ["A"], seed=seed).cast(dtype)
    rng = np.random.default_rng(seed + 1)
    # move zero-initialised biases off the relu6 kink so central differences are meaningful
    for p in model.named_parameters().values():
        if p.data.ndim == 1 and not np.any(p.data):
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    # σ = 1 puts 3σ exactly on an integer, where the truncated kernel gains taps
    for ctx in model.domains.values():
        ctx.smooth_log_sigma.data = np.asarray(ctx.smooth_log_sigma.data + 0.1)
    frames = rng.random((2, cfg.seq_len, 3, cfg.frame_height, cfg.frame_width))
    gt = rng.random((2, cfg.seq_len, cfg.map_size, cfg.map_size)) + 0.1
    gt = gt / gt.sum(axis=(-2, -1), keepdims=True)
    return model, frames, gt
