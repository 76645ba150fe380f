"""Joint multi-domain training: schedule, SGD with momentum, loss, checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data_synth import FormatError, _atomic_write, decode_tensor, encode_tensor, fixations_from
from .metrics import COLUMNS, evaluate_sample, summarize
from .model import ABLATIONS, AttentionModel, ModelConfig
from .numerics import ConfigurationError, Tensor, log

log_ = logging.getLogger(__name__)

CKPT_MAGIC = b"AHMFCKP1"
LOSS_EPS = 1e-7
HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_auc_j", "val_sim", "val_cc", "val_kld", "val_nss")


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr0: float = 0.01
    decay: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 16
    patience: int = 3
    seed: int = 0
    ablation: str = "full"
    seq_len: int = 5
    update_position: str = "after_hmf"
    max_steps: int = 0  # 0 = no step limit
    frame_reduction: str = "sum"  # how per-frame losses combine: "sum" or "mean"

    def validate(self):
        for name in ("lr0", "decay", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be nonnegative")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.max_epochs < 0 or self.max_steps < 0:
            raise ConfigurationError("max_epochs and max_steps must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}")
        if self.seq_len < 1:
            raise ConfigurationError("seq_len must be >= 1")
        if self.frame_reduction not in ("sum", "mean"):
            raise ConfigurationError("frame_reduction must be sum or mean")
        return self


def lr_at(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay**epoch


def sgd_step(params, grads, state, lr, cfg):
    """In-place momentum SGD with coupled weight decay.

    ``params`` maps names to tensors, ``grads`` names to arrays (or None to
    skip the parameter), ``state`` holds the velocity buffers.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        g = g + cfg.weight_decay * p.data
        v = state.get(name)
        v = g if v is None else cfg.momentum * v + g
        state[name] = v
        p.data -= lr * v
    return params


def kld_loss(pred, gt, eps=LOSS_EPS, frame_reduction="sum"):
    """KLD(gt‖pred) per frame, summed (or averaged) over frames, averaged over the batch."""
    gt = np.asarray(gt, dtype=pred.dtype)
    ratio = Tensor(gt, dtype=pred.dtype) / (pred + eps)
    per_pixel = log(ratio + eps) * gt
    per_frame = per_pixel.sum(axis=(-2, -1))
    if frame_reduction == "sum":
        return per_frame.sum() * (1.0 / per_frame.shape[0])
    return per_frame.mean()


def loss(pred, gt, eps=LOSS_EPS):
    """KLD of a single normalised map pair (or stack), averaged over leading axes."""
    gt = np.asarray(gt)
    if gt.ndim == 2:
        gt = gt[None, None]
        pred = pred.reshape(1, 1, *pred.shape)
    return kld_loss(pred, gt, eps, frame_reduction="mean")


def early_stop(history, patience=3):
    if len(history) < patience + 1:
        return False
    tail = history[-(patience + 1):]
    return all(tail[i + 1] < tail[i] for i in range(patience))


def joint_schedule(sizes, batch_size, seed, epoch=0):
    """Shuffled interleaving of single-domain batches: a list of (domain, indices)."""
    if not sizes:
        raise ConfigurationError("joint schedule needs at least one domain")
    rng = np.random.default_rng([seed, epoch])
    batches = []
    for domain in sorted(sizes):
        n = sizes[domain]
        if n < 1:
            raise ConfigurationError(f"domain {domain!r} has an empty dataset")
        order = rng.permutation(n)
        batches.extend((domain, order[i:i + batch_size]) for i in range(0, n, batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


# ------------------------------------------------------------------ data plumbing


def pool_map(m, size):
    """Block-sum a (…, H, W) map down to size×size; keeps normalisation."""
    h, w = m.shape[-2:]
    if h == size and w == size:
        return m
    if h % size or w % size:
        raise ConfigurationError(f"map {h}×{w} cannot be pooled to {size}×{size}")
    f = h // size
    return m.reshape(*m.shape[:-2], size, f, size, f).sum(axis=(-3, -1))


def targets(sample, size, seq_len):
    """Frames, pooled gt and matching top-3 fixations for the last ``seq_len`` frames."""
    s = sample.window(seq_len)
    gt = pool_map(s.gt.astype(np.float64), size)
    with np.errstate(invalid="ignore", divide="ignore"):
        gt = gt / gt.sum(axis=(-2, -1), keepdims=True)  # an all-zero map becomes NaN and is skipped later
    fix = np.stack([fixations_from(g) for g in gt])
    return s.frames, gt.astype(np.float32), fix.astype(np.float32)


def batch_arrays(samples, size, seq_len):
    parts = [targets(s, size, seq_len) for s in samples]
    return tuple(np.stack(p) for p in zip(*parts))


def predict(model, samples, domain_id, batch_size=4):
    """Inference-mode predictions for a list of same-domain samples."""
    out = []
    S, T = model.cfg.map_size, model.cfg.seq_len
    for i in range(0, len(samples), batch_size):
        frames, _, _ = batch_arrays(samples[i:i + batch_size], S, T)
        out.append(model(frames, domain_id, mode="infer").data)
    return np.concatenate(out) if out else np.zeros((0, T, S, S), np.float32)


def evaluate(model, data, batch_size=4):
    """Per-sample metric rows for a {domain: samples} dict, in domain then sample order."""
    rows = []
    S, T = model.cfg.map_size, model.cfg.seq_len
    for domain in sorted(data):
        samples = data[domain]
        preds = predict(model, samples, domain, batch_size)
        for s, p in zip(samples, preds):
            _, gt, fix = targets(s, S, T)
            rows.append(evaluate_sample(gt, fix, p.astype(np.float64), domain))
    return rows


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    model_cfg: dict
    train_cfg: dict
    domains: list
    tensors: dict  # name -> ndarray; params, buffers, velocities ("velocity/<name>")
    epoch: int = 0
    batch_index: int = 0
    step: int = 0
    rng_state: dict | None = None
    val_history: list | None = None

    def to_bytes(self):
        names = sorted(self.tensors)
        manifest = {
            "model_cfg": self.model_cfg,
            "train_cfg": self.train_cfg,
            "domains": self.domains,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "step": self.step,
            "rng_state": self.rng_state,
            "val_history": self.val_history or [],
            "tensors": [[n, list(np.shape(self.tensors[n]))] for n in names],
        }
        head = json.dumps(manifest, sort_keys=True).encode("utf-8")
        body = b"".join(encode_tensor(self.tensors[n]) for n in names)
        return CKPT_MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, buf):
        if buf[:8] != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic at byte 0: {bytes(buf[:8])!r}")
        if len(buf) < 12:
            raise FormatError("truncated checkpoint header at byte 8")
        (n,) = struct.unpack_from("<I", buf, 8)
        if len(buf) < 12 + n:
            raise FormatError(f"truncated checkpoint manifest at byte {len(buf)}")
        try:
            manifest = json.loads(buf[12:12 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable checkpoint manifest at byte 12: {exc}") from None
        pos, tensors = 12 + n, {}
        for name, shape in manifest["tensors"]:
            arr, pos = decode_tensor(buf, pos)
            if list(arr.shape) != shape:
                raise FormatError(f"tensor {name!r} has shape {arr.shape}, manifest says {shape}")
            tensors[name] = arr
        if pos != len(buf):
            raise FormatError(f"{len(buf) - pos} trailing bytes at byte {pos}")
        return cls(manifest["model_cfg"], manifest["train_cfg"], manifest["domains"], tensors,
                   manifest["epoch"], manifest["batch_index"], manifest["step"], manifest["rng_state"],
                   manifest["val_history"])

    def save(self, path):
        _atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self):
        model = AttentionModel(ModelConfig.from_dict(self.model_cfg), self.domains, seed=0)
        load_state(model, self.tensors)
        return model

    @property
    def has_bank(self):
        return "param/bank.slots" in self.tensors and self.model_cfg.get("ablation") != "no_hmf"


def model_state(model):
    out = {}
    for name, p in model.named_parameters().items():
        out[f"param/{name}"] = p.data.copy()
    if not model.uses_bank:
        # the bank still exists on the object; keep it so inspect tools see it untouched
        out["param/bank.slots"] = model.fusion.bank.slots.data.copy()
    for name, b in model.named_buffers().items():
        out[f"buffer/{name}"] = b.copy()
    return out


def load_state(model, tensors):
    params = model.named_parameters()
    if not model.uses_bank:
        params["bank.slots"] = model.fusion.bank.slots
    buffers = model.named_buffers()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint lacks parameter {name!r}")
        if tensors[key].shape != p.shape:
            raise FormatError(f"parameter {name!r}: checkpoint shape {tensors[key].shape} != model {p.shape}")
        p.data = tensors[key].astype(p.dtype).copy()
    for name, b in buffers.items():
        key = f"buffer/{name}"
        if key in tensors:
            b[...] = tensors[key]
    return model


# ------------------------------------------------------------------ trainer


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for h in history:
        w.writerow([h["epoch"]] + [repr(float(h[k])) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


class Trainer:
    """Stateful training loop; every step is reproducible from a checkpoint."""

    def __init__(self, cfg, model_cfg, data, val_data=None, domains=None, checkpoint=None):
        self.cfg = cfg.validate()
        if not data or any(len(v) == 0 for v in data.values()):
            raise ConfigurationError("training data must hold at least one sample per domain")
        model_cfg.ablation = cfg.ablation
        model_cfg.seq_len = cfg.seq_len
        model_cfg.update_position = cfg.update_position
        self.model_cfg = model_cfg
        self.data = data
        self.val_data = val_data
        self.domains = list(domains) if domains is not None else sorted(data)
        missing = set(data) - set(self.domains)
        if missing:
            raise ConfigurationError(f"data for unregistered domains {sorted(missing)}")
        self.model = AttentionModel(model_cfg, self.domains, seed=cfg.seed)
        self.initial_bank = self.model.fusion.bank.slots.data.copy()
        self.velocity = {}
        self.epoch = 0
        self.batch_index = 0
        self.step_count = 0
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.history = []
        self.val_history = []
        if checkpoint is not None:
            self.restore(checkpoint)
        self.last_good = self.checkpoint()

    # -------------------------------------------------------- state
    def checkpoint(self):
        tensors = model_state(self.model)
        for name, v in self.velocity.items():
            tensors[f"velocity/{name}"] = v.copy()
        return Checkpoint(
            self.model_cfg.to_dict(), asdict(self.cfg), list(self.domains), tensors,
            self.epoch, self.batch_index, self.step_count, self.rng.bit_generator.state,
            list(self.val_history),
        )

    def restore(self, ckpt):
        load_state(self.model, ckpt.tensors)
        self.velocity = {k[len("velocity/"):]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("velocity/")}
        self.epoch, self.batch_index, self.step_count = ckpt.epoch, ckpt.batch_index, ckpt.step
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.val_history = list(ckpt.val_history or [])

    # -------------------------------------------------------- loop
    def schedule(self, epoch):
        sizes = {d: len(v) for d, v in self.data.items()}
        return joint_schedule(sizes, self.cfg.batch_size, self.cfg.seed, epoch)

    def step(self, domain, idx):
        """One optimizer step on a single-domain batch; returns the loss value."""
        model = self.model
        samples = [self.data[domain][i] for i in idx]
        frames, gt, _ = batch_arrays(samples, model.cfg.map_size, model.cfg.seq_len)
        ok = np.all(np.isfinite(gt), axis=(1, 2, 3))
        if not ok.all():
            log_.warning("skipping %d sample(s) with degenerate ground truth in domain %s",
                         int((~ok).sum()), domain)
            if not ok.any():
                return math.nan
            frames, gt = frames[ok], gt[ok]
        model.zero_grad()
        pred = model(frames, domain, mode="train", rng=self.rng)
        L = kld_loss(pred, gt, frame_reduction=self.cfg.frame_reduction)
        value = float(L.data)
        if not math.isfinite(value):
            model.fusion.bank.pending = None
            raise NumericError(f"non-finite loss at step {self.step_count}")
        L.backward()
        params = model.named_parameters()
        grads = {n: p.grad for n, p in params.items()}
        sgd_step(params, grads, self.velocity, lr_at(self.epoch, self.cfg), self.cfg)
        if model.uses_bank:
            model.fusion.bank.commit()
        self.step_count += 1
        return value

    def run_epoch(self):
        """Finish the current epoch (possibly resumed mid-way); returns mean loss or None if cut short."""
        batches = self.schedule(self.epoch)
        losses = []
        while self.batch_index < len(batches):
            if self.cfg.max_steps and self.step_count >= self.cfg.max_steps:
                return None, losses
            domain, idx = batches[self.batch_index]
            value = self.step(domain, idx)
            if not math.isnan(value):
                losses.append(value)
            self.batch_index += 1
        return float(np.mean(losses)) if losses else math.nan, losses

    def validate(self):
        if not self.val_data:
            return {k: math.nan for k in COLUMNS}
        first = self.domains[0] if self.domains[0] in self.val_data else sorted(self.val_data)[0]
        rows = evaluate(self.model, {first: self.val_data[first]}, self.cfg.batch_size)
        return summarize(rows)[first]

    def run(self, on_epoch=None):
        """Train until max_epochs, max_steps or early stopping. Returns the history list."""
        while self.epoch < self.cfg.max_epochs:
            lr = lr_at(self.epoch, self.cfg)
            try:
                mean_loss, _ = self.run_epoch()
            except NumericError:
                log_.error("numeric failure in epoch %d; keeping last-good checkpoint", self.epoch)
                raise
            if mean_loss is None:
                break
            metrics = self.validate()
            row = {"epoch": self.epoch, "lr": lr, "train_loss": mean_loss}
            row.update({f"val_{k}": metrics[k] for k in COLUMNS})
            self.history.append(row)
            self.epoch += 1
            self.batch_index = 0
            self.last_good = self.checkpoint()
            if on_epoch is not None:
                on_epoch(row)
            if self.val_data:
                self.val_history.append(metrics["cc"])
                if early_stop(self.val_history, self.cfg.patience):
                    log_.info("early stop after epoch %d", self.epoch - 1)
                    break
        return self.history


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    model: AttentionModel
    trainer: Trainer


def train(cfg, data, domains=None, model_cfg=None, val_data=None, out_dir=None):
    """Run the full recipe; writes checkpoint.bin and history.csv under ``out_dir`` if given.

    On a numeric failure the last-good checkpoint is still written before the
    error propagates.
    """
    model_cfg = model_cfg or ModelConfig()
    trainer = Trainer(cfg, model_cfg, data, val_data, domains)
    out = Path(out_dir) if out_dir is not None else None
    try:
        trainer.run()
    finally:
        if out is not None:
            trainer.last_good.save(out / "checkpoint.bin")
            _atomic_write(out / "history.csv", history_csv(trainer.history).encode("utf-8"))
    return TrainResult(trainer.checkpoint(), trainer.history, trainer.model, trainer)


def config_fields(cls):
    return [f.name for f in fields(cls)]
