"""Command-line entry point: gen-data, train, eval, gradcheck, inspect-memory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data_synth as ds
from .domain import RegistryError
from .metrics import report_csv, report_text, summarize
from .model import ModelConfig
from .numerics import ConfigurationError
from .training import Checkpoint, NumericError, TrainConfig, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SCENE_KEYS = ("H0", "W0", "T", "n_movers", "memory_task", "noise_sigma", "gt_sigma", "blob_sigma", "speed")
# model fields that are driven by other keys
MODEL_DERIVED = {"frame_height", "frame_width", "ablation", "seq_len", "update_position"}
DEFAULT_DOMAINS = (("A", "attend_leftmost"), ("B", "attend_rightmost"))

log = logging.getLogger("ahmf")


class ConfigError(ConfigurationError):
    pass


@dataclass
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: ds.SceneSpec = field(default_factory=ds.SceneSpec)
    domains: list = field(default_factory=lambda: list(DEFAULT_DOMAINS))
    n: int = 16

    @property
    def seed(self):
        return self.train.seed

    def resolved(self):
        """Every key with its effective value, one ``key=value`` per line, sorted."""
        items = {"domains": ",".join(f"{d}:{r}" for d, r in self.domains), "n": self.n}
        for f in fields(TrainConfig):
            items[f.name] = getattr(self.train, f.name)
        for f in fields(ModelConfig):
            if f.name not in MODEL_DERIVED:
                items[f.name] = getattr(self.model, f.name)
        for k in SCENE_KEYS:
            items[k] = getattr(self.scene, k)
        return "".join(f"{k}={_format(v)}\n" for k, v in sorted(items.items()))

    def scene_for(self, index, rule):
        """Scene spec of the index-th domain with its own data sub-stream seed."""
        sub = int(np.random.SeedSequence([self.seed, 0xDA7A, index]).generate_state(1)[0])
        return replace(self.scene, domain_rule=rule, seed=sub)


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(key, text, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None
    return text


def _parse_domains(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, rule = part.partition(":")
        if not sep or not name or rule not in ds.RULES:
            raise ConfigError(f"domain entry {part!r} must look like NAME:{'|'.join(ds.RULES)}")
        out.append((name, rule))
    if not out:
        raise ConfigError("domains list is empty")
    if len({d for d, _ in out}) != len(out):
        raise ConfigError(f"duplicate domain ids in {text!r}")
    return out


def parse_config(text, base=None):
    """Apply ``key=value`` lines onto ``base`` (defaults if None). Unknown keys are errors."""
    cfg = base or CliConfig()
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(ModelConfig)} - MODEL_DERIVED
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key == "domains":
            cfg.domains = _parse_domains(value)
        elif key == "n":
            cfg.n = _parse_value(key, value, 0)
        elif key in train_keys:
            setattr(cfg.train, key, _parse_value(key, value, getattr(cfg.train, key)))
        elif key in model_keys:
            setattr(cfg.model, key, _parse_value(key, value, getattr(cfg.model, key)))
        elif key in SCENE_KEYS:
            setattr(cfg.scene, key, _parse_value(key, value, getattr(cfg.scene, key)))
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    return cfg


def load_config(path, seed=None):
    cfg = CliConfig()
    env = os.environ.get("AHMF_SEED")
    if env is not None:
        try:
            cfg.train.seed = int(env)
        except ValueError:
            raise ConfigError(f"AHMF_SEED must be an integer, got {env!r}") from None
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config(text, cfg)
    if seed is not None:
        cfg.train.seed = seed
    cfg.model.frame_height, cfg.model.frame_width = cfg.scene.H0, cfg.scene.W0
    try:
        cfg.train.validate()
        cfg.scene.validate()
        replace(cfg.model).encoder_config().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.n < 1:
        raise ConfigError("n must be >= 1")
    return cfg


def _echo(cfg, out=None):
    text = cfg.resolved()
    print("# resolved config")
    print(text, end="")
    if out is not None:
        ds._atomic_write(Path(out) / "config.resolved", text.encode("utf-8"))


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    cfg = load_config(args.config, args.seed)
    if args.n is not None:
        cfg.n = args.n
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    _echo(cfg, out)
    for i, (domain, rule) in enumerate(cfg.domains):
        for sample in ds.generate(cfg.scene_for(i, rule), cfg.n, domain):
            ds.write_sample(out, sample)
    records = ds.manifest(out, seed=cfg.seed)
    print(f"wrote {len(records)} sequences for {len(cfg.domains)} domains to {out}")
    return EXIT_OK


def _load_split(data, split):
    records = ds.read_manifest(data)
    if not records:
        raise ds.ValidationError(f"manifest in {data} is empty")
    return ds.load_split(data, split, records)


def cmd_train(args):
    cfg = load_config(args.config, args.seed)
    for attr, key in (("ablation", "ablation"), ("update_position", "update_position"),
                      ("seq_len", "seq_len"), ("max_epochs", "max_epochs")):
        value = getattr(args, attr)
        if value is not None:
            setattr(cfg.train, key, value)
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    train_data = _load_split(args.data, "train")
    val_data = ds.load_split(args.data, "val")
    if not train_data:
        raise ds.ValidationError("training split is empty")
    configured = [d for d, _ in cfg.domains]
    domains = configured if set(train_data) <= set(configured) else sorted(train_data)
    first = next(iter(train_data.values()))[0]
    t, _, h0, w0 = first.frames.shape
    if cfg.train.seq_len > t:
        raise ds.ValidationError(f"seq_len {cfg.train.seq_len} exceeds the {t} frames stored per sequence")
    cfg.model.frame_height, cfg.model.frame_width = h0, w0
    result = None
    try:
        result = train(cfg.train, train_data, domains, cfg.model, val_data, out)
    finally:
        if result is None and (out / "checkpoint.bin").exists():
            print(f"training aborted; last-good checkpoint kept at {out / 'checkpoint.bin'}", file=sys.stderr)
    model = result.model
    if not model.uses_bank:
        bank = model.fusion.bank
        untouched = result.trainer.initial_bank.tobytes() == bank.slots.data.tobytes() and bank.pending is None
        print(f"bank untouched: {'yes' if untouched else 'NO'}")
        if not untouched:
            raise NumericError("no_hmf run modified the long-term bank")
    for row in result.history:
        print(f"epoch {row['epoch']:3d} lr {row['lr']:.6g} loss {row['train_loss']:.4f} val_cc {row['val_cc']:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    print("# resolved config")
    for k, v in sorted(ckpt.model_cfg.items()):
        print(f"{k}={_format(v)}")
    data = _load_split(args.data, args.split)
    report = Path(args.report) if args.report else Path(args.out or ".") / "report.csv"
    domains = list(ckpt.domains)
    if not data:
        ds._atomic_write(report, report_csv({}).encode("utf-8"))
        print(report_text({}, domains))
        print(f"split {args.split!r} is empty; nothing evaluated", file=sys.stderr)
        return EXIT_DATA
    unknown = set(data) - set(domains)
    if unknown:
        raise ds.ValidationError(f"data holds domains {sorted(unknown)} unknown to the checkpoint")
    first = next(iter(data.values()))[0]
    expect = (model.cfg.frame_height, model.cfg.frame_width)
    if first.frames.shape[-2:] != expect or first.frames.shape[0] < model.cfg.seq_len:
        raise ds.ValidationError(
            f"data frames {first.frames.shape} do not fit the checkpoint "
            f"(needs ≥{model.cfg.seq_len} frames of {expect[0]}×{expect[1]})"
        )
    table = summarize(evaluate(model, data))
    ds._atomic_write(report, report_csv(table).encode("utf-8"))
    print(report_text(table, domains))
    print(f"report: {report}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck_suite import run_suite

    reports, seconds = run_suite(args.scope)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed in {seconds:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_inspect_memory(args):
    ckpt = Checkpoint.load(args.checkpoint)
    if not ckpt.has_bank:
        print("no bank present: checkpoint was trained with ablation no_hmf")
        return EXIT_OK
    slots = ckpt.tensors["param/bank.slots"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.write_tensor(out / "bank_slots.tsr", slots)
    lines = [f"slots={slots.shape[0]} width={slots.shape[1]}",
             f"init reference: N(0,1) entries, expected norm ≈ sqrt(width) = {np.sqrt(slots.shape[1]):.3f}"]
    for i, s in enumerate(slots):
        ds.write_tensor(out / f"slot_{i:03d}.tsr", s)
        lines.append(f"slot {i:3d}  norm {np.linalg.norm(s):10.4f}  mean {s.mean():+.4f}  std {s.std():.4f}")
    text = "\n".join(lines) + "\n"
    ds._atomic_write(out / "summary.txt", text.encode("utf-8"))
    print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser():
    p = argparse.ArgumentParser(prog="ahmf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic per-domain datasets and a manifest")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, help="sequences per domain")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="joint training over the manifest's train split")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=("full", "no_hmf", "no_sa", "no_ca"))
    t.add_argument("--update-position", dest="update_position", choices=("after_hmf", "after_ca"))
    t.add_argument("--seq-len", dest="seq_len", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="inference-mode metrics for one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--report")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=("ops", "model"), default="ops")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("inspect-memory", help="dump long-term bank slots")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_inspect_memory)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, RegistryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ds.FormatError, ds.ValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
