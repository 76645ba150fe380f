"""Synthetic multi-domain driving-attention sequences and on-disk formats.

Scenes are bright Gaussian blobs ("movers") drifting over a textured noise
background.  The ground-truth attention map is a Gaussian on the mover picked
by the domain's rule.  In the memory task the target is marked by a colour cue
in the first two frames only, after which all movers look alike.

File formats
------------
Tensor file: ``b"TSR1"`` | rank (u32 LE) | extents (u32 LE each) | float32 LE payload, row-major.
Map file: binary PGM (``P5``, max 255, scaled by the map maximum) plus a sidecar tensor file.
Manifest: UTF-8 TSV ``domain_id  sequence  gt  fixations  split``, one sample per line.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

RULES = ("attend_leftmost", "attend_rightmost", "attend_fastest")
MAGIC = b"TSR1"
MAX_RANK = 5
CUE_FRAMES = 2
N_FIXATIONS = 3
SPLITS = (("train", 0.70), ("val", 0.15), ("test", 0.15))


class FormatError(ValueError):
    """Malformed tensor, map or manifest file."""


class ValidationError(ValueError):
    """Dataset directory does not match its manifest."""


@dataclass
class SceneSpec:
    H0: int = 32
    W0: int = 32
    T: int = 5
    n_movers: int = 3
    domain_rule: str = "attend_leftmost"
    memory_task: bool = False
    noise_sigma: float = 0.05
    seed: int = 0
    gt_sigma: float = 2.0
    blob_sigma: float = 1.5
    speed: float = 1.5

    def validate(self):
        if self.domain_rule not in RULES:
            raise ValueError(f"unknown domain rule {self.domain_rule!r}; expected one of {RULES}")
        capacity = max(1, (self.H0 // 8) * (self.W0 // 8))
        if self.n_movers < 1 or self.n_movers > capacity:
            raise ValueError(f"{self.n_movers} movers do not fit a {self.H0}×{self.W0} frame (capacity {capacity})")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        return self


@dataclass
class Sample:
    frames: np.ndarray  # T×3×H0×W0
    gt: np.ndarray  # T×H0×W0, each frame sums to 1
    fixations: np.ndarray  # T×H0×W0 binary
    domain_id: str
    seq_id: str = ""
    meta: dict = field(default_factory=dict)

    def window(self, length):
        """The last ``length`` frames (history window ending at the final frame)."""
        if length >= len(self.frames):
            return self
        return Sample(self.frames[-length:], self.gt[-length:], self.fixations[-length:],
                      self.domain_id, self.seq_id, dict(self.meta, window=length))


# ------------------------------------------------------------------ generation


def trajectories(spec, rng):
    """Mover positions (T×M×2, columns x, y in pixels) and velocities (M×2)."""
    m, H, W = spec.n_movers, spec.H0, spec.W0
    margin = 3.0
    pos0 = np.column_stack([rng.uniform(margin, W - 1 - margin, m), rng.uniform(margin, H - 1 - margin, m)])
    vel = rng.uniform(-spec.speed, spec.speed, (m, 2))
    pos = np.empty((spec.T, m, 2))
    p, v = pos0.copy(), vel.copy()
    lo = np.array([margin, margin])
    hi = np.array([W - 1 - margin, H - 1 - margin])
    for t in range(spec.T):
        pos[t] = p
        p = p + v
        # bounce off the margins
        under, over = p < lo, p > hi
        p = np.where(under, 2 * lo - p, np.where(over, 2 * hi - p, p))
        v = np.where(under | over, -v, v)
    return pos, vel


def select_target(pos_t, vel, rule):
    if rule == "attend_leftmost":
        return int(np.argmin(pos_t[:, 0]))
    if rule == "attend_rightmost":
        return int(np.argmax(pos_t[:, 0]))
    return int(np.argmax(np.hypot(vel[:, 0], vel[:, 1])))


def gaussian_map(H, W, x, y, sigma):
    u = np.arange(W)[None, :]
    v = np.arange(H)[:, None]
    g = np.exp(-((u - x) ** 2 + (v - y) ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def fixations_from(gt, k=N_FIXATIONS):
    flat = gt.reshape(-1)
    idx = np.argsort(-flat, kind="stable")[:k]
    fix = np.zeros_like(flat)
    fix[idx] = 1.0
    return fix.reshape(gt.shape)


def render(spec, pos, vel, rng, target=None):
    """Render frames and maps from trajectories.

    ``target`` fixes the attended mover for every frame (memory task); when
    None the rule is evaluated frame by frame.
    """
    T, H, W = spec.T, spec.H0, spec.W0
    texture = 0.25 + 0.1 * gaussian_filter(rng.standard_normal((3, H, W)), sigma=(0, 2, 2))
    frames = np.empty((T, 3, H, W))
    gt = np.empty((T, H, W))
    targets = []
    white = np.ones(3)
    cue = np.array([1.0, 0.1, 0.1])
    for t in range(T):
        img = texture + spec.noise_sigma * rng.standard_normal((3, H, W))
        tgt = target if target is not None else select_target(pos[t], vel, spec.domain_rule)
        targets.append(tgt)
        for j, (x, y) in enumerate(pos[t]):
            blob = gaussian_map(H, W, x, y, spec.blob_sigma)
            blob = blob / blob.max()
            color = cue if (spec.memory_task and j == target and t < CUE_FRAMES) else white
            img = img + 0.7 * color[:, None, None] * blob[None]
        frames[t] = img
        x, y = pos[t, tgt]
        gt[t] = gaussian_map(H, W, x, y, spec.gt_sigma)
    fix = np.stack([fixations_from(g) for g in gt])
    return frames.astype(np.float32), gt, fix, targets


def generate(spec, n, domain_id=None):
    """Render ``n`` sequences; a pure function of (spec, n)."""
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    domain_id = domain_id or spec.domain_rule
    samples = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        pos, vel = trajectories(spec, rng)
        target = int(rng.integers(spec.n_movers)) if spec.memory_task else None
        frames, gt, fix, targets = render(spec, pos, vel, rng, target)
        gt32 = gt.astype(np.float32)
        gt32 /= gt32.sum(axis=(1, 2), keepdims=True)
        meta = {
            "targets": targets,
            "memory_task": spec.memory_task,
            "cue_frames": CUE_FRAMES if spec.memory_task else 0,
            "cue_equalized_after": CUE_FRAMES if spec.memory_task else None,
        }
        samples.append(Sample(frames, gt32, fix.astype(np.float32), domain_id, f"{domain_id}_{i:05d}", meta))
    return samples


# ------------------------------------------------------------------ tensor files


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset=0):
    """Parse one tensor starting at ``offset``; returns (array, end offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic at byte {offset}: {bytes(buf[offset:offset + 4])!r}")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise FormatError(f"truncated rank field at byte {pos}")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} at byte {pos - 4} exceeds {MAX_RANK}")
    if len(buf) < pos + 4 * rank:
        raise FormatError(f"truncated extents at byte {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = 1
    for e in shape:
        count *= e
    end = pos + 4 * count
    if len(buf) < end:
        raise FormatError(f"truncated payload at byte {len(buf)}: extents need {end} bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
    return arr, end


def write_tensor(path, arr):
    _atomic_write(path, encode_tensor(arr))


def read_tensor(path):
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload at byte {end}")
    return arr


# ------------------------------------------------------------------ map files


def sidecar_path(path):
    return Path(path).with_suffix(".tsr")


def write_map(path, m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"maps are 2-D, got shape {m.shape}")
    peak = m.max()
    scaled = np.zeros_like(m) if peak <= 0 else np.round(255.0 * m / peak)
    H, W = m.shape
    header = f"P5\n{W} {H}\n255\n".encode("ascii")
    _atomic_write(path, header + np.clip(scaled, 0, 255).astype(np.uint8).tobytes())
    write_tensor(sidecar_path(path), m.astype(np.float32))


def read_pgm(path):
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PGM header at byte {pos}")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM: magic {tokens[0]!r} at byte 0")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header field") from None
    if maxval != 255:
        raise FormatError(f"unsupported PGM max value {maxval}")
    data = buf[pos : pos + W * H]
    if len(data) != W * H:
        raise FormatError(f"truncated PGM payload at byte {pos + len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W)


def read_map(path):
    """Exact values from the sidecar when present, else the (lossy) PGM renormalised."""
    side = sidecar_path(path)
    if side.exists():
        return read_tensor(side)
    img = read_pgm(path).astype(np.float32)
    total = img.sum()
    return img / total if total > 0 else img


# ------------------------------------------------------------------ datasets on disk


def write_sample(root, sample):
    d = Path(root) / sample.domain_id / sample.seq_id
    write_tensor(d / "frames.tsr", sample.frames)
    write_tensor(d / "gt.tsr", sample.gt)
    write_tensor(d / "fix.tsr", sample.fixations)
    for t, g in enumerate(sample.gt):
        write_map(d / f"gt_{t:02d}.pgm", g)
    _atomic_write(d / "meta.json", json.dumps(sample.meta, sort_keys=True).encode("utf-8"))
    return d


def _split_order(ids, seed):
    key = lambda s: hashlib.sha256(f"{seed}:{s}".encode("utf-8")).hexdigest()
    return sorted(ids, key=key)


def assign_splits(ids, seed=0):
    """70/15/15 split by seeded hash order; counts are rounded, remainder goes to test."""
    order = _split_order(ids, seed)
    n = len(order)
    n_train = int(round(SPLITS[0][1] * n))
    n_val = int(round(SPLITS[1][1] * n))
    n_val = min(n_val, n - n_train)
    out = {}
    for i, s in enumerate(order):
        out[s] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return out


@dataclass
class ManifestRecord:
    domain_id: str
    sequence: str
    gt: str
    fixations: str
    split: str


def build_manifest(root, seed=0):
    """Index every sample directory under ``root`` (domain/seq_id/...), per-domain splits."""
    root = Path(root)
    records = []
    if not root.exists():
        return records
    for ddir in sorted(p for p in root.iterdir() if p.is_dir()):
        seqs = sorted(p.name for p in ddir.iterdir() if p.is_dir())
        splits = assign_splits(seqs, seed)
        for s in seqs:
            rel = f"{ddir.name}/{s}"
            records.append(ManifestRecord(ddir.name, f"{rel}/frames.tsr", f"{rel}/gt.tsr", f"{rel}/fix.tsr", splits[s]))
    return records


def manifest_text(records):
    return "".join(f"{r.domain_id}\t{r.sequence}\t{r.gt}\t{r.fixations}\t{r.split}\n" for r in records)


def manifest(root, seed=0, write=True):
    """Build, validate and (optionally) write ``manifest.tsv``; returns the records."""
    records = build_manifest(root, seed)
    validate_manifest(root, records)
    if write and Path(root).exists():
        _atomic_write(Path(root) / "manifest.tsv", manifest_text(records).encode("utf-8"))
    return records


def read_manifest(root):
    path = Path(root) / "manifest.tsv"
    if not path.exists():
        raise ValidationError(f"no manifest at {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"manifest line {lineno}: expected 5 fields, got {len(parts)}")
        records.append(ManifestRecord(*parts))
    return records


def validate_manifest(root, records):
    root = Path(root)
    missing = [p for r in records for p in (r.sequence, r.gt, r.fixations) if not (root / p).exists()]
    if missing:
        raise ValidationError("dangling paths: " + ", ".join(missing))


def load_split(root, split, records=None):
    """Samples of one split grouped by domain, in manifest order."""
    root = Path(root)
    records = records if records is not None else read_manifest(root)
    validate_manifest(root, records)
    out = {}
    for r in records:
        if r.split != split:
            continue
        seq_dir = (root / r.sequence).parent
        meta_path = seq_dir / "meta.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        out.setdefault(r.domain_id, []).append(
            Sample(read_tensor(root / r.sequence), read_tensor(root / r.gt), read_tensor(root / r.fixations),
                   r.domain_id, seq_dir.name, meta)
        )
    return out


def spec_dict(spec):
    return asdict(spec)
