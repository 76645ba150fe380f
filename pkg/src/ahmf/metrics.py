"""Saliency metrics: KLD, CC, SIM, NSS and AUC-Judd.

Maps are 2-D arrays.  ``S`` is the ground-truth saliency map, ``P`` the binary
fixation map, ``pred`` the predicted map.  Each metric has a ``naive_*``
loop-based twin used as a reference in tests.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-7
NORM_TOL = 1e-4
COLUMNS = ("auc_j", "sim", "cc", "kld", "nss")


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (zero variance, no fixations, ...)."""


class UsageError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"map shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _check_normalized(*maps):
    for m in maps:
        if np.any(m < 0) or abs(m.sum() - 1.0) > NORM_TOL:
            raise UsageError(f"map must be nonnegative and sum to 1 (sum={m.sum():.6g})")


def normalize(m):
    m = np.asarray(m, dtype=np.float64)
    return m / m.sum()


def kld(S, pred, eps=EPS, variant="printed"):
    """Σ S·log(ε + S/(ε + Ŝ)), with ε placed exactly as written.

    ``variant="common"`` gives the ε-in-numerator form instead, see :func:`kld_common`.
    """
    S, pred = _pair(S, pred)
    _check_normalized(S, pred)
    if variant == "common":
        return kld_common(S, pred, eps)
    return float(np.sum(S * np.log(eps + S / (eps + pred))))


def kld_common(S, pred, eps=EPS):
    """Σ S·log((S + ε)/(Ŝ + ε)), for comparison with other toolkits."""
    return float(np.sum(S * np.log((S + eps) / (pred + eps))))


def cc(S, pred):
    S, pred = _pair(S, pred)
    sa, sb = S.std(), pred.std()
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("CC undefined for a constant map")
    return float(np.mean((S - S.mean()) * (pred - pred.mean())) / (sa * sb))


def sim(S, pred):
    S, pred = _pair(S, pred)
    _check_normalized(S, pred)
    return float(np.minimum(S, pred).sum())


def nss(P, pred):
    P, pred = _pair(P, pred)
    mask = P > 0
    if not mask.any():
        raise UndefinedMetricError("NSS needs at least one fixation")
    sd = pred.std()
    if sd == 0:
        raise UndefinedMetricError("NSS undefined for a constant prediction")
    z = (pred - pred.mean()) / sd
    return float(z[mask].mean())


def auc_judd(P, pred):
    """Judd ROC area using fixation saliencies as thresholds.

    A pixel counts as "above" a threshold when its value is >= the threshold,
    so tied fixations enter together.  The false-positive rate is taken over
    non-fixation pixels only.  The curve starts at (0, 0) and ends at (1, 1); a
    constant map therefore scores exactly 0.5.
    """
    P, pred = _pair(P, pred)
    mask = P.reshape(-1) > 0
    s = pred.reshape(-1)
    n_fix = int(mask.sum())
    n = s.size
    if n_fix == 0 or n_fix == n:
        raise UndefinedMetricError("AUC-J needs at least one fixation and one non-fixation pixel")
    thresholds = np.sort(s[mask])[::-1]
    sorted_all = np.sort(s)
    sorted_fix = thresholds[::-1]
    above_all = n - np.searchsorted(sorted_all, thresholds, side="left")
    above_fix = n_fix - np.searchsorted(sorted_fix, thresholds, side="left")
    tp = np.concatenate([[0.0], above_fix / n_fix, [1.0]])
    fp = np.concatenate([[0.0], (above_all - above_fix) / (n - n_fix), [1.0]])
    return float(np.trapezoid(tp, fp))


# ------------------------------------------------------------------ naive references


def naive_kld(S, pred, eps=EPS):
    total = 0.0
    for i in range(S.shape[0]):
        for j in range(S.shape[1]):
            s, p = float(S[i, j]), float(pred[i, j])
            total += s * math.log(eps + s / (eps + p))
    return total


def naive_cc(S, pred):
    n = S.size
    ma = sum(float(v) for v in S.flat) / n
    mb = sum(float(v) for v in pred.flat) / n
    cov = va = vb = 0.0
    for a, b in zip(S.flat, pred.flat):
        cov += (a - ma) * (b - mb)
        va += (a - ma) ** 2
        vb += (b - mb) ** 2
    return cov / math.sqrt(va * vb)


def naive_sim(S, pred):
    return sum(min(float(a), float(b)) for a, b in zip(S.flat, pred.flat))


def naive_nss(P, pred):
    n = pred.size
    mu = sum(float(v) for v in pred.flat) / n
    sd = math.sqrt(sum((float(v) - mu) ** 2 for v in pred.flat) / n)
    vals = [(float(v) - mu) / sd for v, f in zip(pred.flat, P.flat) if f > 0]
    return sum(vals) / len(vals)


def naive_auc_judd(P, pred):
    fix = [float(v) for v, f in zip(pred.flat, P.flat) if f > 0]
    rest = [float(v) for v, f in zip(pred.flat, P.flat) if not f > 0]
    tp, fp = [0.0], [0.0]
    for t in sorted(fix, reverse=True):
        tp.append(sum(1 for v in fix if v >= t) / len(fix))
        fp.append(sum(1 for v in rest if v >= t) / len(rest))
    tp.append(1.0)
    fp.append(1.0)
    area = 0.0
    for k in range(1, len(tp)):
        area += (fp[k] - fp[k - 1]) * (tp[k] + tp[k - 1]) / 2.0
    return area


# ------------------------------------------------------------------ rows and reports


@dataclass
class MetricsRow:
    auc_j: float = math.nan
    sim: float = math.nan
    cc: float = math.nan
    kld: float = math.nan
    nss: float = math.nan
    count: int = 1
    domain: str = ""


def evaluate_frame(S, P, pred, eps=EPS):
    """All five metrics for one frame; undefined ones come back as NaN."""
    out = {}
    for key, fn, args in (
        ("auc_j", auc_judd, (P, pred)),
        ("sim", sim, (S, pred)),
        ("cc", cc, (S, pred)),
        ("kld", kld, (S, pred)),
        ("nss", nss, (P, pred)),
    ):
        try:
            out[key] = fn(*args, eps) if key == "kld" else fn(*args)
        except UndefinedMetricError:
            out[key] = math.nan
    return out


def evaluate_sample(gt, fix, pred, domain=""):
    """Average the per-frame metrics of one T-frame sequence into a :class:`MetricsRow`."""
    per = [evaluate_frame(gt[t], fix[t], pred[t]) for t in range(len(gt))]
    row = {}
    for key in COLUMNS:
        vals = [p[key] for p in per if not math.isnan(p[key])]
        row[key] = float(np.mean(vals)) if vals else math.nan
    return MetricsRow(**row, count=1, domain=domain)


def summarize(rows, group_by="domain"):
    """Per-group column means; NaN entries are excluded and counted."""
    groups = {}
    for r in rows:
        groups.setdefault(getattr(r, group_by), []).append(r)
    table = {}
    for g, rs in groups.items():
        entry = {"domain": g, "n": len(rs)}
        for key in COLUMNS:
            vals = [getattr(r, key) for r in rs if not math.isnan(getattr(r, key))]
            entry[key] = float(np.mean(vals)) if vals else math.nan
        entry["excluded_auc"] = sum(math.isnan(r.auc_j) for r in rs)
        entry["excluded_cc"] = sum(math.isnan(r.cc) for r in rs)
        entry["excluded_nss"] = sum(math.isnan(r.nss) for r in rs)
        table[g] = entry
    return table


CSV_COLUMNS = ("domain", "n", "auc_j", "sim", "cc", "kld", "nss", "excluded_auc", "excluded_cc", "excluded_nss")


def report_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for g in sorted(table):
        e = table[g]
        w.writerow([e["domain"], e["n"]] + [repr(float(e[k])) for k in COLUMNS] +
                   [e["excluded_auc"], e["excluded_cc"], e["excluded_nss"]])
    return buf.getvalue()


def parse_report_csv(text):
    table = {}
    for rec in csv.DictReader(io.StringIO(text)):
        e = {"domain": rec["domain"], "n": int(rec["n"])}
        for k in COLUMNS:
            e[k] = float(rec[k])
        for k in ("excluded_auc", "excluded_cc", "excluded_nss"):
            e[k] = int(rec[k])
        table[e["domain"]] = e
    return table


def report_text(table, domains=None):
    """Aligned text table; requested domains without rows show as absent."""
    header = f"{'domain':<12}{'n':>5}  {'AUC-J↑':>8}{'SIM↑':>8}{'CC↑':>8}{'KLD↓':>8}{'NSS↑':>8}"
    lines = [header, "-" * len(header)]
    for g in domains if domains is not None else sorted(table):
        if g not in table:
            lines.append(f"{g:<12}{'absent':>5}")
            continue
        e = table[g]
        vals = "".join(f"{e[k]:>8.3f}" for k in COLUMNS)
        lines.append(f"{g:<12}{e['n']:>5}  {vals}")
    return "\n".join(lines)
