"""Attention validation (slice choice, top-k Dice, profiles, ROI/background
statistics), PPM heatmaps and CSV report export."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stats import rank_sum_test


def select_slice(mask: np.ndarray) -> int:
    """Index along the last axis with the most foreground voxels (first on ties)."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("cannot select a slice from an empty mask")
    return int(np.argmax(mask.sum(axis=(0, 1))))


def normalize_attention(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    denom = a.sum() + b.sum()
    return 2.0 * (a & b).sum() / denom if denom else 1.0


def dice_topk(a: np.ndarray, roi: np.ndarray, k: float = 30.0) -> float:
    """Dice between ``{a > tau_k}`` and ``roi``; tau_k is the nearest-rank (100-k)th percentile."""
    a = np.asarray(a, dtype=np.float64)
    roi = np.asarray(roi).astype(bool)
    if a.shape != roi.shape:
        raise ValueError(f"attention {a.shape} and roi {roi.shape} differ in shape")
    if not 0 < k <= 100:
        raise ValueError("k must lie in (0, 100]")
    if not roi.any():
        raise ValueError("roi is empty")
    tau = nearest_rank_percentile(a, 100.0 - k)
    return dice(a > tau, roi)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def intensity_profiles(a: np.ndarray, roi: np.ndarray):
    """Row and column of ``a`` through the rounded ROI centroid.

    Returns ``(horizontal, vertical, (x_bar, y_bar))`` where the horizontal
    profile runs over x (length W) at row ``y_bar``.
    """
    roi = np.asarray(roi).astype(bool)
    if not roi.any():
        raise ValueError("roi is empty")
    ys, xs = np.nonzero(roi)
    xb, yb = _round_half_up(xs.mean()), _round_half_up(ys.mean())
    a = np.asarray(a, dtype=np.float64)
    return a[yb, :].copy(), a[:, xb].copy(), (xb, yb)


def upsample_nearest(a: np.ndarray, shape) -> np.ndarray:
    a = np.asarray(a)
    reps = [s // n for s, n in zip(shape, a.shape)]
    if any(r * n != s for r, n, s in zip(reps, a.shape, shape)):
        raise ValueError(f"cannot upsample {a.shape} to {tuple(shape)} by an integer factor")
    for ax, r in enumerate(reps):
        a = np.repeat(a, r, axis=ax)
    return a


@dataclass(frozen=True)
class AttentionStats:
    mean_roi: float
    mean_bg: float
    ratio: float
    p_value: float


def attention_stats(a: np.ndarray, mask: np.ndarray) -> AttentionStats:
    """ROI vs background attention means, their ratio and a rank-sum p-value."""
    a = np.asarray(a, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if a.shape != mask.shape:
        raise ValueError(f"attention {a.shape} and mask {mask.shape} differ in shape")
    roi, bg = a[mask], a[~mask]
    if roi.size == 0 or bg.size == 0:
        raise ValueError("both ROI and background must be nonempty")
    m_roi, m_bg = float(roi.mean()), float(bg.mean())
    ratio = m_roi / m_bg if m_bg > 0 else math.inf
    return AttentionStats(m_roi, m_bg, ratio, rank_sum_test(roi, bg).p_value)


@dataclass
class AttentionReport:
    case_id: str
    slice_index: int
    attention_2d: np.ndarray  # normalized, (H, W)
    k: float
    dice_k: float
    profile_h: np.ndarray
    profile_v: np.ndarray
    centroid: tuple[int, int]
    stats: AttentionStats


def attention_report(case_id: str, attention_feat: np.ndarray, mask: np.ndarray, k: float = 30.0) -> AttentionReport:
    """Full attention validation for one case; ``attention_feat`` is at feature resolution."""
    mask = np.asarray(mask).astype(bool)
    full = upsample_nearest(attention_feat, mask.shape)
    d = select_slice(mask)
    a2 = normalize_attention(full[:, :, d])
    roi2 = mask[:, :, d]
    ph, pv, cen = intensity_profiles(a2, roi2)
    return AttentionReport(case_id, d, a2, k, dice_topk(a2, roi2, k), ph, pv, cen, attention_stats(full, mask))


# ---------------------------------------------------------------- export


def colormap(a: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1): (r, 0, 255 - r) with r = round(255 * a)."""
    a = np.asarray(a, dtype=np.float64)
    if a.size and (a.min() < 0 or a.max() > 1):
        raise ValueError("heatmap values must lie in [0, 1]")
    r = np.floor(255.0 * a + 0.5).astype(np.uint8)
    return np.stack([r, np.zeros_like(r), 255 - r], axis=-1)


def _atomic_write(path: Path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_heatmap(a: np.ndarray, path) -> Path:
    rgb = colormap(a)
    h, w = rgb.shape[:2]
    _atomic_write(Path(path), f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    return Path(path)


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "NA" if math.isnan(x) else f"{x:.12g}"


def _csv(rows, header) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    return buf.getvalue().encode()


ATTENTION_COLUMNS = ["case_id", "slice", "k", "dice_k", "mean_roi", "mean_bg", "ratio", "p_value"]
METRIC_COLUMNS = ["auc_er", "auc_pr", "auc_her2", "auc_avg", "ki67_mae_pp", "ki67_sd_pp", "n_cases"]


def export_attention_report(reports: list[AttentionReport], path) -> Path:
    rows = [
        [r.case_id, r.slice_index, r.k, r.dice_k, r.stats.mean_roi, r.stats.mean_bg, r.stats.ratio, r.stats.p_value]
        for r in sorted(reports, key=lambda r: r.case_id)
    ]
    _atomic_write(Path(path), _csv(rows, ATTENTION_COLUMNS))
    return Path(path)


def export_metrics(metrics: dict | None, path, curves: dict | None = None, curves_path=None) -> Path:
    """``metrics`` maps METRIC_COLUMNS to values (None / nan -> NA); ``curves`` maps task -> RocResult."""
    rows = [] if metrics is None else [[metrics.get(c) for c in METRIC_COLUMNS]]
    _atomic_write(Path(path), _csv(rows, METRIC_COLUMNS))
    if curves_path is not None:
        crow = []
        for task, roc in (curves or {}).items():
            if roc is None:
                continue
            for i, (f, t) in enumerate(zip(roc.fpr, roc.tpr)):
                crow.append([task, i, f, t])
        _atomic_write(Path(curves_path), _csv(crow, ["task", "point", "fpr", "tpr"]))
    return Path(path)


def export_profiles(report: AttentionReport, path) -> Path:
    rows = [["horizontal", i, v] for i, v in enumerate(report.profile_h)]
    rows += [["vertical", i, v] for i, v in enumerate(report.profile_v)]
    _atomic_write(Path(path), _csv(rows, ["profile", "index", "attention"]))
    return Path(path)


def export_confusion(matrix: np.ndarray, labels, path) -> Path:
    rows = [[lab] + [int(v) for v in row] for lab, row in zip(labels, matrix)]
    _atomic_write(Path(path), _csv(rows, ["true\\predicted", *labels]))
    return Path(path)


def export_report(reports: list[AttentionReport], metrics: dict | None, directory, curves=None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        export_attention_report(reports, directory / "attention_report.csv"),
        export_metrics(metrics, directory / "metrics.csv", curves, directory / "roc_curves.csv"),
    ]
