"""Cases, the raw on-disk format, synthetic phantoms, augmentation and splits.

Arrays are indexed ``[y, x, z]`` with dims ``(H, W, D)``; slices for
visualization are taken along the last axis. On disk the payload is written
with x fastest, then y, then z.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .morphology import PERI_RADIUS, make_zones

FORMAT_VERSION = 1


class DataError(Exception):
    """Base class for dataset problems surfaced to the CLI as data errors."""


class MissingFileError(DataError):
    pass


class DimsMismatchError(DataError):
    pass


class InvalidMaskError(DataError):
    pass


class TumorFitError(DataError):
    pass


@dataclass(frozen=True)
class BiomarkerLabels:
    er: int
    pr: int
    her2: int
    ki67: float

    def __post_init__(self):
        for name in ("er", "pr", "her2"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        if not 0.0 <= self.ki67 <= 1.0:
            raise ValueError(f"ki67 must lie in [0, 1], got {self.ki67!r}")

    def binary(self, task: str) -> int:
        return getattr(self, task)


@dataclass
class LabeledCase:
    id: str
    volume: np.ndarray  # float32 (H, W, D)
    mask: np.ndarray  # bool (H, W, D)
    labels: BiomarkerLabels

    def __post_init__(self):
        self.volume = np.asarray(self.volume, dtype=np.float32)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.volume.shape != self.mask.shape or self.volume.ndim != 3:
            raise DimsMismatchError(
                f"case {self.id}: volume {self.volume.shape} vs mask {self.mask.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.volume.shape)


# ---------------------------------------------------------------- raw format


def _to_disk(a: np.ndarray) -> np.ndarray:
    # [y, x, z] -> [z, y, x] in C order puts x fastest
    return np.ascontiguousarray(a.transpose(2, 0, 1))


def _from_disk(flat: np.ndarray, dims) -> np.ndarray:
    h, w, d = dims
    return flat.reshape(d, h, w).transpose(1, 2, 0)


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def save_case(case: LabeledCase, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "id": case.id,
        "dims": list(case.dims),
        "labels": asdict(case.labels),
    }
    paths = [directory / f"{case.id}{ext}" for ext in (".meta.json", ".vol.raw", ".mask.raw")]
    _atomic_write(paths[0], (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    _atomic_write(paths[1], _to_disk(case.volume).astype("<f4").tobytes())
    _atomic_write(paths[2], _to_disk(case.mask).astype(np.uint8).tobytes())
    return paths


def load_case(directory, case_id: str) -> LabeledCase:
    directory = Path(directory)
    meta_p, vol_p, mask_p = (directory / f"{case_id}{ext}" for ext in (".meta.json", ".vol.raw", ".mask.raw"))
    for p in (meta_p, vol_p, mask_p):
        if not p.is_file():
            raise MissingFileError(f"missing file {p}")
    meta = json.loads(meta_p.read_text())
    dims = tuple(int(n) for n in meta["dims"])
    nvox = int(np.prod(dims))
    vol_bytes = vol_p.read_bytes()
    mask_bytes = mask_p.read_bytes()
    if len(vol_bytes) != 4 * nvox:
        raise DimsMismatchError(f"{vol_p}: {len(vol_bytes)} bytes, meta dims {dims} need {4 * nvox}")
    if len(mask_bytes) != nvox:
        raise DimsMismatchError(f"{mask_p}: {len(mask_bytes)} bytes, meta dims {dims} need {nvox}")
    mask_raw = np.frombuffer(mask_bytes, dtype=np.uint8)
    if mask_raw.max(initial=0) > 1:
        bad = int(mask_raw[mask_raw > 1][0])
        raise InvalidMaskError(f"{mask_p}: mask byte {bad} is not 0 or 1")
    volume = _from_disk(np.frombuffer(vol_bytes, dtype="<f4"), dims).astype(np.float32)
    mask = _from_disk(mask_raw, dims).astype(bool)
    lab = meta["labels"]
    labels = BiomarkerLabels(int(lab["er"]), int(lab["pr"]), int(lab["her2"]), float(lab["ki67"]))
    return LabeledCase(meta.get("id", case_id), volume, mask, labels)


def save_dataset(cases, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c in cases:
        save_case(c, directory)
    index = directory / "index.json"
    _atomic_write(index, (json.dumps({"cases": [c.id for c in cases]}, indent=2) + "\n").encode())
    return index


def list_case_ids(directory) -> list[str]:
    index = Path(directory) / "index.json"
    if not index.is_file():
        raise MissingFileError(f"missing file {index}")
    return list(json.loads(index.read_text())["cases"])


def load_dataset(directory) -> list[LabeledCase]:
    return [load_case(directory, cid) for cid in list_case_ids(directory)]


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomConfig:
    """Ellipsoidal tumor on a dark background with one planted signal per label.

    ER shifts the core mean, PR adds smooth core texture, HER2 brightens the
    rim shell and Ki-67 sets the slope of a peritumoral intensity ramp.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    radius_range: tuple[float, float] = (6.0, 9.0)
    noise_sd: float = 0.1
    tumor_intensity: float = 1.0
    er_amplitude: float = 0.5
    pr_amplitude: float = 0.5
    her2_amplitude: float = 0.6
    ki67_amplitude: float = 2.0
    rho: float = 0.8
    texture_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        lo, hi = self.radius_range
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if any(hi + PERI_RADIUS > (n - 1) / 2 for n in self.dims):
            raise TumorFitError(
                f"tumor radius {hi} plus peritumoral margin {PERI_RADIUS} does not fit in dims {self.dims}"
            )
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")


def auto_radius_range(dims) -> tuple[float, float]:
    """Radius range scaled to the smallest extent, capped so the peritumoral shell fits."""
    m = min(dims)
    hi = min(9 * m / 32, (m - 1) / 2 - PERI_RADIUS)
    if hi <= 0:
        hi = 9 * m / 32  # cannot fit; let PhantomConfig report it
    return min(6 * m / 32, hi), hi


def draw_labels(rng: np.random.Generator, rho: float) -> BiomarkerLabels:
    er = int(rng.random() < 0.5)
    copy_er = rng.random() < rho
    pr_indep = int(rng.random() < 0.5)
    her2 = int(rng.random() < 0.5)
    ki67 = float(rng.uniform(0.05, 0.6))
    return BiomarkerLabels(er, er if copy_er else pr_indep, her2, ki67)


def generate_phantom(config: PhantomConfig, seed: int, labels: BiomarkerLabels | None = None,
                     case_id: str | None = None) -> LabeledCase:
    """Deterministic in ``(config, seed)``; ``labels`` overrides the drawn labels only."""
    rng = np.random.default_rng(seed)
    drawn = draw_labels(rng, config.rho)
    labels = labels or drawn

    dims = config.dims
    lo, hi = config.radius_range
    semi = rng.uniform(lo, hi, size=3)
    margin = hi + PERI_RADIUS
    center = np.array([rng.uniform(margin, n - 1 - margin) for n in dims])
    grid = np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1)
    mask = (((grid - center) / semi) ** 2).sum(axis=-1) <= 1.0

    zones = make_zones(mask)
    texture = ndimage.gaussian_filter(rng.standard_normal(dims), config.texture_sigma)
    noise = rng.standard_normal(dims)

    vol = np.zeros(dims)
    vol[mask] = config.tumor_intensity
    vol[zones.core] += config.er_amplitude * labels.er
    if labels.pr:
        t = texture[zones.core]
        t = (t - t.mean()) / (t.std() or 1.0)
        vol[zones.core] += config.pr_amplitude * t
    vol[zones.rim] += config.her2_amplitude * labels.her2
    # ramp from the tumor edge outwards; its slope is proportional to Ki-67
    dist = ndimage.distance_transform_edt(~mask)
    span = PERI_RADIUS + 1.0
    vol[zones.peri] += config.ki67_amplitude * labels.ki67 * (span - dist[zones.peri]) / span
    vol += config.noise_sd * noise
    return LabeledCase(case_id or f"case{seed:05d}", vol.astype(np.float32), mask, labels)


def generate_dataset(config: PhantomConfig, n: int, seed: int, prefix: str = "case") -> list[LabeledCase]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [
        generate_phantom(config, int(s), case_id=f"{prefix}{i:04d}")
        for i, s in enumerate(seeds)
    ]


def zone_probe_features(case: LabeledCase) -> np.ndarray:
    """Per-zone mean and variance of intensity: the linear-probe oracle features."""
    feats = []
    for z in make_zones(case.mask).as_tuple():
        v = case.volume[z].astype(np.float64)
        feats += [v.mean(), v.var()] if v.size else [0.0, 0.0]
    return np.array(feats)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    flips: tuple[bool, bool, bool] = field(default=(False, False, False))


def apply_transform(case: LabeledCase, params: AugmentParams) -> LabeledCase:
    """In-plane rotation and scale about the volume center, then axis flips."""
    vol = case.volume.astype(np.float64)
    mask = case.mask
    if params.angle_deg != 0.0 or params.scale != 1.0:
        th = math.radians(params.angle_deg)
        rot = np.array([[math.cos(th), -math.sin(th), 0.0], [math.sin(th), math.cos(th), 0.0], [0.0, 0.0, 1.0]])
        fwd = np.diag([params.scale, params.scale, 1.0]) @ rot
        inv = np.linalg.inv(fwd)
        c = (np.array(vol.shape) - 1) / 2.0
        offset = c - inv @ c
        vol = ndimage.affine_transform(vol, inv, offset=offset, order=1, mode="constant", cval=0.0)
        mask = ndimage.affine_transform(mask.astype(np.float64), inv, offset=offset, order=0,
                                        mode="constant", cval=0.0) > 0.5
    for ax, flip in enumerate(params.flips):
        if flip:
            vol = np.flip(vol, axis=ax)
            mask = np.flip(mask, axis=ax)
    return LabeledCase(case.id, np.ascontiguousarray(vol, dtype=np.float32), np.ascontiguousarray(mask), case.labels)


def draw_augment(rng: np.random.Generator, max_angle: float = 15.0,
                 scale_range: tuple[float, float] = (0.9, 1.1)) -> AugmentParams:
    angle = rng.uniform(-max_angle, max_angle) if rng.random() < 0.5 else 0.0
    scale = rng.uniform(*scale_range) if rng.random() < 0.5 else 1.0
    flips = tuple(bool(rng.random() < 0.5) for _ in range(3))
    return AugmentParams(angle, scale, flips)


def augment(case: LabeledCase, seed: int, max_angle: float = 15.0, retries: int = 5) -> LabeledCase:
    """Random flips, rotation and scale; labels untouched.

    If a draw leaves the mask empty another is tried, up to ``retries`` times,
    after which the case comes back unaugmented.
    """
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(retries):
        out = apply_transform(case, draw_augment(np.random.default_rng(child), max_angle))
        if out.mask.any():
            return out
    return case


# ---------------------------------------------------------------- splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _shuffled(cases, seed):
    ordered = sorted(cases, key=lambda c: c.id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    return [ordered[i] for i in perm]


def split_dataset(cases, seed: int):
    """70/10/20 train/val/test partition, stable under reordering of ``cases``."""
    n = len(cases)
    if n < 10:
        raise ValueError(f"need at least 10 cases to split, got {n}")
    shuffled = _shuffled(cases, seed)
    n_train = _round_half_up(0.7 * n)
    n_val = _round_half_up(0.1 * n)
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def kfold(cases, k: int, seed: int):
    n = len(cases)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds number of cases {n}")
    shuffled = _shuffled(cases, seed)
    folds = np.array_split(np.arange(n), k)
    out = []
    for f in folds:
        test_idx = set(f.tolist())
        out.append(([c for i, c in enumerate(shuffled) if i not in test_idx], [shuffled[i] for i in f]))
    return out
