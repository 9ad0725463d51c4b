"""Backbone, multi-scale spatial attention, zone pooling, gating, heads and loss.

Parameters live in a flat ``dict[str, np.ndarray]`` whose insertion order is
the canonical ordering used by checkpoints. All forward functions are batched
over a leading case axis ``N``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import BiomarkerLabels, LabeledCase
from .morphology import downsample_mask, make_zones

TASKS = ("er", "pr", "her2", "ki67")
CLASS_TASKS = ("er", "pr", "her2")
ZONES = ("core", "rim", "peri")
KI67_WEIGHT = 0.1

ZONE_MODES = ("all", "no_peri", "core_only")
ATTENTION_MODES = ("multi", "single", "none")


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    widths: tuple[int, ...] = (8, 16)
    radii: tuple[int, ...] = (1, 2, 3)
    hidden: int = 16
    keep_prob: float = 0.5
    seed: int = 0
    attention: str = "multi"
    attention_offset: float = -1.0
    zones: str = "all"
    shared_backbone: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "widths", tuple(int(n) for n in self.widths))
        object.__setattr__(self, "radii", tuple(int(n) for n in self.radii))
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"input dims must be three extents >= 8, got {self.dims}")
        if not self.widths:
            raise ValueError("need at least one backbone stage")
        if any(n % self.downsample for n in self.dims):
            raise ValueError(f"downsample factor {self.downsample} does not divide dims {self.dims}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")
        if self.zones not in ZONE_MODES:
            raise ValueError(f"zones must be one of {ZONE_MODES}")
        if self.attention == "multi" and len(self.radii) < 2:
            raise ValueError("multi-scale attention needs at least two kernel radii")
        if self.attention == "single" and len(self.radii) != 1:
            raise ValueError("single-scale attention takes exactly one radius")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        return tuple(n // self.downsample for n in self.dims)

    @property
    def channels(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# ---------------------------------------------------------------- parameters


def _backbones(config: ModelConfig) -> list[str]:
    return ["backbone"] if config.shared_backbone else [f"backbone_{t}" for t in TASKS]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for bb in _backbones(config):
        cin = 1
        for s, cout in enumerate(config.widths):
            shapes[f"{bb}.conv{s}.w"] = (cout, cin, 3, 3, 3)
            shapes[f"{bb}.conv{s}.b"] = (cout,)
            cin = cout
        if config.attention != "none":
            for r in config.radii:
                k = 2 * r + 1
                shapes[f"{bb}.attn_r{r}.w"] = (1, 2, k, k, k)
                shapes[f"{bb}.attn_r{r}.b"] = (1,)
    c = config.channels
    for t in TASKS:
        shapes[f"gate_{t}.w"] = (3, 3 * c)
        shapes[f"gate_{t}.b"] = (3,)
    for t in TASKS:
        shapes[f"head_{t}.w1"] = (config.hidden, c)
        shapes[f"head_{t}.b1"] = (config.hidden,)
        shapes[f"head_{t}.w2"] = (1, config.hidden)
        shapes[f"head_{t}.b2"] = (1,)
    return shapes


def init_model(config: ModelConfig) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.rsplit(".", 1)[1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------- building blocks


def extract_features(x: Tensor, p: dict[str, Tensor], config: ModelConfig, prefix: str = "backbone") -> Tensor:
    """Stride-2 3x3x3 conv + relu per stage; (N, 1, H, W, D) -> (N, C, H/f, W/f, D/f)."""
    if tuple(x.shape[2:]) != config.dims:
        raise ValueError(f"volume dims {tuple(x.shape[2:])} do not match model dims {config.dims}")
    h = x
    for s in range(len(config.widths)):
        h = ag.relu(ag.conv3d(h, p[f"{prefix}.conv{s}.w"], p[f"{prefix}.conv{s}.b"], stride=2, padding=1))
    return h


def receptive_radius(config: ModelConfig) -> int:
    """Half-width, in input voxels, of the window a feature voxel depends on."""
    return sum(2**s for s in range(len(config.widths)))


def spatial_attention(feat: Tensor, p: dict[str, Tensor], config: ModelConfig, prefix: str = "backbone",
                      force: float | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(A, feat * A)`` with ``A`` of shape (N, 1, h, w, d).

    ``A = sigmoid(offset + sum_r conv_r([mean_c(feat); max_c(feat)]))``. The
    fixed negative ``offset`` starts the gate at about a quarter open, so
    voxels that never receive gradient stay below voxels the heads rely on. ``force`` pins ``A`` to a constant (used for
    the no-attention ablation and tests).
    """
    if config.attention == "none" or force is not None:
        a = Tensor(np.full((feat.shape[0], 1) + tuple(feat.shape[2:]), 1.0 if force is None else force))
        return a, ag.mul(feat, a)
    pooled = ag.concat([ag.mean(feat, axis=1, keepdims=True), ag.max(feat, axis=1, keepdims=True)], axis=1)
    logits = None
    for r in config.radii:
        term = ag.conv3d(pooled, p[f"{prefix}.attn_r{r}.w"], p[f"{prefix}.attn_r{r}.b"], padding=r)
        logits = term if logits is None else ag.add(logits, term)
    if config.attention_offset:
        logits = ag.add(logits, config.attention_offset)
    a = ag.sigmoid(logits)
    return a, ag.mul(feat, a)


def masked_pool(f_spatial: Tensor, zone: np.ndarray) -> Tensor:
    """Zone mean of each channel: (N, C, h, w, d) x (N, h, w, d) -> (N, C).

    A case whose zone is empty pools to the zero vector.
    """
    zone = np.asarray(zone, dtype=np.float64)
    if zone.shape != (f_spatial.shape[0],) + tuple(f_spatial.shape[2:]):
        raise ValueError(f"zone shape {zone.shape} does not match features {f_spatial.shape}")
    count = zone.sum(axis=(1, 2, 3))
    inv = np.divide(1.0, count, out=np.zeros_like(count), where=count > 0)
    total = ag.sum(ag.mul(f_spatial, zone[:, None]), axis=(2, 3, 4))
    return ag.mul(total, inv[:, None])


def gate_weights(zone_feats: list[Tensor], w: Tensor, b: Tensor, zones: str = "all") -> Tensor:
    """Softmax gate over (core, rim, peri) from the concatenated zone vectors -> (N, 3)."""
    logits = ag.linear(ag.concat(zone_feats, axis=1), w, b)
    n = logits.shape[0]
    if zones == "all":
        return ag.softmax(logits, axis=1)
    if zones == "no_peri":
        two = ag.softmax(ag.index(logits, (slice(None), slice(0, 2))), axis=1)
        return ag.concat([two, Tensor(np.zeros((n, 1)))], axis=1)
    return Tensor(np.tile([1.0, 0.0, 0.0], (n, 1)))


def roi_weighted_feature(zone_feats: list[Tensor], gates: Tensor) -> Tensor:
    out = None
    for r, f in enumerate(zone_feats):
        term = ag.mul(ag.index(gates, (slice(None), slice(r, r + 1))), f)
        out = term if out is None else ag.add(out, term)
    return out


def head_output(f: Tensor, p: dict[str, Tensor], task: str, keep: float, train: bool, rng) -> Tensor:
    """Two-layer head, pre-activation output of shape (N,)."""
    h = ag.relu(ag.linear(f, p[f"head_{task}.w1"], p[f"head_{task}.b1"]))
    h = ag.dropout(h, keep, train, rng)
    return ag.reshape(ag.linear(h, p[f"head_{task}.w2"], p[f"head_{task}.b2"]), (f.shape[0],))


def predict_classification(f, p, task, keep=1.0, train=False, rng=None) -> Tensor:
    return ag.sigmoid(head_output(f, p, task, keep, train, rng))


def predict_ki67(f, p, keep=1.0, train=False, rng=None) -> Tensor:
    """Raw regression output; clamp with :func:`clamp_ki67` at inference."""
    return head_output(f, p, "ki67", keep, train, rng)


def clamp_ki67(x):
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------- batched forward


@dataclass
class Batch:
    x: np.ndarray  # (N, 1, H, W, D)
    zones: dict[str, np.ndarray]  # name -> (N, h, w, d) at feature resolution
    fallback: np.ndarray  # (N,) bool
    labels: list[BiomarkerLabels] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)


def case_zones(case: LabeledCase, factor: int) -> tuple[dict[str, np.ndarray], bool]:
    z = make_zones(case.mask)
    return {name: downsample_mask(m, factor) for name, m in zip(ZONES, z.as_tuple())}, z.fallback


def make_batch(cases: list[LabeledCase], config: ModelConfig, zone_cache: dict | None = None) -> Batch:
    xs, fb = [], []
    zones = {name: [] for name in ZONES}
    for c in cases:
        if c.dims != config.dims:
            raise ValueError(f"case {c.id} dims {c.dims} do not match model dims {config.dims}")
        key = c.id
        if zone_cache is not None and key in zone_cache:
            zd, flag = zone_cache[key]
        else:
            zd, flag = case_zones(c, config.downsample)
            if zone_cache is not None:
                zone_cache[key] = (zd, flag)
        xs.append(c.volume.astype(np.float64)[None])
        fb.append(flag)
        for name in ZONES:
            zones[name].append(zd[name])
    return Batch(
        np.stack(xs),
        {name: np.stack(v).astype(np.float64) for name, v in zones.items()},
        np.array(fb, dtype=bool),
        [c.labels for c in cases],
        [c.id for c in cases],
    )


@dataclass
class Outputs:
    probs: dict[str, Tensor]  # task -> (N,)
    ki67_raw: Tensor  # (N,)
    attention: Tensor  # (N, 1, h, w, d); the ER pipeline's map when backbones are split
    gates: dict[str, Tensor]  # task -> (N, 3)


def forward_batch(params: dict[str, Tensor], batch: Batch, config: ModelConfig, train: bool = False,
                  rng: np.random.Generator | None = None, force_attention: float | None = None) -> Outputs:
    x = Tensor(batch.x)
    keep = config.keep_prob
    pipelines = {}
    for bb in _backbones(config):
        feat = extract_features(x, params, config, bb)
        a, fsp = spatial_attention(feat, params, config, bb, force=force_attention)
        zf = [masked_pool(fsp, batch.zones[name]) for name in ZONES]
        pipelines[bb] = (a, zf)
    probs, gates = {}, {}
    ki67_raw = None
    for t in TASKS:
        a, zf = pipelines["backbone" if config.shared_backbone else f"backbone_{t}"]
        g = gate_weights(zf, params[f"gate_{t}.w"], params[f"gate_{t}.b"], config.zones)
        f_roi = roi_weighted_feature(zf, g)
        gates[t] = g
        if t == "ki67":
            ki67_raw = predict_ki67(f_roi, params, keep, train, rng)
        else:
            probs[t] = predict_classification(f_roi, params, t, keep, train, rng)
    att = pipelines["backbone" if config.shared_backbone else "backbone_er"][0]
    return Outputs(probs, ki67_raw, att, gates)


def label_arrays(labels: list[BiomarkerLabels]) -> dict[str, np.ndarray]:
    return {t: np.array([getattr(lab, t) for lab in labels], dtype=np.float64) for t in TASKS}


def batch_loss(out: Outputs, labels: list[BiomarkerLabels], tasks=TASKS) -> Tensor:
    """Mean over the batch of the joint loss restricted to ``tasks``."""
    y = label_arrays(labels)
    n = len(labels)
    total = None
    for t in tasks:
        if t == "ki67":
            term = ag.scale(ag.sum(ag.squared_error(out.ki67_raw, y["ki67"])), KI67_WEIGHT)
        else:
            term = ag.sum(ag.bce(out.probs[t], y[t]))
        total = term if total is None else ag.add(total, term)
    return ag.scale(total, 1.0 / n)


def joint_loss(p_er, p_pr, p_her2, ki67_raw, labels: BiomarkerLabels):
    """Single-case joint loss: three binary cross-entropies plus 0.1 * squared Ki-67 error."""
    if not isinstance(labels, BiomarkerLabels):
        raise TypeError("labels must be BiomarkerLabels")
    total = None
    for p, t in ((p_er, "er"), (p_pr, "pr"), (p_her2, "her2")):
        term = ag.sum(ag.bce(p, float(getattr(labels, t))))
        total = term if total is None else ag.add(total, term)
    k = ag.scale(ag.sum(ag.squared_error(ki67_raw, labels.ki67)), KI67_WEIGHT)
    return ag.add(total, k)


# ---------------------------------------------------------------- single-case API


@dataclass
class Prediction:
    p_er: float
    p_pr: float
    p_her2: float
    ki67: float
    ki67_raw: float
    attention: np.ndarray  # (h, w, d) at feature resolution
    gates: dict[str, np.ndarray]
    zone_fallback: bool

    def prob(self, task: str) -> float:
        return getattr(self, f"p_{task}")


def as_constants(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def predict(cases: list[LabeledCase], params: dict[str, np.ndarray], config: ModelConfig,
            batch_size: int = 8, force_attention: float | None = None) -> list[Prediction]:
    """Eval-mode predictions, one per case."""
    consts = as_constants(params)
    preds = []
    for i in range(0, len(cases), batch_size):
        batch = make_batch(cases[i : i + batch_size], config)
        out = forward_batch(consts, batch, config, train=False, force_attention=force_attention)
        raw = out.ki67_raw.data
        for j in range(len(batch.ids)):
            preds.append(Prediction(
                float(out.probs["er"].data[j]),
                float(out.probs["pr"].data[j]),
                float(out.probs["her2"].data[j]),
                float(clamp_ki67(raw[j])),
                float(raw[j]),
                out.attention.data[j, 0].copy(),
                {t: out.gates[t].data[j].copy() for t in TASKS},
                bool(batch.fallback[j]),
            ))
    return preds


def forward(case: LabeledCase, params: dict[str, np.ndarray], config: ModelConfig, train: bool = False,
            rng: np.random.Generator | None = None) -> Prediction:
    if not train:
        return predict([case], params, config)[0]
    batch = make_batch([case], config)
    out = forward_batch(as_constants(params), batch, config, train=True, rng=rng)
    raw = float(out.ki67_raw.data[0])
    return Prediction(float(out.probs["er"].data[0]), float(out.probs["pr"].data[0]),
                      float(out.probs["her2"].data[0]), float(clamp_ki67(raw)), raw,
                      out.attention.data[0, 0].copy(), {t: out.gates[t].data[0].copy() for t in TASKS},
                      bool(batch.fallback[0]))


# ---------------------------------------------------------------- subtypes


SUBTYPES = ("LuminalA", "LuminalB", "HER2-enriched", "TripleNegative")


def subtype_from_biomarkers(labels: BiomarkerLabels) -> str:
    hr_pos = bool(labels.er or labels.pr)
    her2 = bool(labels.her2)
    if hr_pos:
        return "LuminalB" if her2 or labels.ki67 >= 0.20 else "LuminalA"
    return "HER2-enriched" if her2 else "TripleNegative"


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SMTLCKPT"


def save_checkpoint(path, params: dict[str, np.ndarray], config: ModelConfig, **meta) -> Path:
    """Magic, u64 header length, JSON header, then float64 LE parameters in header order."""
    path = Path(path)
    header = {
        "config": config.to_dict(),
        "params": [[name, list(a.shape)] for name, a in params.items()],
        **meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.values())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + body)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    off = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: payload size does not match header")
    return params, ModelConfig.from_dict(header["config"]), header


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """Model config for one ablation variant (multi-task is a training-side switch)."""
    if variant in ("full", "no_multitask"):
        return config
    if variant == "no_multiscale_attn":
        return replace(config, attention="none")
    if variant == "single_scale_attn":
        return replace(config, attention="single", radii=(config.radii[0],))
    if variant == "no_peritumoral":
        return replace(config, zones="no_peri")
    if variant == "tumor_core_only":
        return replace(config, zones="core_only")
    if variant == "no_shared_extractor":
        return replace(config, shared_backbone=False)
    raise ValueError(f"unknown variant {variant!r}")
