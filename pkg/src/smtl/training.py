"""Adam with classic L2 decay, the mini-batch training loop and the ablation harness."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .data import LabeledCase, augment
from .model import (CLASS_TASKS, TASKS, ModelConfig, batch_loss, forward_batch, init_model,
                    make_batch, predict, with_variant)
from .stats import mae, roc_auc

log = logging.getLogger(__name__)

VARIANTS = (
    "full",
    "no_multiscale_attn",
    "no_peritumoral",
    "no_multitask",
    "no_shared_extractor",
    "single_scale_attn",
    "tumor_core_only",
)
VARIANT_LABELS = {
    "full": "Full Model",
    "no_multiscale_attn": "w/o Multi-scale Attn",
    "no_peritumoral": "w/o Peritumoral Feat.",
    "no_multitask": "w/o Multi-task Learn.",
    "no_shared_extractor": "w/o Shared Feat. Ext.",
    "single_scale_attn": "Single-scale Attn",
    "tumor_core_only": "Tumor Core Only",
}


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 200
    l2: float = 1e-5
    augment: bool = True
    seed: int = 0
    tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if not set(self.tasks) <= set(TASKS) or not self.tasks:
            raise ValueError(f"tasks must be a nonempty subset of {TASKS}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              l2: float = 0.0) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; ``l2 * param`` is added to each gradient first."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        g = np.zeros_like(p) if g is None else g
        if l2:
            g = g + l2 * p
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        new[k] = p - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return new, state


def loss_and_grads(params, batch, model_config: ModelConfig, tasks=TASKS, train=True, rng=None):
    g = ag.Graph()
    leaves = {k: g.leaf(v, k) for k, v in params.items()}
    out = forward_batch(leaves, batch, model_config, train=train, rng=rng)
    loss = batch_loss(out, batch.labels, tasks)
    gmap = g.backward(loss)
    grads = {k: gmap.get(t.node_id, np.zeros_like(t.data)) for k, t in leaves.items()}
    return loss.item(), grads


def evaluate(cases: list[LabeledCase], params, model_config: ModelConfig, tasks=TASKS) -> dict:
    """Eval-mode loss, per-task AUC (nan if one class) and Ki-67 MAE in percentage points."""
    preds = predict(cases, params, model_config)
    out = {}
    total = 0.0
    for c, p in zip(cases, preds):
        for t in CLASS_TASKS:
            if t in tasks:
                q = min(max(p.prob(t), ag.BCE_EPS), 1 - ag.BCE_EPS)
                y = c.labels.binary(t)
                total -= y * np.log(q) + (1 - y) * np.log1p(-q)
        if "ki67" in tasks:
            total += 0.1 * (p.ki67_raw - c.labels.ki67) ** 2
    out["loss"] = total / len(cases)
    for t in CLASS_TASKS:
        y = [c.labels.binary(t) for c in cases]
        out[f"auc_{t}"] = roc_auc([p.prob(t) for p in preds], y).auc if 0 < sum(y) < len(y) else float("nan")
    out["ki67_mae_pp"] = mae([p.ki67 for p in preds], [c.labels.ki67 for c in cases])[0]
    out["predictions"] = preds
    return out


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        cols = ["epoch", "train_loss", "val_loss", "val_auc_er", "val_auc_pr", "val_auc_her2", "val_ki67_mae_pp"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["epoch"]] + [_fmt(r[c]) for c in cols[1:]])
        return buf.getvalue()


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.12g}"


def train(train_cases: list[LabeledCase], val_cases: list[LabeledCase], config: TrainConfig,
          model_config: ModelConfig, params: dict[str, np.ndarray] | None = None,
          progress=None) -> tuple[dict[str, np.ndarray], History]:
    """Mini-batch Adam on the joint loss; returns the best-validation-loss parameters."""
    if not train_cases or not val_cases:
        raise ValueError("train and validation sets must be nonempty")
    params = init_model(model_config) if params is None else {k: v.copy() for k, v in params.items()}
    state = AdamState.zeros_like(params)
    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, dropout_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    zone_cache: dict = {}
    hist = History()
    best = (np.inf, {k: v.copy() for k, v in params.items()})
    n = len(train_cases)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            cases = [train_cases[i] for i in order[start : start + config.batch_size]]
            cache = zone_cache
            if config.augment:
                cases = [augment(c, int(aug_rng.integers(2**63))) for c in cases]
                cache = None
            batch = make_batch(cases, model_config, cache)
            loss, grads = loss_and_grads(params, batch, model_config, config.tasks, True, dropout_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            params, state = adam_step(params, grads, state, config.lr, config.l2)
            epoch_losses.append(loss)
        ev = evaluate(val_cases, params, model_config, config.tasks)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": ev["loss"],
            "val_auc_er": ev["auc_er"],
            "val_auc_pr": ev["auc_pr"],
            "val_auc_her2": ev["auc_her2"],
            "val_ki67_mae_pp": ev["ki67_mae_pp"],
        }
        hist.rows.append(row)
        if ev["loss"] < best[0]:
            best = (ev["loss"], {k: v.copy() for k, v in params.items()})
            hist.best_epoch = epoch
        if progress:
            progress(row)
        log.debug("epoch %d train %.4f val %.4f", epoch, row["train_loss"], row["val_loss"])
    return best[1], hist


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    variant: str
    auc_er: float
    auc_pr: float
    auc_her2: float
    auc_avg: float
    ki67_mae_pp: float
    seconds: float = 0.0

    @property
    def label(self) -> str:
        return VARIANT_LABELS[self.variant]


def train_variant(variant: str, train_cases, val_cases, config: TrainConfig, model_config: ModelConfig):
    """Train one ablation variant; returns ``{task: (params, model_config)}``."""
    mc = with_variant(model_config, variant)
    if variant != "no_multitask":
        params, _ = train(train_cases, val_cases, config, mc)
        return {t: (params, mc) for t in TASKS}
    out = {}
    for t in TASKS:
        params, _ = train(train_cases, val_cases, replace(config, tasks=(t,)), mc)
        out[t] = (params, mc)
    return out


def evaluate_variant(models: dict, test_cases) -> dict:
    res = {}
    cache = {}
    for t in TASKS:
        params, mc = models[t]
        key = id(params)
        if key not in cache:
            cache[key] = evaluate(test_cases, params, mc)
        ev = cache[key]
        if t == "ki67":
            res["ki67_mae_pp"] = ev["ki67_mae_pp"]
        else:
            res[f"auc_{t}"] = ev[f"auc_{t}"]
    return res


def run_ablation(train_cases, val_cases, test_cases, config: TrainConfig, model_config: ModelConfig,
                 variants=VARIANTS) -> list[AblationRow]:
    rows = []
    for v in variants:
        t0 = time.perf_counter()
        res = evaluate_variant(train_variant(v, train_cases, val_cases, config, model_config), test_cases)
        secs = time.perf_counter() - t0
        aucs = [res[f"auc_{t}"] for t in CLASS_TASKS]
        rows.append(AblationRow(v, *aucs, float(np.mean(aucs)), res["ki67_mae_pp"], secs))
        log.info("ablation %s done in %.1fs", v, secs)
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "auc_er", "auc_pr", "auc_her2", "auc_avg", "ki67_mae_pp"])
    for r in rows:
        w.writerow([r.label] + [_fmt(x) for x in (r.auc_er, r.auc_pr, r.auc_her2, r.auc_avg, r.ki67_mae_pp)])
    return buf.getvalue()


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


# ---------------------------------------------------------------- gradient check


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_params: int


def check_model_gradients(params: dict[str, np.ndarray], batch, model_config: ModelConfig,
                          h: float = 1e-6, tasks=TASKS) -> GradCheckResult:
    """Compare tape gradients of the eval-mode joint loss with central differences, every coordinate."""
    _, grads = loss_and_grads(params, batch, model_config, tasks, train=False)
    consts = {k: ag.Tensor(v) for k, v in params.items()}

    def loss_at() -> float:
        out = forward_batch(consts, batch, model_config, train=False)
        return batch_loss(out, batch.labels, tasks).item()

    worst = (-1.0, "", ())
    total = 0
    for name, p in params.items():
        work = p.copy()
        consts[name] = ag.Tensor(work)
        numeric = np.zeros_like(work)
        for idx in np.ndindex(work.shape):
            orig = work[idx]
            work[idx] = orig + h
            fp = loss_at()
            work[idx] = orig - h
            fm = loss_at()
            work[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss perturbing {name}{list(idx)}")
            numeric[idx] = (fp - fm) / (2 * h)
        consts[name] = ag.Tensor(p)
        err = ag.relative_error(grads[name], numeric)
        total += err.size
        i = np.unravel_index(int(np.argmax(err)), err.shape)
        if err[i] > worst[0]:
            worst = (float(err[i]), name, tuple(int(v) for v in i))
    return GradCheckResult(worst[0], worst[1], worst[2], total)
