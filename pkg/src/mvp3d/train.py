"""Optimizers, learning-rate schedule, training loops and gradient checking."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .model import (
    FinetuneSample,
    ModelConfig,
    NonFiniteError,
    PretrainSample,
    ToyAction,
    batch_loss,
    cast_params,
    init_params,
    loss_and_grads,
    target_tokens,
)
from .patches import apply_mask, sample_mask, tokenize_views
from .pointcloud import PointCloud, gen_scene, load_ply
from .renderer import render_all

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "split", "loss", "lr", "masked_mse"]


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    epochs: int = 15
    max_steps: int | None = None
    batch_size: int = 3
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 0
    min_lr: float | None = None
    mask_ratio: float = 0.75
    strategy: str = "rgb_only"
    optimizer: str = "adamw"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss_masked_only: bool = False
    seed: int = 0
    workers: int = 0
    flush_every: int = 50
    keep_checkpoints: int = 2

    def __post_init__(self):
        if self.min_lr is None:
            # constant rate unless a floor is given
            self.min_lr = self.base_lr
        self.betas = tuple(self.betas)
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("adamw", "lamb"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def paper_pretrain(cls, **kw):
        return cls(**{**dict(mode="pretrain", base_lr=1e-4, weight_decay=0.01, epochs=15,
                             batch_size=3, mask_ratio=0.75, optimizer="adamw"), **kw})

    @classmethod
    def paper_finetune(cls, **kw):
        return cls(**{**dict(mode="finetune", base_lr=1e-4, warmup_steps=2000, min_lr=1e-6,
                             epochs=15, batch_size=3, optimizer="lamb", weight_decay=0.0), **kw})

    @classmethod
    def desk_pretrain(cls, **kw):
        return cls(**{**dict(mode="pretrain", base_lr=1e-3, weight_decay=0.01, epochs=15,
                             batch_size=3, mask_ratio=0.75, optimizer="adamw",
                             min_lr=1e-4), **kw})

    @classmethod
    def desk_finetune(cls, **kw):
        return cls(**{**dict(mode="finetune", base_lr=1e-3, warmup_steps=20, min_lr=1e-5,
                             epochs=15, batch_size=3, optimizer="lamb",
                             weight_decay=0.0), **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def _moments(params, grads, state, betas):
    b1, b2 = betas
    t = state.t + 1
    m, v = {}, {}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        m0 = state.m.get(k)
        v0 = state.v.get(k)
        m[k] = (1 - b1) * g if m0 is None else b1 * m0 + (1 - b1) * g
        v[k] = (1 - b2) * g * g if v0 is None else b2 * v0 + (1 - b2) * g * g
    return m, v, t


def _adam_direction(p, m, v, t, betas, eps, wd):
    b1, b2 = betas
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return m_hat / (np.sqrt(v_hat) + eps) + wd * p


def adamw_step(params, grads, state: OptimState, lr, betas=(0.9, 0.999), eps=1e-8, wd=0.0):
    """One decoupled-weight-decay Adam update; returns ``(params, state)``.

    Inputs are not modified. Tensors without a gradient entry are left as is.
    """
    m, v, t = _moments(params, grads, state, betas)
    out = dict(params)
    for k in grads:
        p = params[k]
        u = _adam_direction(p, m[k], v[k], t, betas, eps, wd)
        out[k] = (p - lr * u).astype(p.dtype, copy=False)
    return out, OptimState(m, v, t)


def lamb_step(params, grads, state: OptimState, lr, betas=(0.9, 0.999), eps=1e-8, wd=0.0):
    """Adam direction rescaled per tensor by the trust ratio ``|p| / |u|``.

    The ratio falls back to 1 when either norm is zero.
    """
    m, v, t = _moments(params, grads, state, betas)
    out = dict(params)
    for k in grads:
        p = params[k]
        u = _adam_direction(p, m[k], v[k], t, betas, eps, wd)
        pn = float(np.linalg.norm(p))
        un = float(np.linalg.norm(u))
        r = pn / un if pn > 0 and un > 0 else 1.0
        out[k] = (p - lr * r * u).astype(p.dtype, copy=False)
    return out, OptimState(m, v, t)


OPTIMIZERS = {"adamw": adamw_step, "lamb": lamb_step}


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 2000
    min_lr: float = 1e-6
    total_steps: int = 10000


def lr_schedule(step: int, cfg) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine down to ``min_lr``
    reached at ``total_steps``; steps past the end stay at ``min_lr``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    base, warm, floor, total = cfg.base_lr, cfg.warmup_steps, cfg.min_lr, cfg.total_steps
    if step >= total:
        return floor
    if step < warm:
        return base * step / warm
    progress = (step - warm) / max(total - warm, 1)
    return base - (base - floor) * 0.5 * (1.0 - math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# data preparation


def _render_item(item, size):
    if isinstance(item, np.ndarray):
        return item
    if isinstance(item, tuple):
        item = item[0]
    if isinstance(item, (str, os.PathLike)):
        item = load_ply(item)
    if hasattr(item, "cloud"):
        item = item.cloud
    if not isinstance(item, PointCloud):
        raise TypeError(f"cannot render corpus item of type {type(item).__name__}")
    return render_all(item, size, size)


def prepare_views(corpus, size: int, max_skip_fraction=0.1) -> list[np.ndarray]:
    """Render every corpus entry once; unreadable entries are skipped with a
    warning, and more than ``max_skip_fraction`` skipped aborts."""
    views, skipped = [], 0
    for item in corpus:
        try:
            views.append(_render_item(item, size))
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping unreadable scene %s: %s", item, exc)
    n = len(views) + skipped
    if n == 0:
        raise TrainError("corpus is empty")
    if skipped > max_skip_fraction * n:
        raise TrainError(f"{skipped} of {n} scenes unreadable, aborting")
    return views


def procedural_corpus(n: int, seed: int, spec=None) -> list[PointCloud]:
    return [gen_scene(seed + i, spec)[0] for i in range(n)]


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([k & (2**64 - 1) for k in keys]).generate_state(1, np.uint64)[0])


def make_pretrain_sample(views, cfg: ModelConfig, ratio, strategy, seed) -> PretrainSample:
    tok = tokenize_views(views, cfg.patch)
    plan = sample_mask(cfg.n_tokens, ratio, strategy, seed, cfg.n_views)
    masked, flags = apply_mask(tok, plan, cfg.patch)
    return PretrainSample(masked, flags, target_tokens(tok, cfg, strategy))


def make_finetune_sample(views, goal, action, cfg: ModelConfig) -> FinetuneSample:
    tok = tokenize_views(views, cfg.patch)
    flags = np.zeros((cfg.n_views, cfg.n_tokens), dtype=bool)
    return FinetuneSample(tok, flags, int(goal), action)


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    params: dict
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    metrics: list
    checkpoint: Path | None = None
    step: int = 0
    epoch: int = 0

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.metrics if r["split"] == "train"]

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(self.params, self.model_cfg, self.train_cfg.to_dict(), self.step,
                          self.epoch)


class _MetricsWriter:
    def __init__(self, path, flush_every):
        self.rows = []
        self.fh = None
        self.flush_every = flush_every
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(METRICS_HEADER)

    def add(self, row):
        self.rows.append(row)
        if self.fh is not None:
            self.writer.writerow([row[k] if not isinstance(row[k], float) else repr(row[k])
                                  for k in METRICS_HEADER])
            if len(self.rows) % self.flush_every == 0:
                self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _run(batches_fn, n_items, params, model_cfg, train_cfg, out_dir, mode, val_fn=None):
    steps_per_epoch = math.ceil(n_items / train_cfg.batch_size)
    total = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total = min(total, train_cfg.max_steps)
    sched = ScheduleConfig(train_cfg.base_lr, train_cfg.warmup_steps, train_cfg.min_lr, total)
    step_fn = OPTIMIZERS[train_cfg.optimizer]
    workers = train_cfg.workers or os.cpu_count() or 1
    rng = np.random.default_rng([train_cfg.seed & (2**64 - 1), 11])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics = _MetricsWriter(out_dir / "metrics.csv" if out_dir else None, train_cfg.flush_every)
    state = OptimState()
    saved = []
    last_ckpt = None
    step = 0
    epoch = 0
    try:
        while step < total:
            order = rng.permutation(n_items)
            for b in range(steps_per_epoch):
                if step >= total:
                    break
                idx = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
                batch = batches_fn(idx, step)
                loss, grads, info = loss_and_grads(
                    batch, params, model_cfg, mode,
                    masked_only=train_cfg.loss_masked_only, workers=workers,
                )
                step += 1
                lr = lr_schedule(step, sched)
                params, state = step_fn(params, grads, state, lr, train_cfg.betas,
                                        train_cfg.eps, train_cfg.weight_decay)
                metrics.add({"step": step, "epoch": epoch, "split": "train", "loss": float(loss),
                             "lr": float(lr), "masked_mse": float(info.get("masked_mse", float("nan")))})
            if val_fn is not None:
                vloss = val_fn(params)
                metrics.add({"step": step, "epoch": epoch, "split": "val", "loss": float(vloss),
                             "lr": float(lr_schedule(step, sched)), "masked_mse": float("nan")})
            if out_dir is not None:
                path = out_dir / f"ckpt_epoch{epoch:03d}.ckpt"
                save_checkpoint(path, params, model_cfg, train_cfg.to_dict(), step, epoch,
                                rng.bit_generator.state)
                saved.append(path)
                while len(saved) > train_cfg.keep_checkpoints:
                    saved.pop(0).unlink(missing_ok=True)
                last_ckpt = path
            epoch += 1
    finally:
        metrics.close()
    if out_dir is not None:
        last_ckpt = save_checkpoint(out_dir / "final.ckpt", params, model_cfg,
                                    train_cfg.to_dict(), step, epoch, rng.bit_generator.state)
    return TrainResult(params, model_cfg, train_cfg, metrics.rows, last_ckpt, step, epoch)


def pretrain(corpus, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
             params=None) -> TrainResult:
    """Masked multi-view reconstruction training of encoder + MAE decoder.

    Args:
        corpus: point clouds, PLY paths, or pre-rendered ``(5, H, W, 10)`` views.
        model_cfg: network shape; ``model_cfg.strategy`` must match ``train_cfg.strategy``.
        train_cfg: loop and optimizer settings.
        out_dir: if given, receives ``metrics.csv`` and per-epoch checkpoints.
        params: optional starting parameters (``enc.*`` and ``mae.*``).
    """
    if model_cfg.strategy != train_cfg.strategy:
        raise ValueError(
            f"model strategy {model_cfg.strategy!r} != train strategy {train_cfg.strategy!r}"
        )
    views = prepare_views(corpus, model_cfg.image_size)
    if params is None:
        params = init_params(model_cfg, parts=("enc", "mae"))

    def batches(idx, step):
        return [
            make_pretrain_sample(views[i], model_cfg, train_cfg.mask_ratio, train_cfg.strategy,
                                 derive_seed(train_cfg.seed, step, j))
            for j, i in enumerate(idx)
        ]

    return _run(batches, len(views), params, model_cfg, train_cfg, out_dir, "pretrain")


class ConfigMismatch(ValueError):
    pass


def check_compatible(a: ModelConfig, b: ModelConfig, ignore=("seed", "strategy")):
    diff = [f.name for f in fields(ModelConfig)
            if f.name not in ignore and getattr(a, f.name) != getattr(b, f.name)]
    if diff:
        detail = ", ".join(f"{k}: {getattr(a, k)!r} vs {getattr(b, k)!r}" for k in diff)
        raise ConfigMismatch(f"checkpoint/config mismatch in {detail}")


def finetune_init(model_cfg: ModelConfig, init: Checkpoint | None = None) -> dict:
    """Encoder from ``init`` (MAE decoder dropped) or from seed; fresh action decoder."""
    if init is None:
        return init_params(model_cfg, parts=("enc", "act"))
    check_compatible(init.model_cfg, model_cfg)
    params = {k: v.copy() for k, v in init.params.items() if k.startswith("enc.")}
    missing = set(init_params(model_cfg, parts=("enc",))) - set(params)
    if missing:
        raise ConfigMismatch(f"checkpoint lacks encoder tensors: {sorted(missing)[:5]}")
    params.update(init_params(model_cfg, parts=("act",)))
    return params


def demo_views(demos, size):
    return [_render_item(d.cloud if hasattr(d, "cloud") else d[0], size) for d in demos]


def finetune(demos, init: Checkpoint | None, model_cfg: ModelConfig, train_cfg: TrainConfig,
             out_dir=None, val_demos=None) -> TrainResult:
    """Train encoder + action decoder on ``(scene, goal, action)`` demonstrations.

    ``demos`` are ``task.Episode`` objects or ``(cloud_or_views, goal, ToyAction)``
    tuples. Without ``init`` the encoder starts from the config seed.
    """
    if not demos:
        raise TrainError("finetune needs at least one demonstration")
    params = finetune_init(model_cfg, init)
    views = demo_views(demos, model_cfg.image_size)
    goals = [d.goal if hasattr(d, "goal") else d[1] for d in demos]
    actions = [d.action if hasattr(d, "action") else d[2] for d in demos]

    def batches(idx, step):
        return [make_finetune_sample(views[i], goals[i], actions[i], model_cfg) for i in idx]

    val_fn = None
    if val_demos:
        from .eval import position_errors

        val_fn = lambda p: float(np.mean(position_errors(p, model_cfg, val_demos)))  # noqa: E731
    return _run(batches, len(views), params, model_cfg, train_cfg, out_dir, "finetune", val_fn)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    per_tensor: dict
    mode: str

    @property
    def max_rel_err(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else 0.0


def check_gradients(loss_fn, params, grads, eps=1e-4, samples=8, seed=0, atol=1e-10) -> dict:
    """Central differences on ``samples`` random entries per tensor.

    Pairs where both analytic and numeric values are below ``atol`` are skipped.
    Returns the per-tensor maximum relative error.
    """
    rng = np.random.default_rng(seed)
    report = {}
    for name in sorted(params):
        p = params[name]
        idx = rng.choice(p.size, size=min(samples, p.size), replace=False)
        worst = 0.0
        for i in idx:
            old = p.flat[i]
            p.flat[i] = old + eps
            lp = loss_fn(params)
            p.flat[i] = old - eps
            lm = loss_fn(params)
            p.flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = float(grads[name].flat[i])
            scale = max(abs(num), abs(ana))
            if scale < atol:
                continue
            worst = max(worst, abs(num - ana) / scale)
        report[name] = worst
    return report


def grad_check(model_cfg: ModelConfig, eps=1e-4, samples=8, mode="pretrain", seed=0,
               batch_size=1) -> GradCheckReport:
    """Compare analytic gradients against central differences in float64.

    Parameters are drawn from the seeded init plus a small random offset so
    that biases and norm offsets are not all at their (symmetric) init values.
    """
    rng = np.random.default_rng(seed)
    parts = ("enc", "mae") if mode == "pretrain" else ("enc", "act")
    params = cast_params(init_params(model_cfg, parts=parts, seed=seed), np.float64)
    for k in params:
        params[k] = params[k] + rng.normal(0.0, 0.02, params[k].shape)
    batch = []
    for j in range(batch_size):
        cloud, meta = gen_scene(derive_seed(seed, 99, j))
        views = render_all(cloud, model_cfg.image_size, model_cfg.image_size)
        if mode == "pretrain":
            batch.append(make_pretrain_sample(views, model_cfg, 0.75, model_cfg.strategy,
                                              derive_seed(seed, j)))
        else:
            from .task import goal_id, toy_action

            goal = goal_id(meta) % model_cfg.goal_vocab
            batch.append(make_finetune_sample(views, goal, toy_action(meta), model_cfg))
    _, grads, _ = loss_and_grads(batch, params, model_cfg, mode)

    def loss_fn(p):
        return batch_loss(batch, p, model_cfg, mode)

    report = check_gradients(loss_fn, params, grads, eps=eps, samples=samples, seed=seed)
    return GradCheckReport(report, mode)
