"""Reconstruction quality, toy-task success and perturbation robustness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, action_decode, encode, mae_decode_tokens
from .patches import MaskStrategy, apply_mask, detokenize_views, sample_mask, select_channels, tokenize_views
from .pointcloud import Perturbation, PerturbationKind, apply_perturbation
from .renderer import VIEW_ORDER, render_all, write_ppm
from .task import Episode, make_episodes, toy_action
from .train import derive_seed

POS_THRESHOLD = 0.05
ROT_THRESHOLD_DEG = 15.0


@dataclass
class SceneRecon:
    masked_mse: float | None
    unmasked_mse: float | None
    copy_mse: float | None
    whole_mse: float
    n_masked_pixels: int
    n_pixels: int


@dataclass
class ReconReport:
    scenes: list = field(default_factory=list)

    def _mean(self, attr):
        vals = [getattr(s, attr) for s in self.scenes if getattr(s, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def masked_mse(self):
        return self._mean("masked_mse")

    @property
    def unmasked_mse(self):
        return self._mean("unmasked_mse")

    @property
    def copy_mse(self):
        return self._mean("copy_mse")

    @property
    def whole_mse(self):
        return self._mean("whole_mse")

    def fraction_beating_copy(self) -> float:
        rows = [s for s in self.scenes if s.masked_mse is not None]
        if not rows:
            return float("nan")
        return sum(s.masked_mse < s.copy_mse for s in rows) / len(rows)


def _views_of(scene, size):
    if isinstance(scene, np.ndarray):
        return scene
    if hasattr(scene, "cloud"):
        scene = scene.cloud
    elif isinstance(scene, tuple):
        scene = scene[0]
    return render_all(scene, size, size)


def _masked_mean(err, sel):
    n = int(sel.sum())
    return (float(err[sel].sum() / n) if n else None), n


def reconstruct_report(params, cfg: ModelConfig, scenes, ratio=0.75, strategy=None, seed=0,
                       out_dir=None) -> ReconReport:
    """Mask, encode and reconstruct each scene; score masked vs. unmasked pixels.

    The copy baseline predicts, per view and channel, the mean over that view's
    unmasked pixels. Scenes with no masked pixel report ``masked_mse=None``.
    """
    strategy = MaskStrategy(strategy or cfg.strategy)
    if strategy.value != cfg.strategy:
        raise ValueError(f"checkpoint trained for {cfg.strategy!r}, asked for {strategy.value!r}")
    if "mae.head_b" not in params:
        raise ValueError("checkpoint has no reconstruction head (was it finetuned?)")
    if params["mae.head_b"].shape[0] != cfg.patch * cfg.patch * cfg.out_channels:
        raise ValueError("checkpoint MAE head does not match its config")
    P, V, N = cfg.patch, cfg.n_views, cfg.n_tokens
    C = len(strategy.channels)
    report = ReconReport()
    for i, scene in enumerate(scenes):
        views = _views_of(scene, cfg.image_size)
        tok = tokenize_views(views, P)
        plan = sample_mask(N, ratio, strategy, derive_seed(seed, i), V)
        masked, flags = apply_mask(tok, plan, P)
        z = encode(masked, flags, params, cfg)
        pred = mae_decode_tokens(z, params, cfg, strategy).astype(np.float64)
        target = select_channels(tok, P, strategy.channels)
        pred_px = pred.reshape(V, N, P * P, C)
        tgt_px = target.reshape(V, N, P * P, C)
        err = ((pred_px - tgt_px) ** 2).sum(axis=-1)
        sel = np.broadcast_to(flags[:, :, None], err.shape)
        masked_mse, n_masked = _masked_mean(err, sel)
        unmasked_mse, _ = _masked_mean(err, ~sel)
        copy_mse = None
        if n_masked:
            copy_err = np.zeros_like(err)
            for v in range(V):
                vis = tgt_px[v][~flags[v]]
                mean = vis.reshape(-1, C).mean(axis=0) if vis.size else np.zeros(C)
                copy_err[v] = ((tgt_px[v] - mean) ** 2).sum(axis=-1)
            copy_mse, _ = _masked_mean(copy_err, sel)
        report.scenes.append(SceneRecon(masked_mse, unmasked_mse, copy_mse,
                                        float(err.mean()), n_masked, err.size))
        if out_dir is not None:
            _dump_recon(Path(out_dir), f"scene{i:04d}", views, masked, pred, cfg, strategy)
    return report


def _dump_recon(out_dir, name, views, masked, pred, cfg, strategy):
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = (cfg.grid, cfg.grid)
    masked_img = detokenize_views(masked, grid, cfg.patch)
    recon = detokenize_views(pred, grid, cfg.patch)
    for v, vname in enumerate(VIEW_ORDER):
        panel = np.concatenate([views[v][..., :3], masked_img[v][..., :3], recon[v][..., :3]], axis=1)
        write_ppm(out_dir / f"{name}_{vname}_recon.ppm", panel)


def write_recon_csv(report: ReconReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "masked_mse", "unmasked_mse", "copy_mse", "whole_mse"])
        for i, s in enumerate(report.scenes):
            w.writerow([i, "" if s.masked_mse is None else s.masked_mse,
                        "" if s.unmasked_mse is None else s.unmasked_mse,
                        "" if s.copy_mse is None else s.copy_mse, s.whole_mse])


# ---------------------------------------------------------------------------
# toy-task success


@dataclass
class EpisodeResult:
    pos_err: float
    rot_err_deg: float
    open_correct: bool

    @property
    def success(self) -> bool:
        return (self.pos_err < POS_THRESHOLD and self.rot_err_deg < ROT_THRESHOLD_DEG
                and self.open_correct)


@dataclass
class SuccessReport:
    episodes: list

    @property
    def success_rate(self) -> float:
        if not self.episodes:
            return float("nan")
        return sum(e.success for e in self.episodes) / len(self.episodes)

    @property
    def mean_pos_err(self) -> float:
        return float(np.mean([e.pos_err for e in self.episodes]))


def score_action(pred, truth) -> EpisodeResult:
    pos_err = float(np.linalg.norm(np.asarray(pred.a_pos) - np.asarray(truth.a_pos)))
    dot = abs(float(np.dot(pred.a_rot, truth.a_rot)))
    rot_err = math.degrees(2.0 * math.acos(min(1.0, dot)))
    open_correct = (pred.a_open > 0.5) == (truth.a_open > 0.5)
    return EpisodeResult(pos_err, rot_err, bool(open_correct))


def predict(params, cfg: ModelConfig, episodes):
    out = []
    flags = np.zeros((cfg.n_views, cfg.n_tokens), dtype=bool)
    for ep in episodes:
        views = _views_of(ep, cfg.image_size)
        z = encode(tokenize_views(views, cfg.patch), flags, params, cfg)
        goal = ep.goal if hasattr(ep, "goal") else ep[1]
        out.append(action_decode(z, goal, params, cfg))
    return out


def _truth(ep):
    return ep.action if hasattr(ep, "action") else ep[2]


def position_errors(params, cfg: ModelConfig, episodes) -> np.ndarray:
    preds = predict(params, cfg, episodes)
    return np.array([np.linalg.norm(p.a_pos - _truth(e).a_pos) for p, e in zip(preds, episodes)])


def eval_success(params, cfg: ModelConfig, episodes, predictions=None) -> SuccessReport:
    preds = predictions if predictions is not None else predict(params, cfg, episodes)
    return SuccessReport([score_action(p, _truth(e)) for p, e in zip(preds, episodes)])


def perturb_episodes(episodes, kind, magnitude, seed) -> list[Episode]:
    out = []
    for i, ep in enumerate(episodes):
        cloud, meta = apply_perturbation(ep.cloud, ep.meta, Perturbation(kind, magnitude),
                                         derive_seed(seed, i))
        out.append(Episode(cloud, meta, ep.goal, toy_action(meta)))
    return out


def perturbation_sweep(params, cfg: ModelConfig, kinds=None, episodes_per_kind=25, seed=0,
                       magnitude=1.0, episodes=None, spec=None) -> list[dict]:
    """Success rate without perturbation and under each perturbation kind.

    Every row is evaluated on the same base episodes (generated from ``seed``
    unless given), perturbed with per-episode derived seeds.
    """
    kinds = list(PerturbationKind) if kinds is None else [PerturbationKind(k) for k in kinds]
    if episodes is None:
        episodes = make_episodes(episodes_per_kind, derive_seed(seed, 5), spec)
    rows = [{"perturbation": "none", "success_rate": eval_success(params, cfg, episodes).success_rate,
             "n": len(episodes)}]
    for kind in kinds:
        eps = perturb_episodes(episodes, kind, magnitude, derive_seed(seed, 6))
        rows.append({"perturbation": kind.value,
                     "success_rate": eval_success(params, cfg, eps).success_rate,
                     "n": len(eps)})
    return rows


def write_rows_csv(rows, path, header=None) -> None:
    header = header or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow(r)
