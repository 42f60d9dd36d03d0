"""scikit-learn style wrappers around pretraining and finetuning.

``MultiViewMAE`` fits the masked multi-view autoencoder and transforms scenes
into pooled encoder latents. ``MultiViewPolicy`` fits the action decoder (and
encoder) on demonstrations and predicts 8-vectors ``[pos(3), quat(4), open]``.
Hyperparameters live in ``__init__`` so ``get_params``/``set_params``/``clone``
work as usual; fitted state ends in an underscore.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint, load_checkpoint
from .eval import eval_success, reconstruct_report
from .model import ModelConfig, action_decode, encode
from .patches import tokenize_views
from .train import TrainConfig, finetune, pretrain
from .validation import (
    actions_to_array,
    array_to_actions,
    check_actions,
    check_goals,
    check_positive_int,
    check_ratio,
    check_views,
    split_episodes,
)


class _MultiViewBase(BaseEstimator):
    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden=check_positive_int(self.hidden, "hidden"),
            enc_layers=check_positive_int(self.enc_layers, "enc_layers"),
            heads=check_positive_int(self.heads, "heads"),
            patch=check_positive_int(self.patch, "patch"),
            image_size=check_positive_int(self.image_size, "image_size"),
            strategy=self.strategy,
            seed=self.seed,
            **self._extra_model_kw(),
        )

    def _extra_model_kw(self):
        return {}

    def _latents(self, views):
        cfg = self.model_cfg_
        flags = np.zeros((cfg.n_views, cfg.n_tokens), dtype=bool)
        return [encode(tokenize_views(v, cfg.patch), flags, self.params_, cfg) for v in views]


class MultiViewMAE(TransformerMixin, _MultiViewBase):
    """Masked multi-view autoencoder over rendered point clouds.

    Args:
        hidden: transformer width.
        enc_layers: encoder depth.
        dec_layers: MAE decoder depth.
        heads: attention heads.
        patch: patch side in pixels.
        image_size: rendered view side; must be a multiple of ``patch``.
        strategy: ``"rgb_only"`` or ``"all_channels"``.
        mask_ratio: fraction of tokens hidden per view during training.
        max_steps: optimizer steps.
        base_lr: AdamW learning rate.
        batch_size: scenes per step.
        seed: controls initialization, masking and data order.
    """

    def __init__(self, hidden=64, enc_layers=2, dec_layers=1, heads=4, patch=8, image_size=64,
                 strategy="rgb_only", mask_ratio=0.75, max_steps=200, base_lr=1e-3,
                 batch_size=3, seed=0):
        self.hidden = hidden
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.heads = heads
        self.patch = patch
        self.image_size = image_size
        self.strategy = strategy
        self.mask_ratio = mask_ratio
        self.max_steps = max_steps
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.seed = seed

    def _extra_model_kw(self):
        return {"dec_layers": check_positive_int(self.dec_layers, "dec_layers")}

    def fit(self, X, y=None, out_dir=None):
        """Pretrain on scenes ``X`` (point clouds or ``(5, H, W, 10)`` view stacks)."""
        cfg = self._model_config()
        tcfg = TrainConfig.desk_pretrain(
            mask_ratio=check_ratio(self.mask_ratio),
            max_steps=check_positive_int(self.max_steps, "max_steps"),
            base_lr=self.base_lr,
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            strategy=self.strategy,
            seed=self.seed,
            epochs=10**6,
        )
        views = check_views(X, cfg.image_size)
        res = pretrain(list(views), cfg, tcfg, out_dir=out_dir)
        self.model_cfg_ = cfg
        self.train_cfg_ = tcfg
        self.params_ = res.params
        self.loss_curve_ = res.losses
        self.n_steps_ = res.step
        return self

    def transform(self, X):
        """Mean-pooled encoder latents of unmasked scenes, shape ``(n, hidden)``."""
        check_is_fitted(self, "params_")
        views = check_views(X, self.model_cfg_.image_size)
        return np.stack([z.reshape(-1, z.shape[-1]).mean(axis=0) for z in self._latents(views)])

    def encode_tokens(self, X):
        """Full latent grids, shape ``(n, 5 * N, hidden)`` with views in camera order."""
        check_is_fitted(self, "params_")
        return np.stack(self._latents(check_views(X, self.model_cfg_.image_size)))

    def reconstruction_report(self, X, ratio=None, seed=0, out_dir=None):
        check_is_fitted(self, "params_")
        ratio = self.mask_ratio if ratio is None else check_ratio(ratio, "ratio")
        views = check_views(X, self.model_cfg_.image_size)
        return reconstruct_report(self.params_, self.model_cfg_, list(views), ratio,
                                  self.strategy, seed, out_dir=out_dir)

    def score(self, X, y=None):
        """Negative mean masked-region MSE (higher is better)."""
        rep = self.reconstruction_report(X)
        return -rep.masked_mse if rep.masked_mse is not None else 0.0

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "params_")
        return Checkpoint(self.params_, self.model_cfg_, self.train_cfg_.to_dict(), self.n_steps_)


class MultiViewPolicy(RegressorMixin, _MultiViewBase):
    """Goal-conditioned action regressor on top of the multi-view encoder.

    ``X`` is a sequence of ``task.Episode`` objects or ``(scene, goal)`` pairs;
    ``y`` is an ``(n, 8)`` matrix and may be omitted when ``X`` holds episodes.

    Args:
        init: pretrained encoder as a ``Checkpoint``, a checkpoint path, or a fitted
            ``MultiViewMAE``; ``None`` trains from scratch.
        act_layers: action decoder depth.
        goal_vocab: number of goal ids.
        max_steps: optimizer steps.
        base_lr: LAMB peak learning rate.
        warmup_steps: linear warmup length.
        min_lr: cosine floor.
    """

    def __init__(self, init=None, hidden=64, enc_layers=2, heads=4, patch=8, image_size=64,
                 act_layers=1, goal_vocab=8, strategy="rgb_only", max_steps=100, base_lr=1e-3,
                 warmup_steps=20, min_lr=1e-5, batch_size=3, seed=0):
        self.init = init
        self.hidden = hidden
        self.enc_layers = enc_layers
        self.heads = heads
        self.patch = patch
        self.image_size = image_size
        self.act_layers = act_layers
        self.goal_vocab = goal_vocab
        self.strategy = strategy
        self.max_steps = max_steps
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.min_lr = min_lr
        self.batch_size = batch_size
        self.seed = seed

    def _extra_model_kw(self):
        return {"act_layers": check_positive_int(self.act_layers, "act_layers"),
                "goal_vocab": check_positive_int(self.goal_vocab, "goal_vocab")}

    def _init_checkpoint(self):
        init = self.init
        if init is None or isinstance(init, Checkpoint):
            return init
        if isinstance(init, (str, Path)):
            return load_checkpoint(init)
        if isinstance(init, MultiViewMAE):
            return init.to_checkpoint()
        raise TypeError(f"unsupported init type {type(init).__name__}")

    def _inputs(self, X, cfg):
        scenes, goals, truths = split_episodes(X)
        views = check_views(scenes, cfg.image_size)
        goals = check_goals(goals, cfg.goal_vocab)
        return views, goals, truths

    def fit(self, X, y=None, out_dir=None):
        cfg = self._model_config()
        views, goals, truths = self._inputs(X, cfg)
        if y is None:
            if any(t is None for t in truths):
                raise ValueError("y is required when X holds (scene, goal) pairs")
            y = actions_to_array(truths)
        y = check_actions(y, len(views))
        demos = list(zip(views, goals.tolist(), array_to_actions(y)))
        tcfg = TrainConfig.desk_finetune(
            max_steps=check_positive_int(self.max_steps, "max_steps"),
            base_lr=self.base_lr,
            warmup_steps=self.warmup_steps,
            min_lr=self.min_lr,
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            strategy=self.strategy,
            seed=self.seed,
            epochs=10**6,
        )
        res = finetune(demos, self._init_checkpoint(), cfg, tcfg, out_dir=out_dir)
        self.model_cfg_ = cfg
        self.train_cfg_ = tcfg
        self.params_ = res.params
        self.loss_curve_ = res.losses
        self.n_steps_ = res.step
        return self

    def predict_actions(self, X):
        check_is_fitted(self, "params_")
        views, goals, _ = self._inputs(X, self.model_cfg_)
        return [action_decode(z, int(g), self.params_, self.model_cfg_)
                for z, g in zip(self._latents(views), goals)]

    def predict(self, X):
        """``(n, 8)`` predictions; the last column is the open probability."""
        return actions_to_array(self.predict_actions(X))

    def score(self, X, y=None):
        """Toy-task success rate (position, rotation and open all within threshold)."""
        preds = self.predict_actions(X)
        _, _, truths = split_episodes(X)
        if y is not None:
            truths = array_to_actions(check_actions(y, len(preds)))
        elif any(t is None for t in truths):
            raise ValueError("y is required when X holds (scene, goal) pairs")
        episodes = [(None, None, t) for t in truths]
        return eval_success(None, self.model_cfg_, episodes, predictions=preds).success_rate
