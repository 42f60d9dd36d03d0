"""Patch tokenization of virtual views and per-view random masking."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .pointcloud import round_half_up
from .renderer import N_CHANNELS

N_VIEWS = 5


class MaskStrategy(str, enum.Enum):
    RGB_ONLY = "rgb_only"
    ALL_CHANNELS = "all_channels"

    @property
    def channels(self) -> tuple:
        return (0, 1, 2) if self is MaskStrategy.RGB_ONLY else tuple(range(N_CHANNELS))


@dataclass
class TokenGrid:
    view_id: int
    patch_size: int
    tokens: np.ndarray
    grid_dims: tuple

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class MaskPlan:
    strategy: MaskStrategy
    ratio: float
    per_view_masks: np.ndarray
    seed: int

    @property
    def n_masked(self) -> np.ndarray:
        return self.per_view_masks.sum(axis=1)


def _check_divisible(W, H, P):
    if P < 1 or W % P or H % P:
        raise ValueError(f"patch size P={P} must divide image size W={W}, H={H}")


def tokenize(img: np.ndarray, P: int, view_id: int = 0) -> TokenGrid:
    """Split an ``(H, W, C)`` view into non-overlapping PxP patches.

    Token ``k`` is patch (k // (W/P), k % (W/P)); each token is the patch's
    pixels in row-major order with channels last.
    """
    H, W, C = img.shape
    _check_divisible(W, H, P)
    gw, gh = W // P, H // P
    t = img.reshape(gh, P, gw, P, C).transpose(0, 2, 1, 3, 4).reshape(gh * gw, P * P * C)
    return TokenGrid(view_id, P, t, (gw, gh))


def tokenize_views(views: np.ndarray, P: int) -> np.ndarray:
    """Tokenize ``(V, H, W, C)`` views into a ``(V, N, P*P*C)`` array."""
    V, H, W, C = views.shape
    _check_divisible(W, H, P)
    gw, gh = W // P, H // P
    return (
        views.reshape(V, gh, P, gw, P, C)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(V, gh * gw, P * P * C)
    )


def detokenize(predictions: np.ndarray, grid_dims, P: int, channel_set=None) -> np.ndarray:
    """Reassemble ``(N, P*P*C')`` patch predictions into an ``(H, W, C')`` image."""
    gw, gh = grid_dims
    n_ch = N_CHANNELS if channel_set is None else len(channel_set)
    predictions = np.asarray(predictions)
    if predictions.shape != (gw * gh, P * P * n_ch):
        raise ValueError(
            f"prediction shape {predictions.shape} does not match grid {grid_dims}, "
            f"P={P}, {n_ch} channels"
        )
    return (
        predictions.reshape(gh, gw, P, P, n_ch)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * P, gw * P, n_ch)
    )


def detokenize_views(tokens: np.ndarray, grid_dims, P: int) -> np.ndarray:
    """Inverse of ``tokenize_views``; channel count inferred from the token width."""
    V, N, D = tokens.shape
    gw, gh = grid_dims
    C = D // (P * P)
    if N != gw * gh or C * P * P != D:
        raise ValueError(f"token shape {tokens.shape} incompatible with grid {grid_dims}, P={P}")
    return (
        tokens.reshape(V, gh, gw, P, P, C).transpose(0, 1, 3, 2, 4, 5).reshape(V, gh * P, gw * P, C)
    )


def token_channel_mask(P: int, channels) -> np.ndarray:
    """Boolean mask over a token's ``P*P*10`` entries selecting ``channels``."""
    sel = np.zeros(N_CHANNELS, dtype=bool)
    sel[list(channels)] = True
    return np.tile(sel, P * P)


def select_channels(tokens: np.ndarray, P: int, channels) -> np.ndarray:
    """Restrict tokens of width ``P*P*10`` to the given channel subset."""
    return tokens[..., token_channel_mask(P, channels)]


def sample_mask(N: int, ratio: float, strategy, seed: int, n_views: int = N_VIEWS) -> MaskPlan:
    """Choose exactly ``round_half_up(ratio * N)`` tokens per view.

    Each view runs a partial Fisher-Yates shuffle on its own PCG64 stream seeded
    with ``seed ^ view_index``.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    strategy = MaskStrategy(strategy)
    k = round_half_up(ratio * N)
    masks = np.zeros((n_views, N), dtype=bool)
    for v in range(n_views):
        rng = np.random.Generator(np.random.PCG64((seed ^ v) & (2**64 - 1)))
        perm = np.arange(N)
        for i in range(k):
            j = int(rng.integers(i, N))
            perm[i], perm[j] = perm[j], perm[i]
        masks[v, perm[:k]] = True
    return MaskPlan(strategy, float(ratio), masks, int(seed))


def apply_mask(tokens: np.ndarray, plan: MaskPlan, P: int):
    """Zero the masked tokens' content according to ``plan.strategy``.

    Args:
        tokens: ``(5, N, P*P*10)`` token array (all views).
        plan: mask plan with ``per_view_masks`` of shape ``(5, N)``.
        P: patch size.

    Returns:
        ``(masked_tokens, mask_flags)``; all N tokens are kept per view.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 3 or tokens.shape[:2] != plan.per_view_masks.shape:
        raise ValueError(
            f"token array {tokens.shape} does not match mask plan {plan.per_view_masks.shape}"
        )
    if tokens.shape[2] != P * P * N_CHANNELS:
        raise ValueError(f"token width {tokens.shape[2]} != P*P*10 for P={P}")
    out = tokens.copy()
    flags = plan.per_view_masks.copy()
    cmask = token_channel_mask(P, MaskStrategy(plan.strategy).channels)
    v_idx, n_idx = np.nonzero(flags)
    sub = out[v_idx, n_idx]
    sub[:, cmask] = 0.0
    out[v_idx, n_idx] = sub
    return out, flags
