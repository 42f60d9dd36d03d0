"""Input validation for the estimator wrappers."""

from __future__ import annotations

import numbers

import numpy as np

from .model import ToyAction
from .pointcloud import PointCloud
from .renderer import N_CHANNELS, render_all

N_VIEWS = 5


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_ratio(value, name: str = "mask_ratio") -> float:
    if not isinstance(value, numbers.Real) or not 0.0 <= value < 1.0:
        raise ValueError(f"{name} must be in [0, 1), got {value!r}")
    return float(value)


def _scene_views(item, size):
    if isinstance(item, PointCloud):
        return render_all(item, size, size)
    if hasattr(item, "cloud"):
        return render_all(item.cloud, size, size)
    return np.asarray(item, dtype=np.float64)


def check_views(X, image_size: int) -> np.ndarray:
    """Coerce scenes into a ``(n, 5, H, W, 10)`` float array.

    Args:
        X: a sequence of point clouds, episodes or pre-rendered view stacks, or an
            array that already has the stacked shape.
        image_size: expected ``H == W``; clouds are rendered at this size.

    Raises:
        ValueError: on an empty input, a wrong shape or non-finite values.
    """
    if isinstance(X, np.ndarray) and X.ndim == 5:
        views = X.astype(np.float64, copy=False)
    else:
        items = list(X)
        if not items:
            raise ValueError("expected at least one scene, got 0")
        views = np.stack([_scene_views(it, image_size) for it in items])
    expected = (N_VIEWS, image_size, image_size, N_CHANNELS)
    if views.ndim != 5 or views.shape[1:] != expected:
        raise ValueError(f"views must have shape (n, {', '.join(map(str, expected))}), "
                         f"got {views.shape}")
    if len(views) == 0:
        raise ValueError("expected at least one scene, got 0")
    if not np.all(np.isfinite(views)):
        raise ValueError("views contain NaN or Inf")
    return views


def split_episodes(X):
    """Split episodes or ``(scene, goal)`` pairs into scenes, goals and truths.

    Truths are ``None`` for plain pairs.
    """
    scenes, goals, truths = [], [], []
    for item in X:
        if hasattr(item, "goal"):
            scenes.append(item.cloud)
            goals.append(item.goal)
            truths.append(item.action)
        else:
            scene, goal = item[0], item[1]
            scenes.append(scene)
            goals.append(goal)
            truths.append(item[2] if len(item) > 2 else None)
    if not scenes:
        raise ValueError("expected at least one episode, got 0")
    return scenes, goals, truths


def check_goals(goals, vocab: int) -> np.ndarray:
    g = np.asarray(goals)
    if g.ndim != 1 or not np.issubdtype(g.dtype, np.integer):
        raise ValueError("goals must be a 1-d sequence of integer ids")
    if g.size and (g.min() < 0 or g.max() >= vocab):
        raise ValueError(f"goal ids must lie in [0, {vocab}), got range [{g.min()}, {g.max()}]")
    return g.astype(np.int64)


def check_actions(y, n: int) -> np.ndarray:
    """Validate an ``(n, 8)`` action matrix: position, unit quaternion, open flag."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n, 8):
        raise ValueError(f"y must have shape ({n}, 8), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains NaN or Inf")
    norms = np.linalg.norm(y[:, 3:7], axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("y[:, 3:7] must be unit quaternions")
    if not np.all(np.isin(y[:, 7], (0.0, 1.0))):
        raise ValueError("y[:, 7] must be 0 or 1")
    return y


def actions_to_array(actions) -> np.ndarray:
    return np.stack([a.as_vector() for a in actions]) if actions else np.zeros((0, 8))


def array_to_actions(y) -> list[ToyAction]:
    return [ToyAction(row[:3].copy(), row[3:7].copy(), float(row[7])) for row in np.asarray(y)]
