"""Toy reach-and-grasp task: goal = color of the target box, action = top grasp.

The ground-truth action is a pure function of the scene metadata:

* position: center of the target's top face;
* rotation: gripper pointing down, yawed to close across the box's shorter
  horizontal side;
* open: 1 for tall boxes (height above ``TALL_THRESHOLD``), else 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ToyAction
from .pointcloud import (
    DEFAULT_PALETTE,
    CorpusSpec,
    PointCloud,
    SceneMeta,
    gen_scene,
    load_scene,
    save_scene,
)

TALL_THRESHOLD = 0.15


@dataclass
class Episode:
    cloud: PointCloud
    meta: SceneMeta
    goal: int
    action: ToyAction


def goal_id(meta: SceneMeta, palette=None) -> int:
    names = list(palette or DEFAULT_PALETTE)
    return names.index(meta.target.color_name)


def toy_action(meta: SceneMeta) -> ToyAction:
    obj = meta.target
    c = np.asarray(obj.center, dtype=np.float64)
    h = np.asarray(obj.half_extents, dtype=np.float64)
    yaw = 0.0 if h[0] <= h[1] else np.pi / 2
    # yaw about z composed with a half-turn about x (fingers pointing down)
    q = np.array([0.0, np.cos(yaw / 2), np.sin(yaw / 2), 0.0])
    return ToyAction(
        a_pos=c + np.array([0.0, 0.0, h[2]]),
        a_rot=q,
        a_open=1.0 if 2 * h[2] > TALL_THRESHOLD else 0.0,
    )


def make_episode(seed: int, spec: CorpusSpec | None = None) -> Episode:
    spec = spec or CorpusSpec()
    cloud, meta = gen_scene(seed, spec)
    return Episode(cloud, meta, goal_id(meta, spec.palette), toy_action(meta))


def make_episodes(n: int, seed: int, spec: CorpusSpec | None = None) -> list[Episode]:
    return [make_episode(seed + i, spec) for i in range(n)]


def episode_record(ep: Episode, scene_path) -> dict:
    return {
        "scene": str(scene_path),
        "goal": int(ep.goal),
        "a_pos": [float(v) for v in ep.action.a_pos],
        "a_rot": [float(v) for v in ep.action.a_rot],
        "a_open": int(round(ep.action.a_open)),
    }


def write_episodes(directory, episodes, manifest="episodes.jsonl") -> Path:
    """Cache scenes as PLY + JSON and write the JSONL episode manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for ep in episodes:
        ply = save_scene(directory, ep.cloud, ep.meta)
        lines.append(json.dumps(episode_record(ep, ply.name)))
    out = directory / manifest
    out.write_text("\n".join(lines) + ("\n" if lines else ""))
    return out


def read_episodes(path) -> list[Episode]:
    """Load a JSONL manifest (or a directory holding ``episodes.jsonl``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "episodes.jsonl"
    episodes = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = {"scene", "goal", "a_pos", "a_rot", "a_open"} - set(rec)
        if missing:
            raise ValueError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        scene = Path(rec["scene"])
        if not scene.is_absolute():
            scene = path.parent / scene
        cloud, meta = load_scene(scene)
        action = ToyAction(
            a_pos=np.asarray(rec["a_pos"], dtype=np.float64),
            a_rot=np.asarray(rec["a_rot"], dtype=np.float64),
            a_open=float(rec["a_open"]),
        )
        episodes.append(Episode(cloud, meta, int(rec["goal"]), action))
    return episodes
