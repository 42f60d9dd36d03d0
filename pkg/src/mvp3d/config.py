"""TOML run configuration with ``[model]``, ``[train]``, ``[corpus]`` and ``[eval]``.

Defaults are the desk preset; a top-level ``preset = "paper"`` switches the
model and train defaults to the published hyperparameters. Explicit keys in a
section always win over the preset. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .model import ModelConfig
from .pointcloud import CorpusSpec
from .train import TrainConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_scenes: int = 64
    seed: int = 0
    dir: str | None = None
    episodes: str | None = None
    n_demos: int = 32
    n_val: int = 0
    min_objects: int = 1
    max_objects: int = 4
    half_extent_range: tuple = (0.08, 0.22)
    density: float = 4000.0
    table: bool = True

    def spec(self) -> CorpusSpec:
        return CorpusSpec(
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            half_extent_range=tuple(self.half_extent_range),
            density=self.density,
            table=self.table,
        )


@dataclass
class EvalConfig:
    mask_ratio: float = 0.75
    seed: int = 0
    episodes_per_kind: int = 25
    magnitude: float = 1.0
    kinds: list = field(default_factory=lambda: [
        "object_color", "object_size", "distractor_count", "table_color", "light_tint",
        "point_noise",
    ])


@dataclass
class RunConfig:
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk_pretrain)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {"preset": self.preset, "model": self.model.to_dict(),
               "train": self.train.to_dict(), "corpus": asdict(self.corpus),
               "eval": asdict(self.eval)}
        return _drop_none(out)


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, tuple):
        return list(d)
    return d


def _check_keys(section, data, cls):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")


def build_config(data: dict, mode: str = "pretrain", seed: int | None = None) -> RunConfig:
    """Resolve a parsed TOML document into a ``RunConfig`` for ``mode``."""
    top = set(data) - {"preset", "model", "train", "corpus", "eval"}
    if top:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(top))}")
    preset = data.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    sections = {k: dict(data.get(k, {})) for k in ("model", "train", "corpus", "eval")}
    _check_keys("model", sections["model"], ModelConfig)
    _check_keys("train", sections["train"], TrainConfig)
    _check_keys("corpus", sections["corpus"], CorpusConfig)
    _check_keys("eval", sections["eval"], EvalConfig)

    mode = sections["train"].pop("mode", mode)
    if seed is not None:
        for name in ("model", "train", "corpus", "eval"):
            sections[name]["seed"] = seed
    model_factory = ModelConfig.paper if preset == "paper" else ModelConfig.desk
    train_factory = {
        ("paper", "pretrain"): TrainConfig.paper_pretrain,
        ("paper", "finetune"): TrainConfig.paper_finetune,
        ("desk", "pretrain"): TrainConfig.desk_pretrain,
        ("desk", "finetune"): TrainConfig.desk_finetune,
    }.get((preset, mode))
    if train_factory is None:
        raise ConfigError(f"unknown train mode {mode!r}")
    if "strategy" in sections["train"] and "strategy" not in sections["model"]:
        sections["model"]["strategy"] = sections["train"]["strategy"]
    if "strategy" in sections["model"] and "strategy" not in sections["train"]:
        sections["train"]["strategy"] = sections["model"]["strategy"]
    try:
        return RunConfig(
            preset=preset,
            model=model_factory(**sections["model"]),
            train=train_factory(**sections["train"]),
            corpus=CorpusConfig(**sections["corpus"]),
            eval=EvalConfig(**sections["eval"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, mode: str = "pretrain", seed: int | None = None) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(data, mode, seed)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved.toml"
    path.write_text(tomli_w.dumps(cfg.to_dict()))
    return path
