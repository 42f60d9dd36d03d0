"""Multi-view masked-autoencoder pretraining for 3D manipulation on point clouds."""

from .estimators import MultiViewMAE, MultiViewPolicy
from .model import ModelConfig, ToyAction
from .pointcloud import CorpusSpec, PointCloud, gen_scene, load_ply, save_ply
from .renderer import render_all, render_view, standard_cameras
from .train import TrainConfig, finetune, lr_schedule, pretrain

__version__ = "0.1.0"

__all__ = [
    "CorpusSpec",
    "ModelConfig",
    "MultiViewMAE",
    "MultiViewPolicy",
    "PointCloud",
    "ToyAction",
    "TrainConfig",
    "finetune",
    "gen_scene",
    "load_ply",
    "lr_schedule",
    "pretrain",
    "render_all",
    "render_view",
    "save_ply",
    "standard_cameras",
]
