"""Task-centric adversarial obfuscation for privacy-preserving vision.

A lightweight encoder-decoder obfuscator is trained so that a frozen detector
still works on its output while a co-trained deobfuscator fails to recover
the input. Blur baselines and an evaluation harness sit alongside it.
"""

__version__ = "0.1.0"

from .core import BBox, Annotation, Dataset, Frame, KeypointSet, iou, oks  # noqa: E402
from .metrics import TradeoffPoint, map50, map_by_size, oks_map50, psnr, ssim  # noqa: E402
from .obfuscator import ArchConfig, init_obfuscator, obfuscate  # noqa: E402
from .synthdata import SceneSpec, generate_dataset, generate_scene, person_crops  # noqa: E402
from .trainer import AttackConfig, TrainConfig, adversarial_train, attack_evaluate  # noqa: E402
from .utility import UtilityConfig, predict, task_loss, train_toy_detector, train_toy_pose  # noqa: E402

__all__ = [
    "Annotation",
    "ArchConfig",
    "AttackConfig",
    "BBox",
    "Dataset",
    "Frame",
    "KeypointSet",
    "SceneSpec",
    "TradeoffPoint",
    "TrainConfig",
    "UtilityConfig",
    "adversarial_train",
    "attack_evaluate",
    "generate_dataset",
    "generate_scene",
    "init_obfuscator",
    "iou",
    "map50",
    "map_by_size",
    "obfuscate",
    "oks",
    "oks_map50",
    "person_crops",
    "predict",
    "psnr",
    "ssim",
    "task_loss",
    "train_toy_detector",
    "train_toy_pose",
]
