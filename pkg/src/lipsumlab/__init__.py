"""Robust fine-tuning of contrastive dual encoders on a synthetic distribution-shift benchmark."""

from .data import BenchmarkSpec, make_benchmark
from .finetune import FinetuneConfig, Method, TrainedModel
from .model import ParamSet
from .pretrain import PretrainConfig, contrastive_pretrain

__all__ = [
    "BenchmarkSpec",
    "FinetuneConfig",
    "Method",
    "ParamSet",
    "PretrainConfig",
    "TrainedModel",
    "contrastive_pretrain",
    "make_benchmark",
]

__version__ = "0.1.0"
