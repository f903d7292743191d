"""Unsupervised domain adaptation with an adaptive cross-domain triplet loss,
trainable Top-k pseudo-label selection and reinforced region attention."""

from .config import TrainConfig
from .train import run_experiment

__all__ = ["TrainConfig", "run_experiment"]
