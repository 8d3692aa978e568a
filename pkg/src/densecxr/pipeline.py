"""Glue between manifests on disk and the model: loading, training, scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Manifest, NormalizationStats, apply_stats, compute_stats, load_images
from .densenet import Model, ModelConfig, build_model, model_forward
from .loss import ClassWeights, compute_frequencies, compute_weights
from .optim import TrainConfig, TrainResult, fit


def subset_manifest(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Seeded random subset of ``ceil(fraction * N)`` records, in manifest order."""
    if fraction >= 1.0:
        return manifest
    n = max(1, math.ceil(fraction * len(manifest)))
    keep = np.sort(np.random.default_rng(seed).choice(len(manifest), size=n, replace=False))
    return manifest.with_records([manifest.records[i] for i in keep])


@dataclass
class TrainedModel:
    model: Model
    stats: NormalizationStats
    weights: ClassWeights
    result: TrainResult
    labels: np.ndarray


def train_from_manifest(manifest: Manifest, model_config: ModelConfig, train_config: TrainConfig,
                        model_seed: int, on_epoch=None) -> TrainedModel:
    """Fit a model on the (training) manifest.

    Class weights and normalization statistics come from this manifest only.
    With ``train_config.weighted_loss`` off the weights are still computed and
    returned for reporting, but the plain loss is optimized.
    """
    images = load_images(manifest, model_config.input_size, model_config.input_channels == 3)
    labels = manifest.label_matrix()
    stats = compute_stats(images)
    images = apply_stats(images, stats)
    weights = compute_weights(compute_frequencies(labels))
    model = build_model(model_config, seed=model_seed)
    result = fit(model, images, labels, weights if train_config.weighted_loss else None,
                 train_config, on_epoch=on_epoch)
    model.eval()
    return TrainedModel(model, stats, weights, result, labels)


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode probabilities for normalized (N, C, H, W) images."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(model_forward(model, T.Tensor(images[i:i + batch_size])).data)
    finally:
        model.training = was_training
    if not out:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(out)


def score_manifest(model: Model, manifest: Manifest, stats: NormalizationStats) -> np.ndarray:
    cfg = model.config
    images = load_images(manifest, cfg.input_size, cfg.input_channels == 3)
    return predict(model, apply_stats(images, stats))
