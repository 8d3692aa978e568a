"""Gradient-weighted class activation maps over the final dense block."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import bilinear_resize
from .densenet import Model, model_logits
from .errors import InvalidArgumentError
from .fileio import atomic_write_text, write_ppm

SOURCE_LAYER = "final_block"

# Blue at 0, yellow at 0.5, red at 1; linear in between.
COLORMAP_ANCHORS = np.array([[0.0, 0.0, 255.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]])


@dataclass
class Heatmap:
    values: np.ndarray
    source_layer: str
    class_index: int
    raw_max: float
    probability: float | None = None

    @property
    def is_empty(self) -> bool:
        return self.raw_max <= 0.0


def normalize_cam(activations: np.ndarray, gradients: np.ndarray) -> tuple[np.ndarray, float]:
    """ReLU of the gradient-weighted channel sum, divided by its peak.

    ``activations`` and ``gradients`` are (C, h, w). Returns the normalized map and
    the peak of the weighted sum before rectification; a map whose weighted sum
    never exceeds zero comes back identically zero.
    """
    alpha = gradients.mean(axis=(1, 2))
    raw = np.tensordot(alpha, activations, axes=1)
    raw_max = float(raw.max())
    if raw_max <= 0.0:
        return np.zeros_like(raw), raw_max
    return np.maximum(raw, 0.0) / raw_max, raw_max


def gradcam(model: Model, image: np.ndarray | T.Tensor, class_index: int) -> Heatmap:
    """Heatmap for one (C, H, W) image; gradients come from the pre-sigmoid logit.

    Runs in evaluation mode on a private tape and leaves parameters, their
    gradients and the model's mode untouched.
    """
    if not 0 <= class_index < model.config.num_classes:
        raise IndexError(f"class index {class_index} outside [0, {model.config.num_classes})")
    data = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float64)
    was_training = model.training
    flags = {name: p.requires_grad for name, p in model.params.items()}
    model.eval()
    try:
        for p in model.params.values():
            p.requires_grad = False
        with T.graph_context():
            x = T.Tensor(data[None], requires_grad=True)
            capture: dict = {}
            logits = model_logits(model, x, capture=capture)
            target = logits[0, class_index]
            T.backward(target)
            feats = capture["features"]
            activations, grads = feats.data[0], feats.grad[0]
    finally:
        for name, p in model.params.items():
            p.requires_grad = flags[name]
        model.training = was_training
    values, raw_max = normalize_cam(activations, grads)
    prob = float(1.0 / (1.0 + np.exp(-float(target.data))))
    return Heatmap(values, SOURCE_LAYER, class_index, raw_max, prob)


def upsample_heatmap(heatmap: Heatmap, size: tuple[int, int]) -> Heatmap:
    h, w = heatmap.values.shape
    if size[0] < h or size[1] < w:
        raise InvalidArgumentError(f"cannot upsample a {h}x{w} map to smaller size {size}")
    values = np.clip(bilinear_resize(heatmap.values, size), 0.0, 1.0)
    return Heatmap(values, heatmap.source_layer, heatmap.class_index, heatmap.raw_max,
                   heatmap.probability)


def colormap(v: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB in [0, 255] along blue -> yellow -> red."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(COLORMAP_ANCHORS) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(COLORMAP_ANCHORS) - 2)
    frac = (pos - lo)[..., None]
    return COLORMAP_ANCHORS[lo] * (1.0 - frac) + COLORMAP_ANCHORS[lo + 1] * frac


def render_overlay(image: np.ndarray, values: np.ndarray, blend_alpha: float = 0.5) -> np.ndarray:
    """Blend a greyscale (H, W) image in [0, 255] with the colour-mapped heatmap."""
    if not 0.0 < blend_alpha <= 1.0:
        raise InvalidArgumentError(f"blend_alpha must be in (0, 1], got {blend_alpha}")
    gray = np.asarray(image, dtype=np.float64)
    if gray.shape != values.shape:
        raise InvalidArgumentError(f"heatmap {values.shape} must match image {gray.shape}")
    weight = (blend_alpha * values)[..., None]
    rgb = (1.0 - weight) * gray[..., None] + weight * colormap(values)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_overlay(image: np.ndarray, heatmap: Heatmap, blend_alpha: float,
                  path: str | Path) -> np.ndarray:
    rgb = render_overlay(image, heatmap.values, blend_alpha)
    write_ppm(path, rgb)
    return rgb


def localization_score(values: np.ndarray, region: tuple[int, int, int, int]) -> float:
    """Share of heatmap mass inside ``(top, left, bottom, right)`` (bottom/right exclusive)."""
    values = np.asarray(values, dtype=np.float64)
    top, left, bottom, right = region
    h, w = values.shape
    if bottom <= top or right <= left:
        raise InvalidArgumentError(f"empty region {region}")
    if top < 0 or left < 0 or bottom > h or right > w:
        raise InvalidArgumentError(f"region {region} exceeds map bounds {values.shape}")
    total = values.sum()
    if total <= 0.0:
        return 0.0
    return float(values[top:bottom, left:right].sum() / total)


def sidecar_json(heatmap: Heatmap, class_name: str, image: str,
                 score: float | None = None) -> str:
    payload = {
        "image": image,
        "class": class_name,
        "class_index": heatmap.class_index,
        "probability": heatmap.probability,
        "raw_max": heatmap.raw_max,
        "heatmap_empty": heatmap.is_empty,
        "source_layer": heatmap.source_layer,
    }
    if score is not None:
        payload["localization_score"] = score
    return json.dumps(payload, indent=2)


def write_sidecar(path: str | Path, text: str) -> None:
    atomic_write_text(path, text)

