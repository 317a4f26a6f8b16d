"""Gradient-weighted class activation maps over spectral patch tokens.

Patch tokens play the role of spatial positions and embedding channels the
role of feature maps: channel weights are the token-averaged gradients of
the target class score at the deepest token matrix that still feeds the
class token (the final encoder block's input), and token relevance is the
rectified channel-weighted activation, expanded piecewise-constant to
wavelength resolution and max-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Spectrum, normalize_minmax
from .model import ConfigError, SmaeModel, encoder_forward_with_tap
from .patching import empty_plan


@dataclass(frozen=True)
class RelevanceMap:
    """Per-wavelength relevance in [0, 1] for one target class."""

    values: np.ndarray
    target_class: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", arr)
        if arr.ndim != 1:
            raise ValueError(f"relevance must be a 1D vector, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("relevance values must lie in [0, 1]")
        peak = arr.max() if arr.size else 0.0
        if peak != 0.0 and peak != 1.0:
            raise ValueError("a non-zero relevance map must peak at exactly 1")


def grad_cam(model: SmaeModel, spectrum, target_class: int, normalize: bool = True) -> RelevanceMap:
    """Relevance of each wavelength for one class of a fine-tuned model."""
    cfg = model.config
    if cfg.n_classes is None:
        raise ConfigError("grad_cam needs a model with a classification head")
    if not 0 <= target_class < cfg.n_classes:
        raise ValueError(f"target class {target_class} out of range for {cfg.n_classes} classes")
    x = np.asarray(spectrum, dtype=np.float64)
    if normalize:
        x = normalize_minmax(Spectrum(x)).intensities
    plan = empty_plan(cfg.n_patches)

    onehot = np.zeros((1, cfg.n_classes))
    onehot[0, target_class] = 1.0
    with Tape() as tape:
        latents, tap = encoder_forward_with_tap(model, x[None, :], [plan])
        cls_latent = ad.reshape(ad.take_rows(latents, np.array([0], dtype=np.intp)), (1, cfg.embed_dim))
        scores = ad.add(ad.matmul(cls_latent, model.params["cls_head.weight"]), model.params["cls_head.bias"])
        score = ad.sum(ad.mul(scores, Tensor(onehot)))
        (tap_grad,) = tape.gradients(score, [tap])

    activations = tap.data[0, 1:, :]  # patch tokens only
    gradients = tap_grad[0, 1:, :]
    channel_weights = gradients.mean(axis=0)
    token_relevance = np.maximum(0.0, activations @ channel_weights)
    relevance = np.repeat(token_relevance, cfg.patch_size)
    peak = relevance.max()
    if peak > 0.0:
        relevance = relevance / peak  # the peak itself lands on exactly 1.0
    return RelevanceMap(relevance, target_class)


def average_maps(maps: list[RelevanceMap]) -> RelevanceMap:
    """Mean of same-class maps, re-normalized to peak at 1."""
    if not maps:
        raise ValueError("no maps to average")
    target = maps[0].target_class
    if any(m.target_class != target for m in maps):
        raise ValueError("maps target different classes")
    stacked = np.stack([m.values for m in maps]).mean(axis=0)
    peak = stacked.max()
    if peak > 0.0:
        stacked = stacked / peak
    return RelevanceMap(stacked, target)
