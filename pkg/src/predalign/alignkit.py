"""Adversarial feature/prediction alignment and class weight normalisation.

Domain labels: source = 1, target = 0. Discriminator-side losses see the
detector outputs detached; extractor/detector-side losses see the
discriminator parameters frozen. Both routes are exposed separately so the
training loop only builds the graph it needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor


def extract_units(feature_map: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 neighbourhood of every cell: ``[C, H, W] -> [H*W, C, 3, 3]``."""
    fm = np.asarray(feature_map)
    c, h, w = fm.shape
    padded = np.pad(fm, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))  # [C, H, W, 3, 3]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4).reshape(h * w, c, 3, 3))


class FeatureDiscriminator(nk.Module):
    """Per-cell domain probability; the first 3x3 conv sees exactly one feature unit."""

    def __init__(self, in_channels: int, hidden: int = 32, seed: int = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        for name, (ci, co, k) in {"conv0": (in_channels, hidden, 3), "conv1": (hidden, hidden, 1),
                                  "conv2": (hidden, 1, 1)}.items():
            self._param(f"{name}.weight", nk.glorot_uniform((co, ci, k, k), ci * k * k, co * k * k, rng, dtype))
            self._param(f"{name}.bias", Tensor(np.zeros(co, dtype=dtype), requires_grad=True))

    def __call__(self, feat: Tensor, frozen: bool = False) -> Tensor:
        p = lambda n: self._p(n, frozen)
        x = nk.relu(nk.conv2d(feat, p("conv0.weight"), p("conv0.bias"), padding=1))
        x = nk.relu(nk.conv2d(x, p("conv1.weight"), p("conv1.bias")))
        x = nk.conv2d(x, p("conv2.weight"), p("conv2.bias"))
        return nk.sigmoid(x.reshape(-1))


class PredictionDiscriminator(nk.Module):
    """Per-vector domain probability from a 3-layer perceptron."""

    def __init__(self, in_dim: int = 6, hidden: int = 32, seed: int = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        for name, (ci, co) in {"fc0": (in_dim, hidden), "fc1": (hidden, hidden), "fc2": (hidden, 1)}.items():
            self._param(f"{name}.weight", nk.glorot_uniform((ci, co), ci, co, rng, dtype))
            self._param(f"{name}.bias", Tensor(np.zeros(co, dtype=dtype), requires_grad=True))

    def __call__(self, vectors: Tensor, frozen: bool = False) -> Tensor:
        p = lambda n: self._p(n, frozen)
        x = vectors.reshape(-1, vectors.shape[-1])
        x = nk.relu(nk.dense(x, p("fc0.weight"), p("fc0.bias")))
        x = nk.relu(nk.dense(x, p("fc1.weight"), p("fc1.bias")))
        return nk.sigmoid(nk.dense(x, p("fc2.weight"), p("fc2.bias")).reshape(-1))


def _detached(x: Tensor) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


def discriminator_loss(disc, source: Tensor, target: Tensor,
                       source_weights=None, target_weights=None) -> Tensor:
    """``-mean_src[w log D] - mean_tgt[w log(1 - D)]`` with inputs detached."""
    ps = disc(_detached(source))
    pt = disc(_detached(target))
    return nk.bce(ps, 1.0, source_weights) + nk.bce(pt, 0.0, target_weights)


def generator_loss(disc, target: Tensor, target_weights=None) -> Tensor:
    """``-mean_tgt[w log D]`` with the discriminator frozen (inverted labels)."""
    return nk.bce(disc(target, frozen=True), 1.0, target_weights)


def feature_alignment_losses(source_map: Tensor, target_map: Tensor, d_f: FeatureDiscriminator):
    """``(L_feat_dis, L_feat_ext)`` over every 3x3 feature unit of both batches."""
    return discriminator_loss(d_f, source_map, target_map), generator_loss(d_f, target_map)


def build_prediction_vectors(offsets: Tensor, logits: Tensor, apply_softmax: bool = True) -> Tensor:
    """Concatenate raw offsets with (softmaxed) confidences: ``[..., 4 + C]``."""
    conf = nk.softmax(logits) if apply_softmax else logits
    return nk.concat([offsets, conf], axis=-1)


def prediction_alignment_losses(source_vectors: Tensor, target_vectors: Tensor, d_p: PredictionDiscriminator):
    """``(L_pred_dis, L_pred_det)``; the second back-propagates into detector and extractor only."""
    return discriminator_loss(d_p, source_vectors, target_vectors), generator_loss(d_p, target_vectors)


def compute_class_weights(confidences: np.ndarray, a, num_classes: int | None = None) -> np.ndarray:
    """Per-class weights ``b_c = a_c N / (n_c C)`` from argmax counts; 0 for absent classes."""
    conf = np.asarray(confidences).reshape(-1, np.shape(confidences)[-1])
    c = num_classes or conf.shape[1]
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (c,) or np.any(a <= 0):
        raise ValueError(f"need {c} positive class hyperparameters, got {a}")
    n_total = conf.shape[0]
    if n_total < 1:
        raise ValueError("class weights need at least one prediction")
    counts = np.bincount(conf.argmax(axis=1), minlength=c)
    return np.where(counts > 0, a * n_total / (np.maximum(counts, 1) * c), 0.0)


def allocate_weights(class_weights: np.ndarray, confidences: np.ndarray) -> np.ndarray:
    conf = np.asarray(confidences).reshape(-1, np.shape(confidences)[-1])
    return np.asarray(class_weights)[conf.argmax(axis=1)]


@dataclass
class ClassWeights:
    a: np.ndarray
    counts: np.ndarray
    total: int
    class_weights: np.ndarray
    weights: np.ndarray


def class_weight_normalization(confidences, a) -> ClassWeights:
    """Counts, per-class and per-prediction weights for one batch of predictions."""
    conf = np.asarray(confidences.data if isinstance(confidences, Tensor) else confidences)
    conf = conf.reshape(-1, conf.shape[-1])
    b = compute_class_weights(conf, a)
    return ClassWeights(np.asarray(a, dtype=np.float64), np.bincount(conf.argmax(axis=1), minlength=conf.shape[1]),
                        conf.shape[0], b, allocate_weights(b, conf))


def weighted_alignment_losses(source_vectors: Tensor, target_vectors: Tensor, d_p: PredictionDiscriminator,
                              target_weights, source_weights=None):
    """``(WL_pred_dis, WL_pred_det)``; each log term scaled by its weight before averaging.

    With ``source_weights`` omitted the source half of the discriminator loss
    is unweighted.
    """
    n_t = int(np.prod(target_vectors.shape[:-1]))
    target_weights = np.asarray(target_weights).reshape(-1)
    if target_weights.shape[0] != n_t:
        raise ValueError(f"{target_weights.shape[0]} target weights for {n_t} vectors")
    if source_weights is not None:
        source_weights = np.asarray(source_weights).reshape(-1)
        n_s = int(np.prod(source_vectors.shape[:-1]))
        if source_weights.shape[0] != n_s:
            raise ValueError(f"{source_weights.shape[0]} source weights for {n_s} vectors")
    return (discriminator_loss(d_p, source_vectors, target_vectors, source_weights, target_weights),
            generator_loss(d_p, target_vectors, target_weights))
