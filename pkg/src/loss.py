"""
Frequency-weighted cross-entropy for class-imbalanced voxel classification
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from errors import EmptyHistogram, ShapeMismatch

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray
    source_histogram: np.ndarray

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.w, dtype=dtype)


def label_histogram(label_arrays: Iterable[np.ndarray], num_classes: int) -> np.ndarray:
    hist = np.zeros(num_classes, dtype=np.int64)
    for labels in label_arrays:
        hist += np.bincount(np.asarray(labels).ravel(), minlength=num_classes)[:num_classes]
    return hist


def compute_class_weights(hist: Sequence[int]) -> ClassWeights:
    """w_c = N / (C' * N_c) over present classes; absent classes get 0"""
    hist = np.asarray(hist, dtype=np.int64)
    total = int(hist.sum())
    if total <= 0:
        raise EmptyHistogram("Label histogram is empty; cannot derive class weights")
    present = hist > 0
    w = np.zeros(hist.shape, dtype=np.float64)
    w[present] = total / (present.sum() * hist[present])
    logger.debug("Class weights %s from histogram %s", np.round(w, 4).tolist(), hist.tolist())
    return ClassWeights(w=w, source_histogram=hist)


def weighted_cross_entropy(probs: torch.Tensor, labels: torch.Tensor, cw: ClassWeights) -> torch.Tensor:
    """
    Mean over every voxel of w[y] * -log(P_y).

    probs: N x C x D x H x W (or C x D x H x W), labels: the same without the class axis.
    """
    if probs.dim() == labels.dim():
        raise ShapeMismatch(f"Probabilities {tuple(probs.shape)} need a class axis beyond labels {tuple(labels.shape)}")
    class_axis = 1 if probs.dim() == 5 else 0
    spatial = probs.shape[:class_axis] + probs.shape[class_axis + 1:]
    if tuple(spatial) != tuple(labels.shape):
        raise ShapeMismatch(f"Probabilities {tuple(probs.shape)} do not match labels {tuple(labels.shape)}")
    if len(cw.w) != probs.shape[class_axis]:
        raise ShapeMismatch(f"{len(cw.w)} class weights for {probs.shape[class_axis]} classes")

    index = labels.long().unsqueeze(class_axis)
    p_true = torch.gather(probs, class_axis, index).squeeze(class_axis)
    weights = cw.as_tensor(probs.dtype).to(probs.device)[labels.long()]
    return (weights * -torch.log(p_true.clamp_min(LOG_CLAMP))).mean()
