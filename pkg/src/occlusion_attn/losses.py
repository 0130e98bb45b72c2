"""Recognition and mask-usage objectives."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

COS_EPS = 1e-7


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the target logit."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    onehot = _one_hot(labels, logits.shape[1], logits.dtype)
    if onehot.shape[0] != logits.shape[0]:
        raise ValueError(f"{onehot.shape[0]} labels for {logits.shape[0]} rows")
    picked = T.sum_(T.log_softmax(logits, axis=1) * onehot, axis=1)
    return -T.mean(picked)


class ArcfaceHead:
    """Classifier weights ``W`` (C_emb x N_c) with scale ``s`` and margin ``m``."""

    def __init__(self, weight: Parameter, scale: float = 64.0, margin: float = 0.5):
        if scale <= 0:
            raise ValueError(f"arcface scale must be positive, got {scale}")
        if not 0 <= margin < np.pi:
            raise ValueError(f"arcface margin must lie in [0, pi), got {margin}")
        self.weight = weight
        self.scale = scale
        self.margin = margin

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]


def cosine_logits(z, weight) -> Tensor:
    """cos(theta_j) between every embedding row and every weight column."""
    z, weight = T.as_tensor(z), T.as_tensor(weight)
    zn2 = (z.data.astype(np.float64) ** 2).sum(axis=1)
    wn2 = (weight.data.astype(np.float64) ** 2).sum(axis=0)
    if (zn2 == 0).any():
        raise ValueError(f"zero-norm embedding at rows {np.flatnonzero(zn2 == 0).tolist()}")
    if (wn2 == 0).any():
        raise ValueError(f"zero-norm arcface weight columns {np.flatnonzero(wn2 == 0).tolist()}")
    zn = z / T.sqrt(T.sum_(z * z, axis=1, keepdims=True))
    wn = weight / T.sqrt(T.sum_(weight * weight, axis=0, keepdims=True))
    return zn @ wn


def arcface_logits(z, head: ArcfaceHead, labels) -> Tensor:
    """s*cos(theta_y + m) on the target column, s*cos(theta_j) elsewhere.

    The margin is added literally, with no fallback when theta_y + m > pi.
    """
    cos = cosine_logits(z, head.weight)
    onehot = _one_hot(labels, head.n_classes, cos.dtype)
    theta = T.arccos(T.clip(cos, -1.0 + COS_EPS, 1.0 - COS_EPS))
    return head.scale * T.cos(theta + head.margin * onehot)


def arcface_loss(z, head: ArcfaceHead, labels) -> Tensor:
    z = T.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != head.weight.shape[0]:
        raise ValueError(f"embeddings {z.shape} do not match arcface weight {head.weight.shape}")
    return cross_entropy(arcface_logits(z, head, labels), labels)


grad_reverse = T.grad_reverse
