"""Row orthogonalization by Newton's iteration.

The trained parameter is an unconstrained proxy ``Z`` (n x d, n <= d).  Each
forward pass maps it to ``W = (Z Z^T)^{-1/2} Z`` approximately:

    V = Z / ||Z||_F,  S = V V^T,  B_0 = I,
    B_{t+1} = 1.5 B_t - 0.5 B_t^3 S,   W = B_T V.

Frobenius pre-scaling keeps the spectrum of ``S`` inside (0, 1], where the
iteration converges to ``S^{-1/2}``.  The whole map is built from tensor ops,
so gradients reach ``Z`` through ordinary reverse-mode differentiation.

The recurrence is evaluated in coupled form, carrying ``Y_t = S B_t``
alongside ``B_t``: with ``P_t = (3I - B_t Y_t) / 2`` the updates are
``B_{t+1} = P_t B_t`` and ``Y_{t+1} = Y_t P_t``.  This equals the recurrence
above in exact arithmetic, but the uncoupled form amplifies round-off once it
has converged (the residual climbs back up after ~10 steps), while the coupled
one stays at the floating-point floor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass
class OniConfig:
    iterations: int = 12
    applies_to: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"ONI needs at least one iteration, got {self.iterations}")


def _check_shape(n: int, d: int) -> None:
    if n > d:
        raise ValueError(f"cannot row-orthogonalize a {n}x{d} matrix (rows > cols)")


def orthogonalize(z, iterations: int = 12) -> Tensor:
    """Differentiable Newton-iteration row orthogonalization of a 2-D tensor."""
    z = T.as_tensor(z)
    if z.ndim != 2:
        raise ValueError(f"orthogonalize expects a matrix, got shape {z.shape}")
    n, d = z.shape
    _check_shape(n, d)
    norm_sq = float((z.data.astype(np.float64) ** 2).sum())
    if norm_sq == 0.0:
        raise ValueError("cannot orthogonalize a zero matrix")
    v = z / T.sqrt(T.sum_(z * z))
    s = v @ v.T
    eye = np.eye(n, dtype=z.dtype)
    b, y = T.as_tensor(eye), s
    for _ in range(iterations):
        p = 0.5 * (3.0 * eye - b @ y)
        b, y = p @ b, y @ p
    return b @ v


def convergence_residuals(z: np.ndarray, iterations: int) -> list[float]:
    """``||B_t B_t^T S - I||_F`` for t = 0..iterations, in float64."""
    z = np.asarray(z, dtype=np.float64)
    _check_shape(*z.shape)
    v = z / np.linalg.norm(z)
    s = v @ v.T
    eye = np.eye(len(z))
    b, y = eye, s
    out = [float(np.linalg.norm(b @ b.T @ s - eye))]
    for _ in range(iterations):
        p = 0.5 * (3.0 * eye - b @ y)
        b, y = p @ b, y @ p
        out.append(float(np.linalg.norm(b @ b.T @ s - eye)))
    return out


def check_orthogonalizable(param: Parameter) -> None:
    """Construction-time check that a flagged conv weight has O <= C*kh*kw."""
    o = param.shape[0]
    d = int(np.prod(param.shape[1:]))
    if o > d:
        raise ValueError(
            f"cannot row-orthogonalize {param.name}: {o} output rows > {d} input columns")


def effective_weight(param: Tensor, cfg: OniConfig | int) -> Tensor:
    """The weight actually used in the forward pass.

    Flagged parameters are flattened to (O, C*kh*kw), orthogonalized, and
    reshaped back; everything else passes through untouched.
    """
    if not getattr(param, "requires_orthogonalization", False):
        return param
    iterations = cfg.iterations if isinstance(cfg, OniConfig) else int(cfg)
    flat = param.reshape(param.shape[0], -1)
    return orthogonalize(flat, iterations).reshape(param.shape)
