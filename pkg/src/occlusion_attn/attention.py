"""CBAM, complementary attention splitting, and multi-focal spatial attention.

All feature maps are batched (N, C, H, W); attention maps are (N, 1, H, W)
and broadcast across channels when applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .oni import OniConfig, effective_weight
from .tensor import Tensor

N_FOCAL = 3


@dataclass
class AttentionOutputs:
    """Attention maps and the features they produce.

    ``a_bg``/``x_bg`` are None for the two-way (sigmoid) split.  ``x_c`` and
    ``a_c`` are the channel-stage outputs when a CBAM channel stage ran.
    """

    a_um: Tensor
    a_m: Tensor
    z_s: Tensor
    x_um: Tensor
    x_m: Tensor
    a_bg: Tensor | None = None
    x_bg: Tensor | None = None
    x_c: Tensor | None = None
    a_c: Tensor | None = None

    def maps(self) -> dict[str, np.ndarray]:
        out = {"a_um": self.a_um.data, "a_m": self.a_m.data}
        if self.a_bg is not None:
            out["a_bg"] = self.a_bg.data
        return out


class CbamParams(Module):
    """Shared channel MLP (C -> C/r -> C) and a k x k spatial conv over [max; avg]."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator, reduction: int = 4,
                 kernel: int = 7, spatial_out: int = 1):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.name = name
        self.channels = channels
        self.mlp_in = Linear(f"{name}.mlp.0", channels, hidden, rng)
        self.mlp_out = Linear(f"{name}.mlp.1", hidden, channels, rng)
        self.spatial_conv = Conv2d(f"{name}.spatial", 2, spatial_out, kernel, rng)

    def mlp(self, v: Tensor) -> Tensor:
        return self.mlp_out(T.relu(self.mlp_in(v)))


class MfsaParams(Module):
    """f(.): pointwise conv C -> C/r, batch norm, ReLU, pointwise conv C/r -> 3.

    Both conv weights are ONI proxies.
    """

    def __init__(self, name: str, channels: int, rng: np.random.Generator, reduction: int = 4,
                 oni: OniConfig | None = None, n_focal: int = N_FOCAL):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.name = name
        self.channels = channels
        self.oni = oni or OniConfig()
        self.layer1 = Conv2d(f"{name}.f.0", channels, hidden, 1, rng, bias=False,
                             orthogonalize=True, oni=self.oni)
        self.bn = BatchNorm2d(f"{name}.f.bn", hidden)
        self.layer2 = Conv2d(f"{name}.f.1", hidden, n_focal, 1, rng,
                             orthogonalize=True, oni=self.oni)
        if n_focal != N_FOCAL:
            raise ValueError(f"MFSA needs exactly {N_FOCAL} focal maps, got {n_focal}")

    def f(self, x, oni: OniConfig | None = None) -> Tensor:
        oni = oni or self.oni
        h = T.conv2d(x, effective_weight(self.layer1.weight, oni))
        h = T.relu(self.bn(h))
        return T.conv2d(h, effective_weight(self.layer2.weight, oni), self.layer2.bias)


def _check_channels(x: Tensor, expected: int) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise ValueError(f"expected (N, {expected}, H, W) features, got {x.shape}")


def cbam_channel_stage(x, p: CbamParams) -> tuple[Tensor, Tensor]:
    """A_c = sigmoid(MLP(maxpool(X)) + MLP(avgpool(X))), X_c = A_c * X."""
    x = T.as_tensor(x)
    _check_channels(x, p.channels)
    n, c = x.shape[:2]
    mx = T.pool_spatial(x, "max").reshape(n, c)
    av = T.pool_spatial(x, "avg").reshape(n, c)
    a_c = T.sigmoid(p.mlp(mx) + p.mlp(av)).reshape(n, c, 1, 1)
    return a_c * x, a_c


def spatial_logits(x_c, p: CbamParams) -> Tensor:
    """Z_s = conv([max over channels; avg over channels])."""
    stacked = T.concat([T.pool_channel(x_c, "max"), T.pool_channel(x_c, "avg")], axis=1)
    return p.spatial_conv(stacked)


def cal_split(x_c, p: CbamParams) -> AttentionOutputs:
    """Sigmoid spatial attention and its complement, applied to X_c."""
    x_c = T.as_tensor(x_c)
    z_s = spatial_logits(x_c, p)
    if z_s.shape[1] != 1:
        raise ValueError(f"complementary split needs a 1-channel spatial map, got {z_s.shape}")
    a_um = T.sigmoid(z_s)
    a_m = 1.0 - a_um
    return AttentionOutputs(a_um=a_um, a_m=a_m, z_s=z_s, x_um=a_um * x_c, x_m=a_m * x_c)


def _three_way(z_s: Tensor, x: Tensor) -> AttentionOutputs:
    att = T.softmax_channel(z_s)
    n, k, h, w = att.shape
    if k != N_FOCAL:
        raise ValueError(f"expected {N_FOCAL} focal logits, got {k}")
    a_um, a_m, a_bg = (T.narrow(att, 1, i, 1) for i in range(k))
    return AttentionOutputs(a_um=a_um, a_m=a_m, a_bg=a_bg, z_s=z_s,
                            x_um=a_um * x, x_m=a_m * x, x_bg=a_bg * x)


def mfsa_forward(x, p: MfsaParams, oni: OniConfig | None = None) -> AttentionOutputs:
    """[A_um, A_m, A_bg] = softmax_channel(f(X)); each map scales the raw X."""
    x = T.as_tensor(x)
    _check_channels(x, p.channels)
    return _three_way(p.f(x, oni), x)


def channel_att_softmax_forward(x, p: CbamParams) -> AttentionOutputs:
    """CBAM channel stage, then a 3-channel spatial conv normalized by softmax."""
    x_c, a_c = cbam_channel_stage(x, p)
    z_s = spatial_logits(x_c, p)
    out = _three_way(z_s, x_c)
    out.x_c, out.a_c = x_c, a_c
    return out


def cbam_cal_forward(x, p: CbamParams) -> AttentionOutputs:
    x_c, a_c = cbam_channel_stage(x, p)
    out = cal_split(x_c, p)
    out.x_c, out.a_c = x_c, a_c
    return out
