"""Backbone + attention + heads, assembled per training variant."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (AttentionOutputs, CbamParams, MfsaParams, cbam_cal_forward,
                        channel_att_softmax_forward, mfsa_forward)
from .losses import ArcfaceHead, arcface_loss, cross_entropy
from .nn import BatchNorm2d, Conv2d, Linear, Module, global_avg_pool
from .oni import OniConfig
from .tensor import Parameter, Tensor


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    BASELINE_ADV = "baseline_adv"
    CBAM = "cbam"
    CBAM_ADV = "cbam_adv"
    CBAM_CAL = "cbam_cal"
    CBAM_CAL_ADV = "cbam_cal_adv"
    MFSA_CAL = "mfsa_cal"
    CHANNEL_ATT_SOFTMAX = "channel_att_softmax"

    @property
    def attention(self) -> str | None:
        if self in (Variant.BASELINE, Variant.BASELINE_ADV):
            return None
        if self is Variant.MFSA_CAL:
            return "mfsa"
        if self is Variant.CHANNEL_ATT_SOFTMAX:
            return "channel_softmax"
        return "cbam"

    @property
    def has_mask_head(self) -> bool:
        return self in (Variant.CBAM_CAL, Variant.CBAM_CAL_ADV, Variant.MFSA_CAL,
                        Variant.CHANNEL_ATT_SOFTMAX)

    @property
    def has_adv_head(self) -> bool:
        return self in (Variant.BASELINE_ADV, Variant.CBAM_ADV, Variant.CBAM_CAL_ADV)

    @property
    def label(self) -> str:
        return _LABELS[self]

    def row_name(self, ma: float) -> str:
        return f"{self.label} + MA={ma:g}" if ma > 0 else self.label


_LABELS = {
    Variant.BASELINE: "Baseline",
    Variant.BASELINE_ADV: "Baseline + Adv",
    Variant.CBAM: "CBAM",
    Variant.CBAM_ADV: "CBAM + Adv",
    Variant.CBAM_CAL: "CBAM + CAL",
    Variant.CBAM_CAL_ADV: "CBAM + CAL + Adv",
    Variant.MFSA_CAL: "MFSA + CAL",
    Variant.CHANNEL_ATT_SOFTMAX: "Channel Att + softmax + CAL",
}


@dataclass
class ModelConfig:
    variant: Variant = Variant.MFSA_CAL
    n_classes: int = 40
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    embedding_dim: int = 128
    reduction: int = 4
    spatial_kernel: int = 7
    oni_iterations: int = 12
    arcface_scale: float = 64.0
    arcface_margin: float = 0.5
    w_mask: float = 1.0
    w_adv: float = 1.0
    grl_lambda: float = 1.0
    init_seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must have the same length")
        if self.n_classes < 2:
            raise ValueError(f"arcface needs at least 2 classes, got {self.n_classes}")


class Backbone(Module):
    """conv3x3 -> batch norm -> ReLU blocks, each with its own stride."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.convs, self.bns = [], []
        cin = cfg.in_channels
        for i, (width, stride) in enumerate(zip(cfg.widths, cfg.strides)):
            self.convs.append(Conv2d(f"backbone.{i}.conv", cin, width, 3, rng,
                                     stride=stride, bias=False))
            self.bns.append(BatchNorm2d(f"backbone.{i}.bn", width))
            cin = width
        self.out_channels = cin

    def __call__(self, x) -> Tensor:
        for conv, bn in zip(self.convs, self.bns):
            x = T.relu(bn(conv(x)))
        return x

    def output_size(self, size: int) -> int:
        for conv in self.convs:
            size = (size + 2 * conv.padding - 3) // conv.stride + 1
        return size


@dataclass
class TrainOutputs:
    loss_total: Tensor
    loss_arc: Tensor
    loss_mask: Tensor | None
    loss_adv: Tensor | None
    attention: AttentionOutputs | None
    mask_logits: Tensor | None = None


class FaceModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.backbone = Backbone(cfg, rng)
        c = self.backbone.out_channels
        kind = cfg.variant.attention
        self.oni = OniConfig(iterations=cfg.oni_iterations)
        self.cbam = self.mfsa = None
        if kind == "cbam":
            self.cbam = CbamParams("cbam", c, rng, cfg.reduction, cfg.spatial_kernel, 1)
        elif kind == "channel_softmax":
            self.cbam = CbamParams("cbam", c, rng, cfg.reduction, cfg.spatial_kernel, 3)
        elif kind == "mfsa":
            self.mfsa = MfsaParams("mfsa", c, rng, cfg.reduction, self.oni)
        self.embed_head = Linear("embed", c, cfg.embedding_dim, rng)
        self.arc_weight = Parameter("arcface.weight",
                                    rng.standard_normal((cfg.embedding_dim, cfg.n_classes)))
        self.arcface = ArcfaceHead(self.arc_weight, cfg.arcface_scale, cfg.arcface_margin)
        self.mask_head = Linear("mask_head", c, 2, rng) if cfg.variant.has_mask_head else None
        self.adv_head = Linear("adv_head", c, 2, rng) if cfg.variant.has_adv_head else None

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    def attend(self, feat: Tensor) -> AttentionOutputs | None:
        kind = self.variant.attention
        if kind == "cbam":
            return cbam_cal_forward(feat, self.cbam)
        if kind == "channel_softmax":
            return channel_att_softmax_forward(feat, self.cbam)
        if kind == "mfsa":
            return mfsa_forward(feat, self.mfsa, self.oni)
        return None

    def features(self, images) -> tuple[Tensor, AttentionOutputs | None]:
        """Recognition feature map (X for baselines, X_um otherwise) and attention."""
        feat = self.backbone(T.as_tensor(images))
        att = self.attend(feat)
        return (feat if att is None else att.x_um), att

    def forward_train(self, images, labels, mask_flags) -> TrainOutputs:
        labels = np.asarray(labels)
        mask_flags = np.asarray(mask_flags).astype(np.int64)
        rec, att = self.features(images)
        emb = self.embed_head(global_avg_pool(rec))
        loss_arc = arcface_loss(emb, self.arcface, labels)
        total = loss_arc
        loss_mask = loss_adv = mask_logits = None
        if self.mask_head is not None:
            mask_logits = self.mask_head(global_avg_pool(att.x_m))
            loss_mask = cross_entropy(mask_logits, mask_flags)
            if self.cfg.w_mask:
                total = total + self.cfg.w_mask * loss_mask
        if self.adv_head is not None:
            reversed_ = T.grad_reverse(global_avg_pool(rec), self.cfg.grl_lambda)
            loss_adv = cross_entropy(self.adv_head(reversed_), mask_flags)
            if self.cfg.w_adv:
                total = total + self.cfg.w_adv * loss_adv
        return TrainOutputs(total, loss_arc, loss_mask, loss_adv, att, mask_logits)

    def embed(self, images, batch_size: int = 256) -> np.ndarray:
        """Eval-mode embeddings; restores the previous train/eval mode."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = []
                for i in range(0, len(images), batch_size):
                    rec, _ = self.features(images[i:i + batch_size])
                    out.append(self.embed_head(global_avg_pool(rec)).data)
        finally:
            self.train(was_training)
        return np.concatenate(out, axis=0)

    def attention_maps(self, images, batch_size: int = 256) -> dict[str, np.ndarray]:
        """Eval-mode (N, h, w) maps keyed a_um / a_m (/ a_bg)."""
        if self.variant.attention is None:
            raise ValueError(f"variant {self.variant.value} has no spatial attention")
        was_training = self.training
        self.eval()
        maps: dict[str, list[np.ndarray]] = {}
        try:
            with T.no_grad():
                for i in range(0, len(images), batch_size):
                    _, att = self.features(images[i:i + batch_size])
                    for key, value in att.maps().items():
                        maps.setdefault(key, []).append(value[:, 0])
        finally:
            self.train(was_training)
        return {k: np.concatenate(v, axis=0) for k, v in maps.items()}


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MFSA"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def state_arrays(model: Module) -> dict[str, np.ndarray]:
    """Parameters (ONI proxies raw) followed by batch-norm running stats."""
    out = {name: p.data for name, p in model.named_parameters().items()}
    out.update(model.buffers())
    return out


def save_checkpoint(model: Module, path) -> None:
    arrays = state_arrays(model)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        tag, rank = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        dtype = _TAG_DTYPES[tag].newbyteorder("<")
        size = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(buf, dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def load_checkpoint(model: Module, path) -> None:
    arrays = read_checkpoint(path)
    targets = {name: p.data for name, p in model.named_parameters().items()}
    targets.update(model.buffers())
    missing = set(targets) - set(arrays)
    extra = set(arrays) - set(targets)
    if missing or extra:
        raise ValueError(f"{path}: checkpoint mismatch, missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, dst in targets.items():
        if arrays[name].shape != dst.shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, "
                             f"model expects {dst.shape}")
        dst[...] = arrays[name]
