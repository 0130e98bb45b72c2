"""SGD with momentum, the warmup + polynomial schedule, and the training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import AugmentConfig, Dataset, augment
from .model import FaceModel, ModelConfig, Variant, save_checkpoint
from .tensor import NonFiniteError, Parameter

log = logging.getLogger(__name__)

REFERENCE_BATCH = 512


@dataclass
class TrainConfig:
    # optimisation
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_peak: float = 0.2
    warmup_epochs: int = 2
    total_epochs: int = 30
    poly_power: float = 2.0
    seed: int = 0
    ma_probability: float = 0.5
    variant: str = "mfsa_cal"
    # synthetic data
    n_identities: int = 40
    samples_per_identity: int = 50
    image_size: int = 32
    flip_prob: float = 0.5
    translate_px: int = 2
    # model
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    strides: list[int] = field(default_factory=lambda: [2, 2, 2, 1])
    embedding_dim: int = 128
    reduction: int = 4
    spatial_kernel: int = 7
    oni_iterations: int = 12
    arcface_scale: float = 64.0
    arcface_margin: float = 0.5
    w_mask: float = 1.0
    w_adv: float = 1.0
    grl_lambda: float = 1.0
    # verification
    eval_identities: int = 20
    eval_samples_per_identity: int = 10
    n_genuine: int = 800
    n_impostor: int = 5000
    far_grid: list[float] = field(default_factory=lambda: [0.1, 0.01, 0.001])

    def __post_init__(self):
        Variant(self.variant)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        final = self.image_size
        for stride in self.strides:
            final = (final - 1) // stride + 1  # 3x3 conv, padding 1
        if final < 4:
            raise ValueError(f"final feature map {final}x{final} is below 4x4 for "
                             f"{self.image_size}px input with strides {list(self.strides)}")

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                raise ValueError(f"unknown config key: {key}")
        return cls(**values)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ValueError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def effective_lr_peak(self) -> float:
        """Linear scaling from the reference batch of 512 when the batch is smaller."""
        return self.lr_peak * min(1.0, self.batch_size / REFERENCE_BATCH)

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(variant=Variant(self.variant), n_classes=n_classes,
                           widths=tuple(self.widths), strides=tuple(self.strides),
                           embedding_dim=self.embedding_dim, reduction=self.reduction,
                           spatial_kernel=self.spatial_kernel,
                           oni_iterations=self.oni_iterations,
                           arcface_scale=self.arcface_scale, arcface_margin=self.arcface_margin,
                           w_mask=self.w_mask, w_adv=self.w_adv, grl_lambda=self.grl_lambda,
                           init_seed=self.seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(ma_probability=self.ma_probability, flip_prob=self.flip_prob,
                             translate_px=self.translate_px)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup to the peak, then ``peak * (1 - progress) ** power`` down to 0."""
    total = cfg.total_epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    peak = cfg.effective_lr_peak
    if step < warm:
        return peak * step / warm
    return peak * (1.0 - (step - warm) / (total - warm)) ** cfg.poly_power


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: list[Parameter]) -> OptimizerState:
        return cls({p.name: np.zeros_like(p.data) for p in params})


def sgd_step(params: list[Parameter], state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + g + wd*p ; p <- p - lr*v (no decay on biases / norm affine)."""
    if {p.name for p in params} != set(state.velocity):
        raise ValueError("optimizer state does not match the parameter set")
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")
        v = state.velocity[p.name]
        v *= momentum
        v += g
        if weight_decay and p.weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
    state.step += 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: FaceModel
    log: list[dict]
    checkpoint: Path | None = None


def build_model(cfg: TrainConfig, n_classes: int) -> FaceModel:
    return FaceModel(cfg.model_config(n_classes))


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch, 0xB47C]).permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def augmented_batch(dataset: Dataset, idx: np.ndarray, aug: AugmentConfig, seed: int,
                    epoch: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    images, labels, flags, regions = [], [], [], []
    for i in idx:
        s = augment(dataset.sample(int(i)), aug, np.random.default_rng([seed, epoch, int(i), 0xA06]))
        images.append(s.image)
        labels.append(s.identity)
        flags.append(s.masked)
        regions.append(s.mask_region)
    dtype = T.get_default_dtype()
    return (np.stack(images).astype(dtype), np.array(labels), np.array(flags, dtype=bool),
            np.stack(regions))


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the full loop; writes ``metrics.jsonl`` and ``checkpoint.bin`` under ``out_dir``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = build_model(cfg, dataset.n_classes)
    params = model.parameters()
    state = OptimizerState.create(params)
    aug = cfg.augment_config()
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.bin" if out else None
    metrics = out / "metrics.jsonl" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_text("", encoding="utf-8")

    steps_per_epoch = len(epoch_batches(len(dataset), cfg.batch_size, cfg.seed, 0))
    records = []
    for epoch in range(cfg.total_epochs):
        sums = {"loss_total": 0.0, "loss_arc": 0.0, "loss_mask": 0.0, "loss_adv": 0.0}
        seen = correct = 0
        lr = 0.0
        for idx in epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            images, labels, flags, _ = augmented_batch(dataset, idx, aug, cfg.seed, epoch)
            try:
                outs = model.forward_train(images, labels, flags)
                model.zero_grad()
                T.backward(outs.loss_total)
                lr = lr_at(state.step, cfg, steps_per_epoch)
                sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay)
            except NonFiniteError as exc:
                where = f"; last good checkpoint kept at {ckpt}" if ckpt and ckpt.exists() else ""
                raise TrainingDiverged(f"epoch {epoch} step {state.step}: {exc}{where}") from exc
            n = len(idx)
            seen += n
            for key in sums:
                value = getattr(outs, key)
                if value is not None:
                    sums[key] += value.item() * n
            if outs.mask_logits is not None:
                correct += int((outs.mask_logits.data.argmax(axis=1) == flags).sum())
        record = {
            "epoch": epoch,
            "step": state.step,
            "loss_total": sums["loss_total"] / seen,
            "loss_arc": sums["loss_arc"] / seen,
            "loss_mask": sums["loss_mask"] / seen if model.mask_head is not None else None,
            "loss_adv": sums["loss_adv"] / seen if model.adv_head is not None else None,
            "lr": lr,
            "mask_acc": correct / seen if model.mask_head is not None else None,
        }
        records.append(record)
        log.info("epoch %d loss %.4f arc %.4f lr %.5f", epoch, record["loss_total"],
                 record["loss_arc"], lr)
        if out:
            with metrics.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
            save_checkpoint(model, ckpt)
        if on_epoch:
            on_epoch(record)
    return TrainResult(model, records, ckpt)
