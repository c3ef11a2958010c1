"""Classification pre-initialization and region image-text contrastive training."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .activation import cam_t
from .losses import LossWeights, mean_breakdown, step_losses
from .model import CamNet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3.5e-4
    epochs: int = 15
    batch_size: int = 8
    poly_power: float = 0.9
    momentum: float = 0.9
    alpha: float = 10.0
    beta: float = 8.0
    gamma: float = 0.2
    tau: float = 0.7
    omega: float = 0.1
    brc_tau_on_bf: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        self.weights  # validates tau and the loss weights

    @property
    def weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma, self.tau, self.brc_tau_on_bf)

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def fingerprint(self, **extra):
        doc = json.dumps({**asdict(self), **extra}, sort_keys=True, default=str)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kind = kinds[key]
            if kind in (bool, "bool"):
                if val.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"config line {lineno}: {key} must be true/false")
                values[key] = val.lower() in ("true", "1")
            elif kind in (int, "int"):
                values[key] = int(val)
            else:
                values[key] = float(val)
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def poly_lr(base_lr, step, total_steps, power=0.9):
    """``base_lr * (1 - step / total_steps) ** power``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def build_model(n_classes, seed, dtype=torch.float32):
    seed_everything(seed)
    return CamNet(n_classes).to(dtype)


def _label_matrix(samples, n_classes, dtype):
    y = torch.zeros(len(samples), n_classes, dtype=dtype)
    for i, s in enumerate(samples):
        y[i, list(s.labels)] = 1.0
    return y


def _images(samples, dtype):
    x = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    return x, x.permute(0, 3, 1, 2).contiguous()


def _steps_per_epoch(n, batch_size):
    return (n + batch_size - 1) // batch_size


def _optimizer(model, config):
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)


def classification_loss(model, x_chw, y):
    """Multi-label BCE on globally average-pooled class score maps (background column excluded)."""
    scores = model.logits(model.features(x_chw)).mean(dim=(-2, -1))
    return F.binary_cross_entropy_with_logits(scores[:, 1:], y[:, 1:])


def pretrain_classifier(model, samples, config: TrainConfig, metrics=None):
    """Train backbone and ``W`` as a multi-label image classifier.

    Returns the model (trained in place) and the per-step loss history.
    """
    if not samples:
        raise ValueError("empty dataset")
    history = []
    if config.epochs == 0:
        return model, history
    dtype = model.classifier.dtype
    _, x = _images(samples, dtype)
    y = _label_matrix(samples, model.n_classes, dtype)
    opt = _optimizer(model, config)
    gen = torch.Generator().manual_seed(config.seed)
    per_epoch = _steps_per_epoch(len(samples), config.batch_size)
    total = per_epoch * config.epochs
    step = 0
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(samples), generator=gen)
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = poly_lr(config.lr, step, total, config.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = classification_loss(model, x[idx], y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec = {"epoch": epoch, "step": step, "bce": loss.item(), "lr": lr}
            history.append(rec)
            if metrics is not None:
                metrics.write(json.dumps(rec) + "\n")
            step += 1
    return model, history


def classification_accuracy(model, samples):
    """Fraction of (image, foreground class) decisions that are correct at 0.5."""
    dtype = model.classifier.dtype
    _, x = _images(samples, dtype)
    y = _label_matrix(samples, model.n_classes, dtype)
    with torch.no_grad():
        scores = torch.sigmoid(model.logits(model.features(x)).mean(dim=(-2, -1)))
    pred = (scores[:, 1:] >= 0.5).to(dtype)
    return float((pred == y[:, 1:]).to(torch.float64).mean())


def corpora_for(store, sample):
    out = {}
    for cid in sample.labels:
        c = store.get(sample.image_id, cid)
        if c is None:
            raise KeyError(f"no corpus record for image {sample.image_id!r}, class {cid}")
        out[cid] = c
    return out


def batch_objective(model, x_hwc, x_chw, samples, store, config: TrainConfig, encoders, fat=True, stats=None):
    """Weighted objective averaged over a batch; returns a LossBreakdown of tensors."""
    z = model.features(x_chw)
    parts = []
    for i, s in enumerate(samples):
        cam = cam_t(z[i], model.classifier, s.labels)
        parts.append(step_losses(
            x_hwc[i], cam, s.labels, corpora_for(store, s), config.omega, config.weights,
            encoders, fat=fat, stats=stats,
        ))
    return mean_breakdown(parts, config.weights)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    config: dict
    epoch: int  # number of completed epochs
    step: int
    rng_state: torch.Tensor
    n_classes: int
    fat: bool = True

    def to_dict(self):
        return {"version": CHECKPOINT_VERSION, **asdict(self)}


def save_checkpoint(ckpt: Checkpoint, path):
    """Atomic write (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(ckpt.to_dict(), buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    version = doc.pop("version", None)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    return Checkpoint(**doc)


def pretrain_checkpoint(model, config: TrainConfig) -> Checkpoint:
    """Checkpoint of a pretrained model, used as the RITC initialization."""
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=None,
        config=asdict(config),
        epoch=0,
        step=0,
        rng_state=torch.Generator().manual_seed(config.seed).get_state(),
        n_classes=model.n_classes,
    )


def model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32):
    model = CamNet(ckpt.n_classes).to(dtype)
    model.load_state_dict(ckpt.model_state)
    return model


def train_ritc(model, store, samples, config: TrainConfig, encoders, fat=True, metrics=None,
               resume: Checkpoint | None = None, stop_after_epoch=None, on_epoch_end=None):
    """Minimize the weighted FRC/BRC/REG objective over ``samples``.

    ``metrics`` (a text stream) receives one JSON record per step. Returns
    the final :class:`Checkpoint` and a list of per-epoch mean breakdowns.
    ``stop_after_epoch`` ends the run early (the schedule still assumes
    ``config.epochs``), which together with ``resume`` splits one run in two.
    """
    if not samples:
        raise ValueError("empty dataset")
    if not getattr(encoders, "differentiable", False):
        raise ValueError("training needs differentiable encoders")
    for s in samples:
        corpora_for(store, s)
    dtype = model.classifier.dtype
    x_hwc, x_chw = _images(samples, dtype)
    opt = _optimizer(model, config)
    gen = torch.Generator().manual_seed(config.seed)
    start_epoch, step = 0, 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        gen.set_state(resume.rng_state)
        start_epoch, step = resume.epoch, resume.step
    per_epoch = _steps_per_epoch(len(samples), config.batch_size)
    total = per_epoch * config.epochs
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    stats = {}
    epoch_metrics = []
    model.train()
    for epoch in range(start_epoch, last_epoch):
        order = torch.randperm(len(samples), generator=gen)
        sums = {"frc": 0.0, "brc": 0.0, "reg": 0.0, "total": 0.0}
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = poly_lr(config.lr, step, total, config.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = [samples[int(i)] for i in idx]
            out = batch_objective(model, x_hwc[idx], x_chw[idx], batch, store, config, encoders, fat, stats)
            opt.zero_grad()
            out.total.backward()
            opt.step()
            rec = {"epoch": epoch, "step": step, **out.as_floats(), "lr": lr}
            for k in sums:
                sums[k] += rec[k]
            if metrics is not None:
                metrics.write(json.dumps(rec) + "\n")
            step += 1
        epoch_metrics.append({"epoch": epoch, **{k: v / per_epoch for k, v in sums.items()}})
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    if stats:
        log.info("degenerate regions skipped: %s", stats)
    ckpt = Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=opt.state_dict(),
        config=asdict(config),
        epoch=last_epoch,
        step=step,
        rng_state=gen.get_state(),
        n_classes=model.n_classes,
        fat=fat,
    )
    return ckpt, epoch_metrics
