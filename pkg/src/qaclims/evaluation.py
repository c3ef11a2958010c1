"""CAM-to-mask conversion, mIoU, and the ablation / filter-ratio experiments."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .activation import ActivationMap, cam_t, upsample_t
from .datasets import IGNORE_INDEX, stack_images
from .qape import FG_KINDS, BG_KINDS
from .training import TrainConfig, train_ritc

log = logging.getLogger(__name__)

DEFAULT_BG_THRESHOLD = 0.15


def cam_to_mask(maps: ActivationMap, bg_threshold=DEFAULT_BG_THRESHOLD):
    """Per-pixel argmax over the background score and the class planes.

    Background wins ties, and so does the lower-indexed class among equals.
    """
    if not 0.0 <= bg_threshold <= 1.0:
        raise ValueError("bg_threshold must lie in [0, 1]")
    k, h, w = maps.planes.shape
    flat = np.ascontiguousarray(maps.planes.reshape(k, h * w), dtype=np.float64)
    ids = np.asarray(maps.class_ids, dtype=np.int64)
    return kernels.cam_argmax(flat, ids, float(bg_threshold)).reshape(h, w)


@dataclass
class EvalReport:
    iou: dict  # class id -> IoU, for classes with nonzero union
    miou: float
    intersection: list
    union: list
    n_pixels: int
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "miou": self.miou,
            "iou": {str(k): v for k, v in sorted(self.iou.items())},
            "intersection": self.intersection,
            "union": self.union,
            "n_pixels": self.n_pixels,
            "fingerprint": self.fingerprint,
            **self.extra,
        }


class ConfusionAccumulator:
    """Dataset-level (gt, pred) confusion counts."""

    def __init__(self, n_classes, ignore_index=IGNORE_INDEX):
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        kernels.confusion_update(
            self.matrix,
            np.ascontiguousarray(pred.ravel(), dtype=np.int64),
            np.ascontiguousarray(gt.ravel(), dtype=np.int64),
            int(self.ignore_index),
        )
        return self

    def merge(self, other):
        self.matrix += other.matrix
        return self

    def report(self, fingerprint=""):
        inter = np.diag(self.matrix)
        union = self.matrix.sum(0) + self.matrix.sum(1) - inter
        iou = {c: float(inter[c] / union[c]) for c in range(self.n_classes) if union[c] > 0}
        miou = float(np.mean(list(iou.values()))) if iou else float("nan")
        return EvalReport(iou, miou, inter.tolist(), union.tolist(), int(self.matrix.sum()), fingerprint)


def miou(pred, gt, n_classes=None, ignore_index=IGNORE_INDEX) -> EvalReport:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if n_classes is None:
        valid = gt[gt != ignore_index]
        n_classes = int(max(pred.max(initial=0), valid.max(initial=0))) + 1
    return ConfusionAccumulator(n_classes, ignore_index).update(pred, gt).report()


def predict_cams(model, samples, batch_size=16):
    """Activation maps at image resolution for each sample's labeled classes."""
    dtype = model.classifier.dtype
    out = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            z = model.features(stack_images(chunk, dtype))
            for i, s in enumerate(chunk):
                if not s.labels:
                    out.append(None)
                    continue
                p = upsample_t(cam_t(z[i], model.classifier, s.labels), s.image.shape[:2])
                out.append(ActivationMap(s.labels, p.to(torch.float64).numpy()))
    return out


def evaluate_cams(model, samples, n_classes, bg_threshold=DEFAULT_BG_THRESHOLD, fingerprint="",
                  sweep=None, cams=None):
    """CAM mIoU over ``samples``; ``sweep`` (a list of thresholds) adds the best one to ``extra``."""
    cams = predict_cams(model, samples) if cams is None else cams

    def score(thr):
        acc = ConfusionAccumulator(n_classes)
        for s, m in zip(samples, cams):
            if s.mask is None:
                continue
            pred = cam_to_mask(m, thr) if m is not None else np.zeros_like(s.mask)
            acc.update(pred, s.mask)
        return acc.report(fingerprint)

    report = score(bg_threshold)
    report.extra["bg_threshold"] = bg_threshold
    if sweep:
        best = max(((t, score(t).miou) for t in sweep), key=lambda tm: (tm[1], -tm[0]))
        report.extra["best_bg_threshold"] = best[0]
        report.extra["best_miou"] = best[1]
    return report


# --- ablations ---------------------------------------------------------------

LOSS_TERMS = ("FRC", "BRC", "REG")

LOSS_MATRIX = [("FRC",), ("BRC",), ("FRC", "BRC"), ("FRC", "BRC", "REG")]

ALL_KINDS = BG_KINDS + FG_KINDS
CORPUS_MATRIX = [
    ("category only", ()),
    ("+fine-grained", ("fine_grained",)),
    ("+alias", ("alias",)),
    ("+object", ("surrounding_object",)),
    ("+scene", ("scene",)),
    ("all", ALL_KINDS),
]


@dataclass(frozen=True)
class AblationCell:
    name: str
    losses: tuple = LOSS_TERMS
    corpus_kinds: tuple = ALL_KINDS
    fat: bool = True
    omega: float | None = None

    def __post_init__(self):
        if not self.losses:
            raise ValueError("an ablation cell needs at least one loss term")
        bad = set(self.losses) - set(LOSS_TERMS)
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}")
        bad = set(self.corpus_kinds) - set(ALL_KINDS)
        if bad:
            raise ValueError(f"unknown corpus kinds {sorted(bad)}")

    def apply(self, config: TrainConfig) -> TrainConfig:
        kw = {
            "alpha": config.alpha if "FRC" in self.losses else 0.0,
            "beta": config.beta if "BRC" in self.losses else 0.0,
            "gamma": config.gamma if "REG" in self.losses else 0.0,
        }
        if self.omega is not None:
            kw["omega"] = self.omega
        return config.replace(**kw)


def loss_matrix():
    return [AblationCell("+".join(t), losses=t) for t in LOSS_MATRIX]


def corpus_matrix():
    return [AblationCell(name, corpus_kinds=kinds) for name, kinds in CORPUS_MATRIX]


def fat_matrix():
    return [AblationCell("FAT off", fat=False), AblationCell("FAT on", fat=True)]


def run_cell(cell: AblationCell, init_state, model_factory, store, train, evals, config, encoders,
             n_classes, bg_threshold=DEFAULT_BG_THRESHOLD):
    cfg = cell.apply(config)
    model = model_factory()
    model.load_state_dict(copy.deepcopy(init_state))
    variant = store if set(cell.corpus_kinds) == set(ALL_KINDS) else store.variant(cell.corpus_kinds)
    train_ritc(model, variant, train, cfg, encoders, fat=cell.fat)
    fp = cfg.fingerprint(cell=cell.name, fat=cell.fat, kinds=sorted(cell.corpus_kinds))
    report = evaluate_cams(model, evals, n_classes, bg_threshold, fingerprint=fp)
    report.extra["cell"] = cell.name
    return report


def run_ablation(matrix, init_state, model_factory, store, train, evals, config: TrainConfig, encoders,
                 n_classes, bg_threshold=DEFAULT_BG_THRESHOLD):
    """Train and evaluate one model per cell, all from the same initialization."""
    rows = []
    for cell in matrix:
        report = run_cell(cell, init_state, model_factory, store, train, evals, config, encoders,
                          n_classes, bg_threshold)
        log.info("%s: mIoU %.4f", cell.name, report.miou)
        rows.append((cell, report))
    return rows


def sweep_omega(omegas, init_state, model_factory, store, train, evals, config: TrainConfig, encoders,
                n_classes, bg_threshold=DEFAULT_BG_THRESHOLD):
    """(omega, mIoU) pairs, one training run per filter ratio."""
    for w in omegas:
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"omega {w} outside [0, 1]")
    cells = [AblationCell(f"omega={w:g}", omega=w) for w in omegas]
    rows = run_ablation(cells, init_state, model_factory, store, train, evals, config, encoders,
                        n_classes, bg_threshold)
    return [(w, r.miou) for w, (_, r) in zip(omegas, rows)]


def format_table(rows, title=""):
    lines = [title] if title else []
    lines.append(f"{'config':<24} {'losses':<14} {'corpus':<40} {'FAT':<4} {'mIoU':>8}")
    for cell, r in rows:
        if set(cell.corpus_kinds) == set(ALL_KINDS):
            kinds = "all"
        else:
            kinds = ",".join(cell.corpus_kinds) or "category only"
        lines.append(f"{cell.name:<24} {'+'.join(cell.losses):<14} {kinds:<40} "
                     f"{'on' if cell.fat else 'off':<4} {100 * r.miou:8.2f}")
    return "\n".join(lines) + "\n"


def rows_to_json(rows):
    return [{"cell": c.name, "losses": list(c.losses), "corpus_kinds": list(c.corpus_kinds),
             "fat": c.fat, "omega": c.omega, **r.to_json()} for c, r in rows]


def dump_json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"
