"""Dataset manifests, loading, and VOC-style ingestion.

Class ids equal mask indices; id 0 is the background class and never an
image-level label. Index 255 in ground-truth masks means "ignore".
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .raster import load_image, load_mask

IGNORE_INDEX = 255

VOC_CLASSES = [
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "dining table", "dog", "horse", "motorbike", "person", "potted plant",
    "sheep", "sofa", "train", "tv monitor",
]


@dataclass
class ManifestItem:
    image_id: str
    image: str
    labels: list
    mask: str | None = None


@dataclass
class DatasetManifest:
    classes: list
    items: list = field(default_factory=list)
    root: str = "."
    scenes: str | None = None  # path to synthetic scene descriptors, if any

    def resolve(self, rel):
        return os.path.join(self.root, rel)

    def to_json(self):
        return {
            "classes": list(self.classes),
            "scenes": self.scenes,
            "items": [
                {"image_id": it.image_id, "image": it.image, "labels": list(it.labels), "mask": it.mask}
                for it in self.items
            ],
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, check=True):
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        m = cls(
            classes=list(doc["classes"]),
            items=[ManifestItem(d["image_id"], d["image"], list(d["labels"]), d.get("mask")) for d in doc["items"]],
            root=str(path.parent),
            scenes=doc.get("scenes"),
        )
        if check:
            m.validate()
        return m

    def validate(self):
        k = len(self.classes)
        for it in self.items:
            for rel in (it.image, it.mask):
                if rel is not None and not os.path.exists(self.resolve(rel)):
                    raise FileNotFoundError(f"manifest references missing file {rel}")
            bad = [c for c in it.labels if not 0 < int(c) < k]
            if bad:
                raise ValueError(f"{it.image_id}: labels {bad} outside the class table")


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # (H, W, 3) float32
    labels: tuple
    mask: np.ndarray | None = None


def load_samples(manifest: DatasetManifest, subset=None):
    items = manifest.items if subset is None else [it for it in manifest.items if it.image_id in set(subset)]
    out = []
    for it in items:
        mask = load_mask(manifest.resolve(it.mask)) if it.mask else None
        out.append(Sample(it.image_id, load_image(manifest.resolve(it.image)), tuple(sorted(it.labels)), mask))
    return out


def stack_images(samples, dtype=torch.float32):
    """(n, 3, H, W) tensor of the sample images."""
    return torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def labels_from_mask(mask, n_classes=None):
    vals = np.unique(np.asarray(mask))
    labels = sorted(int(v) for v in vals if v != 0 and v != IGNORE_INDEX)
    if n_classes is not None and any(v >= n_classes for v in labels):
        raise ValueError(f"mask index outside the {n_classes}-entry class table")
    return labels


def ingest_voc_style(root_dir, split="train", classes=None):
    """Manifest for a VOC-style tree.

    Layout: ``JPEGImages/<id>.jpg``, ``SegmentationClass/<id>.png`` (index
    masks), ``ImageSets/Segmentation/<split>.txt``. Labels come from
    ``labels/<id>.txt`` (space-separated class ids) when present, else from
    the mask indices.
    """
    root = Path(root_dir)
    split_file = root / "ImageSets" / "Segmentation" / f"{split}.txt"
    if not split_file.exists():
        raise FileNotFoundError(f"missing split list {split_file}")
    classes = list(classes or VOC_CLASSES)
    ids = [ln.strip() for ln in split_file.read_text().splitlines() if ln.strip()]
    items = []
    for image_id in ids:
        img = next((f"JPEGImages/{image_id}{ext}" for ext in (".jpg", ".png", ".jpeg")
                    if (root / "JPEGImages" / f"{image_id}{ext}").exists()), None)
        if img is None:
            raise FileNotFoundError(f"no image for {image_id} under {root / 'JPEGImages'}")
        mask_rel = f"SegmentationClass/{image_id}.png"
        has_mask = (root / mask_rel).exists()
        label_file = root / "labels" / f"{image_id}.txt"
        if label_file.exists():
            labels = sorted(int(t) for t in label_file.read_text().split())
        elif has_mask:
            try:
                labels = labels_from_mask(load_mask(root / mask_rel), len(classes))
            except OSError as exc:
                raise ValueError(f"unreadable mask {mask_rel}: {exc}") from exc
        else:
            raise FileNotFoundError(f"{image_id}: neither a label file nor a mask")
        items.append(ManifestItem(image_id, img, labels, mask_rel if has_mask else None))
    return DatasetManifest(classes, items, root=str(root))
