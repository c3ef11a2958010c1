"""Class activation maps and foreground adaptive thresholding.

The numpy functions here are the reference surface used by evaluation and
visualization; the ``*_t`` variants are the differentiable torch versions
used inside the training graph. Both binarize with ``p >= theta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels

log = logging.getLogger(__name__)


@dataclass
class ActivationMap:
    """Sigmoid activation planes for the classes present in one image."""

    class_ids: tuple
    planes: np.ndarray  # (k, H, W), values in [0, 1]

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.class_ids):
            raise ValueError("planes must have shape (len(class_ids), H, W)")

    def plane(self, class_id):
        return self.planes[self.class_ids.index(int(class_id))]

    @property
    def shape(self):
        return self.planes.shape[1:]


@dataclass
class RegionMaskPair:
    theta: float
    binary: np.ndarray  # uint8
    fg: np.ndarray
    bg: np.ndarray


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def compute_cam(z, w, present_classes) -> ActivationMap:
    """``P_k(h, w) = sigmoid(w_k . z(h, w))`` for every present class ``k``.

    ``z`` has shape (C, H, W) and ``w`` shape (C, K).
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got shape {z.shape}")
    if w.ndim != 2 or w.shape[0] != z.shape[0]:
        raise ValueError(f"classifier weights {w.shape} do not match {z.shape[0]} feature channels")
    classes = sorted(int(c) for c in present_classes)
    if not classes:
        raise ValueError("present_classes is empty")
    if classes[0] < 0 or classes[-1] >= w.shape[1]:
        raise ValueError(f"class ids {classes} out of range for {w.shape[1]} categories")
    logits = np.einsum("ck,chw->khw", w[:, classes], z)
    return ActivationMap(tuple(classes), sigmoid(logits))


def fat_threshold(p, omega) -> RegionMaskPair:
    """Foreground adaptive thresholding of one activation plane.

    ``theta = omega * max(p)``; pixels with ``p >= theta`` form the
    foreground region ``p * b``, the rest the background region
    ``(1 - p) * (1 - b)``.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    p = np.ascontiguousarray(p, dtype=np.float64)
    theta = float(omega) * float(p.max())
    b, rf, rb = kernels.fat_regions(p.ravel(), theta)
    if theta == 0.0 and not p.any():
        log.info("all-zero activation plane: both regions are empty")
    return RegionMaskPair(theta, b.reshape(p.shape), rf.reshape(p.shape), rb.reshape(p.shape))


def upsample_map(p, target_h, target_w):
    """Corner-aligned bilinear upsampling of a plane."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be positive")
    if target_h < p.shape[0] or target_w < p.shape[1]:
        raise ValueError(f"cannot upsample {p.shape} to smaller ({target_h}, {target_w})")
    out = kernels.bilinear_upsample(p, int(target_h), int(target_w))
    # Interpolation is a convex combination; clip away rounding overshoot.
    return np.clip(out, p.min(), p.max())


def mask_image(x, r):
    """Multiply every color channel of ``x`` (H, W, 3) by the region mask ``r`` (H, W)."""
    x = np.asarray(x)
    r = np.asarray(r)
    if x.shape[:2] != r.shape:
        raise ValueError(f"mask {r.shape} does not match image {x.shape[:2]}")
    return x * r[..., None]


# --- torch versions used in the training graph ---------------------------------


def cam_t(z, w, class_ids):
    """Differentiable CAM: ``z`` (C, h, w), ``w`` (C, K) -> (k, h, w)."""
    return torch.sigmoid(torch.einsum("ck,chw->khw", w[:, list(class_ids)], z))


def upsample_t(p, size):
    return F.interpolate(p[None], size=size, mode="bilinear", align_corners=True)[0]


def fat_regions_t(p, omega, fat=True):
    """Foreground/background regions for planes ``p`` (k, H, W).

    The binary mask is a constant in the graph; gradients flow through the
    ``p`` factors only. With ``fat=False`` the raw map is used:
    ``R_f = p`` and ``R_b = 1 - p``.
    """
    if not fat:
        return p, 1.0 - p
    with torch.no_grad():
        theta = omega * p.amax(dim=(-2, -1), keepdim=True)
        b = (p >= theta).to(p.dtype)
    return p * b, (1.0 - p) * (1.0 - b)
