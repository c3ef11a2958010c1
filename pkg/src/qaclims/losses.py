"""Region image-text contrastive losses and the weighted objective.

Scalar helpers accept plain floats/sequences (returning floats) or torch
tensors (returning tensors that stay in the autograd graph).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .activation import fat_regions_t, upsample_t

log = logging.getLogger(__name__)


class UndefinedSimilarityError(ValueError):
    pass


def _wrap(*xs):
    is_t = any(isinstance(x, torch.Tensor) for x in xs)
    out = []
    for x in xs:
        if isinstance(x, torch.Tensor):
            out.append(x)
        else:
            out.append(torch.as_tensor(x, dtype=torch.float64))
    return is_t, out


def _unwrap(is_t, y):
    return y if is_t else float(y)


def cosine_sim(a, b):
    """Cosine similarity along the last axis; zero-norm inputs are an error."""
    is_t, (a, b) = _wrap(a, b)
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise UndefinedSimilarityError("cosine similarity of a zero-norm vector")
    s = (a * b).sum(-1) / (na * nb)
    if not is_t:
        return s.tolist() if s.ndim else float(s)
    return s


def mean_fg_text(embs):
    if isinstance(embs, torch.Tensor):
        if embs.ndim != 2 or embs.shape[0] == 0:
            raise ValueError("need a non-empty (n, D) stack of embeddings")
        return embs.mean(0)
    embs = list(embs)
    if not embs:
        raise ValueError("need at least one embedding")
    is_t, ts = _wrap(*embs)
    m = torch.stack(ts).mean(0)
    return m if is_t else m.tolist()


def frc_loss(s_ff, s_fb, tau):
    """``-log(exp(s_ff/tau) / (sum_n exp(s_fb_n/tau) + exp(s_ff/tau)))``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    is_t, (s_ff, s_fb) = _wrap(s_ff, s_fb)
    s_fb = s_fb.reshape(-1)
    if s_fb.numel() == 0:
        raise ValueError("need at least one negative similarity")
    # Logits relative to the positive: a common shift of all similarities cancels exactly.
    rel = (s_fb.to(s_ff.dtype) - s_ff.reshape(1)) / tau
    return _unwrap(is_t, torch.logsumexp(torch.cat([rel.new_zeros(1), rel]), 0))


def brc_loss(s_bf, s_bb, tau, brc_tau_on_bf=True):
    """Background contrast against the mean background-text similarity.

    ``-log(exp(m/tau) / (exp(s_bf/tau') + exp(m/tau)))`` with ``m`` the mean
    of ``s_bb``; ``tau' = tau`` unless ``brc_tau_on_bf`` is false, in which
    case the ``s_bf`` term is left unscaled.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    is_t, (s_bf, s_bb) = _wrap(s_bf, s_bb)
    s_bb = s_bb.reshape(-1)
    if s_bb.numel() == 0:
        raise ValueError("need at least one background similarity")
    m = s_bb.mean().reshape(1)
    if brc_tau_on_bf:
        rel = (s_bf.reshape(1).to(m.dtype) - m) / tau
    else:
        rel = s_bf.reshape(1).to(m.dtype) - m / tau
    return _unwrap(is_t, torch.logsumexp(torch.cat([rel.new_zeros(1), rel]), 0))


def reg_loss(maps):
    """Mean activation over all present planes and pixels."""
    if isinstance(maps, torch.Tensor):
        if maps.numel() == 0:
            raise ValueError("no activation planes")
        return maps.mean()
    is_t, (m,) = _wrap(maps)
    if m.numel() == 0:
        raise ValueError("no activation planes")
    return float(m.mean())


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta: float = 8.0
    gamma: float = 0.2
    tau: float = 0.7
    brc_tau_on_bf: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    frc: object
    brc: object
    reg: object
    total: object

    def as_floats(self):
        out = {}
        for k in ("frc", "brc", "reg", "total"):
            v = getattr(self, k)
            out[k] = v.item() if isinstance(v, torch.Tensor) else float(v)
        return out


def total_loss(frc, brc, reg, weights: LossWeights) -> LossBreakdown:
    total = weights.alpha * frc + weights.beta * brc + weights.gamma * reg
    return LossBreakdown(frc, brc, reg, total)


def mean_breakdown(parts, weights: LossWeights) -> LossBreakdown:
    """Average per-image breakdowns over a batch and re-weight."""
    n = len(parts)
    frc = sum(p.frc for p in parts) / n
    brc = sum(p.brc for p in parts) / n
    reg = sum(p.reg for p in parts) / n
    return total_loss(frc, brc, reg, weights)


def _region_ok(v):
    return bool(torch.linalg.vector_norm(v) > 1e-12)


def step_losses(image, cam, class_ids, corpora, omega, weights: LossWeights, encoders,
                fat=True, stats=None) -> LossBreakdown:
    """Losses for one image.

    ``image`` is (H, W, 3); ``cam`` holds the activation planes (k, h, w)
    of the present classes ``class_ids``; ``corpora`` maps class id to its
    :class:`~qaclims.qape.ClassCorpus`. A class whose foreground or
    background region is empty skips that term; the terms are averaged
    over the classes that have them.
    """
    class_ids = [int(c) for c in class_ids]
    if cam.shape[0] != len(class_ids):
        raise ValueError("one activation plane per present class expected")
    missing = [c for c in class_ids if c not in corpora]
    if missing:
        raise KeyError(f"no corpus for classes {missing}")
    image = torch.as_tensor(image, dtype=cam.dtype)
    p_up = upsample_t(cam, tuple(image.shape[:2]))
    r_f, r_b = fat_regions_t(p_up, omega, fat=fat)
    v_if = encoders.encode_image(image[None] * r_f[..., None])
    v_ib = encoders.encode_image(image[None] * r_b[..., None])
    frcs, brcs = [], []
    for j, cid in enumerate(class_ids):
        corpus = corpora[cid]
        t_fg = mean_fg_text(encoders.encode_texts(corpus.fg_texts).to(cam.dtype))
        t_bg = encoders.encode_texts(corpus.bg_texts).to(cam.dtype)
        if _region_ok(v_if[j]):
            s_ff = cosine_sim(v_if[j], t_fg)
            s_fb = cosine_sim(v_if[j][None], t_bg)
            frcs.append(frc_loss(s_ff, s_fb, weights.tau))
        elif stats is not None:
            stats["empty_fg"] = stats.get("empty_fg", 0) + 1
        if _region_ok(v_ib[j]):
            s_bf = cosine_sim(v_ib[j], t_fg)
            s_bb = cosine_sim(v_ib[j][None], t_bg)
            brcs.append(brc_loss(s_bf, s_bb, weights.tau, weights.brc_tau_on_bf))
        elif stats is not None:
            stats["empty_bg"] = stats.get("empty_bg", 0) + 1
    zero = cam.new_zeros(())
    frc = torch.stack(frcs).mean() if frcs else zero
    brc = torch.stack(brcs).mean() if brcs else zero
    return total_loss(frc, brc, reg_loss(cam), weights)

