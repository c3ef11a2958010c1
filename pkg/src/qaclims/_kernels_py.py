"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def fat_regions(p, theta):
    p = np.asarray(p, dtype=np.float64)
    b = p >= theta
    rf = np.where(b, p, 0.0)
    rb = np.where(b, 0.0, 1.0 - p)
    return b.astype(np.uint8), rf, rb


def confusion_update(conf, pred, gt, ignore_index):
    keep = gt != ignore_index
    g = gt[keep]
    q = pred[keep]
    nc = conf.shape[0]
    bad = (g < 0) | (g >= nc) | (q < 0) | (q >= nc)
    if bad.any():
        i = int(np.flatnonzero(keep)[np.argmax(bad)])
        raise ValueError(f"label out of range at pixel {i}: gt={gt[i]} pred={pred[i]}")
    conf += np.bincount(g * nc + q, minlength=nc * nc).reshape(nc, nc)


def cam_argmax(maps, class_ids, bg_threshold):
    n = maps.shape[1]
    best = np.full(n, bg_threshold, dtype=np.float64)
    out = np.zeros(n, dtype=np.int64)
    for j in range(maps.shape[0]):
        win = maps[j] > best
        best = np.where(win, maps[j], best)
        out[win] = class_ids[j]
    return out


def bilinear_upsample(src, th, tw):
    sh, sw = src.shape
    sy = (sh - 1) / float(th - 1) if th > 1 else 0.0
    sx = (sw - 1) / float(tw - 1) if tw > 1 else 0.0
    fy = np.arange(th, dtype=np.float64) * sy
    fx = np.arange(tw, dtype=np.float64) * sx
    y0 = np.minimum(fy.astype(np.intp), sh - 1)
    x0 = np.minimum(fx.astype(np.intp), sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    top = (1.0 - wx) * src[y0][:, x0] + wx * src[y0][:, x1]
    bot = (1.0 - wx) * src[y1][:, x0] + wx * src[y1][:, x1]
    return (1.0 - wy) * top + wy * bot
