# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels.

Every function here has a numpy twin in ``_kernels_py`` that must return
bit-identical results; ``qaclims.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def fat_regions(const double[::1] p, double theta):
    """Binarize ``p >= theta`` and build the foreground/background regions."""
    cdef Py_ssize_t n = p.shape[0], i
    b_arr = np.empty(n, dtype=np.uint8)
    rf_arr = np.empty(n, dtype=np.float64)
    rb_arr = np.empty(n, dtype=np.float64)
    cdef unsigned char[::1] b = b_arr
    cdef double[::1] rf = rf_arr
    cdef double[::1] rb = rb_arr
    cdef double v
    for i in range(n):
        v = p[i]
        if v >= theta:
            b[i] = 1
            rf[i] = v
            rb[i] = 0.0
        else:
            b[i] = 0
            rf[i] = 0.0
            rb[i] = 1.0 - v
    return b_arr, rf_arr, rb_arr


def confusion_update(cnp.int64_t[:, ::1] conf, const cnp.int64_t[::1] pred,
                     const cnp.int64_t[::1] gt, long ignore_index):
    """Accumulate a (gt, pred) confusion matrix in place, skipping ``ignore_index``."""
    cdef Py_ssize_t n = pred.shape[0], i
    cdef Py_ssize_t nc = conf.shape[0]
    cdef cnp.int64_t g, q
    for i in range(n):
        g = gt[i]
        if g == ignore_index:
            continue
        q = pred[i]
        if g < 0 or g >= nc or q < 0 or q >= nc:
            raise ValueError(f"label out of range at pixel {i}: gt={g} pred={q}")
        conf[g, q] += 1


def cam_argmax(const double[:, ::1] maps, const cnp.int64_t[::1] class_ids,
               double bg_threshold):
    """Per-pixel argmax over ``{bg_threshold} + maps``; ties keep the earlier entry."""
    cdef Py_ssize_t k = maps.shape[0], n = maps.shape[1], i, j
    out_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef double best, v
    cdef cnp.int64_t lab
    for i in range(n):
        best = bg_threshold
        lab = 0
        for j in range(k):
            v = maps[j, i]
            if v > best:
                best = v
                lab = class_ids[j]
        out[i] = lab
    return out_arr


def bilinear_upsample(const double[:, ::1] src, Py_ssize_t th, Py_ssize_t tw):
    """Corner-aligned bilinear resize of a 2-D plane."""
    cdef Py_ssize_t sh = src.shape[0], sw = src.shape[1], y, x, y0, x0, y1, x1
    out_arr = np.empty((th, tw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double sy, sx, fy, fx, wy, wx, top, bot
    sy = (sh - 1) / <double>(th - 1) if th > 1 else 0.0
    sx = (sw - 1) / <double>(tw - 1) if tw > 1 else 0.0
    for y in range(th):
        fy = y * sy
        y0 = <Py_ssize_t>fy
        if y0 > sh - 1:
            y0 = sh - 1
        y1 = y0 + 1 if y0 + 1 < sh else sh - 1
        wy = fy - y0
        for x in range(tw):
            fx = x * sx
            x0 = <Py_ssize_t>fx
            if x0 > sw - 1:
                x0 = sw - 1
            x1 = x0 + 1 if x0 + 1 < sw else sw - 1
            wx = fx - x0
            top = (1.0 - wx) * src[y0, x0] + wx * src[y0, x1]
            bot = (1.0 - wx) * src[y1, x0] + wx * src[y1, x1]
            out[y, x] = (1.0 - wy) * top + wy * bot
    return out_arr
