"""The compiled kernels and the numpy fallback must agree bit for bit."""

import numpy as np
import pytest

from qaclims import _kernels_py, kernels

compiled = pytest.importorskip("qaclims._kernels")


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("seed", range(5))
def test_fat_regions_parity(seed):
    rng = np.random.default_rng(seed)
    p = rng.random(997)
    p[::7] = p[3]  # ties
    theta = 0.3 * p.max()
    for a, b in zip(compiled.fat_regions(p, theta), _kernels_py.fat_regions(p, theta)):
        assert np.asarray(a).dtype == np.asarray(b).dtype
        assert np.array_equal(np.asarray(a), np.asarray(b))


@pytest.mark.parametrize("seed", range(5))
def test_confusion_parity(seed):
    rng = np.random.default_rng(seed)
    n = 6
    gt = rng.integers(0, n, 2000).astype(np.int64)
    gt[rng.random(2000) < 0.1] = 255
    pred = rng.integers(0, n, 2000).astype(np.int64)
    c1 = np.zeros((n, n), np.int64)
    c2 = np.zeros((n, n), np.int64)
    compiled.confusion_update(c1, pred, gt, 255)
    _kernels_py.confusion_update(c2, pred, gt, 255)
    assert np.array_equal(c1, c2)


def test_confusion_rejects_out_of_range():
    for impl in (compiled, _kernels_py):
        conf = np.zeros((3, 3), np.int64)
        with pytest.raises(ValueError):
            impl.confusion_update(conf, np.array([0, 5], np.int64), np.array([0, 1], np.int64), 255)


@pytest.mark.parametrize("seed", range(5))
def test_cam_argmax_parity(seed):
    rng = np.random.default_rng(seed)
    maps = np.round(rng.random((3, 500)), 1)  # coarse values force ties
    ids = np.array([2, 5, 9], np.int64)
    a = compiled.cam_argmax(maps, ids, 0.4)
    b = _kernels_py.cam_argmax(maps, ids, 0.4)
    assert np.array_equal(np.asarray(a), b)


@pytest.mark.parametrize("shape,target", [((8, 8), (64, 64)), ((3, 5), (7, 11)), ((1, 1), (4, 4)), ((4, 4), (4, 4))])
def test_upsample_parity(shape, target):
    src = np.random.default_rng(0).random(shape)
    a = np.asarray(compiled.bilinear_upsample(src, *target))
    b = _kernels_py.bilinear_upsample(src, *target)
    assert np.array_equal(a, b)


def test_upsample_matches_torch():
    import torch
    import torch.nn.functional as F

    src = np.random.default_rng(1).random((5, 6))
    ours = kernels.bilinear_upsample(src, 17, 23)
    ref = F.interpolate(torch.as_tensor(src)[None, None], size=(17, 23), mode="bilinear", align_corners=True)
    np.testing.assert_allclose(ours, ref[0, 0].numpy(), atol=1e-12)
