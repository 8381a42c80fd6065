"""The numba and numpy twins of every kernel must agree (integer outputs exactly)."""
import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from pointnu import kernels
from pointnu.kernels import KERNELS


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_splat(seed):
    rng = np.random.default_rng(seed)
    n, h, w = int(rng.integers(0, 12)), 16, 20
    args = (rng.integers(0, w, n), rng.integers(0, h, n), rng.integers(0, 2, n), rng.uniform(0.3, 3, n),
            np.arange(1, n + 1))
    outs = []
    for fn in KERNELS["splat_gaussians"]:
        Y, ov, oid = np.zeros((2, h, w)), np.zeros((h, w)), np.zeros((h, w), np.int64)
        fn(Y, ov, oid, *args)
        outs.append((Y, ov, oid))
    (Y1, ov1, id1), (Y2, ov2, id2) = outs
    # the two exp implementations may differ in the last ulp
    np.testing.assert_allclose(Y1, Y2, rtol=1e-15, atol=0)
    np.testing.assert_allclose(ov1, ov2, rtol=1e-15, atol=0)
    np.testing.assert_array_equal(id1, id2)


@given(hnp.arrays(np.float64, (2, 9, 11), elements=st.sampled_from([0.0, 0.3, 0.5, 0.7, 0.9])))
@settings(max_examples=100, deadline=None)
def test_local_peaks(heat):
    fast, slow = KERNELS["local_peaks"]
    np.testing.assert_array_equal(fast(heat, 0.4), slow(heat, 0.4))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_contingency_paint_iou(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 5, (12, 13)).astype(np.int32)
    b = rng.integers(0, 4, (12, 13)).astype(np.int32)
    f, s = KERNELS["contingency"]
    np.testing.assert_array_equal(f(a, b, 4, 3), s(a, b, 4, 3))
    masks = rng.random((int(rng.integers(0, 6)), 10, 10)) > 0.6
    f, s = KERNELS["paint_by_priority"]
    np.testing.assert_array_equal(f(masks), s(masks))
    if len(masks):
        f, s = KERNELS["mask_iou"]
        np.testing.assert_allclose(f(masks), s(masks), rtol=0, atol=1e-15)


def test_plateau_in_numpy_path():
    h = np.zeros((1, 6, 6))
    h[0, 1:3, 1:4] = 0.8
    h[0, 4, 4] = 0.8
    keep = kernels.local_peaks_numpy(h, 0.4)
    assert np.argwhere(keep[0]).tolist() == [[1, 1], [4, 4]]


def test_dispatch_flag():
    code = "import pointnu.kernels as k; print(k.local_peaks is k.local_peaks_numpy)"
    for flag, expect in (("1", "True"), ("0", "False")):
        out = subprocess.run([sys.executable, "-c", code], env={**os.environ,
                             "POINTNU_DISABLE_NUMBA": flag}, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == expect
