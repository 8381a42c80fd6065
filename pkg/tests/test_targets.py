import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointnu.data import InstanceAnnotation
from pointnu.targets import (gaussian_radius, gaussian_sigma, instance_center, render_heatmap,
                             resolve_center_collisions)

from conftest import square_annotation


def box_iou(h, w, dy0, dx0, dy1, dx1):
    """IoU of the box [0,h]x[0,w] with the one whose corners moved by the given offsets."""
    a0y, a0x, a1y, a1x = 0.0, 0.0, h, w
    b0y, b0x, b1y, b1x = dy0, dx0, h + dy1, w + dx1
    ih = max(0.0, min(a1y, b1y) - max(a0y, b0y))
    iw = max(0.0, min(a1x, b1x) - max(a0x, b0x))
    inter = ih * iw
    area_b = max(0.0, b1y - b0y) * max(0.0, b1x - b0x)
    return inter / (h * w + area_b - inter)


def brute_radius(h, w, m=0.7):
    """Largest r on a 0.01 grid for which every corner-displacement case keeps IoU >= m."""
    best = 0.0
    for r in np.arange(0.1, 12.0 + 1e-9, 0.01):
        cases = (
            box_iou(h, w, r, r, r, r),  # both corners shifted the same way
            box_iou(h, w, r, r, -r, -r),  # shrunk
            box_iou(h, w, -r, -r, r, r),  # grown
        )
        if min(cases) >= m:
            best = r
        else:
            break
    return best


class TestCenter:
    def test_square(self):
        m = np.zeros((5, 5), bool)
        m[0:3, 0:3] = True
        assert instance_center(m) == (1, 1)

    def test_single_pixel(self):
        m = np.zeros((12, 8), bool)
        m[9, 5] = True
        assert instance_center(m) == (5, 9)

    def test_c_shape_snaps_to_nearest(self):
        m = np.zeros((15, 15), bool)
        m[2:13, 2:5] = True
        m[2:5, 2:13] = True
        m[10:13, 2:13] = True
        ys, xs = np.nonzero(m)
        cy, cx = ys.mean(), xs.mean()
        assert not m[int(math.floor(cy + 0.5)), int(math.floor(cx + 0.5))]
        d = (ys - cy) ** 2 + (xs - cx) ** 2
        best = [(int(x), int(y)) for x, y, dd in zip(xs, ys, d) if dd == d.min()]
        assert instance_center(m) in best

    def test_empty(self):
        with pytest.raises(ValueError):
            instance_center(np.zeros((3, 3), bool))


class TestSigma:
    def test_clamp(self):
        assert gaussian_sigma(1, 1, 4) == pytest.approx(1 / 3)

    @pytest.mark.parametrize("h,w", [(48, 48), (40, 24), (64, 32), (80, 80)])
    def test_brute_force_oracle(self, h, w):
        r = brute_radius(h / 4, w / 4)
        assert gaussian_sigma(h, w, 4) == pytest.approx(max(r, 1) / 3, abs=0.05)
        assert gaussian_radius(h / 4, w / 4) == pytest.approx(r, abs=0.011)

    @given(st.floats(1, 200), st.floats(1, 200), st.floats(0, 50))
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, h, w, dh):
        assert gaussian_sigma(h + dh, w, 4) >= gaussian_sigma(h, w, 4) - 1e-12
        assert gaussian_sigma(h, w + dh, 4) >= gaussian_sigma(h, w, 4) - 1e-12


class TestRender:
    def test_empty(self):
        t = render_heatmap(InstanceAnnotation.empty((32, 32), 2), 32, 32)
        assert not t.Y.any() and t.positives == []

    def test_single_instance_channel(self):
        ann = square_annotation((64, 64), [(10, 10, 30, 30)], [2], num_classes=3)
        t = render_heatmap(ann, 64, 64, R=4)
        assert not t.Y[0].any() and not t.Y[2].any()
        cx, cy = t.centers[1]
        assert t.Y[1, cy, cx] == 1.0 and t.Y.max() == 1.0
        assert (cx, cy) == (20 // 4, 20 // 4)

    def test_two_gaussians_pointwise_max(self):
        # large boxes so sigma is well above the clamp
        ann = square_annotation((256, 256), [(20, 20, 120, 120), (60, 90, 160, 190)], [1, 1], num_classes=1)
        t = render_heatmap(ann, 256, 256, R=4)
        h, w = t.Y.shape[1:]
        yy, xx = np.mgrid[0:h, 0:w]
        expect = np.zeros((h, w))
        for k, (y0, x0, y1, x1) in zip((1, 2), [(20, 20, 120, 120), (60, 90, 160, 190)]):
            cx, cy = t.centers[k]
            s = gaussian_sigma(y1 - y0, x1 - x0, 4)
            r = math.ceil(3 * s - 1e-9)
            g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
            g[(np.abs(xx - cx) > r) | (np.abs(yy - cy) > r)] = 0
            expect = np.maximum(expect, g)
        np.testing.assert_allclose(t.Y[0], expect, atol=1e-12)

    def test_positives_owned_by_argmax(self):
        ann = square_annotation((128, 128), [(10, 10, 70, 70), (30, 40, 90, 100)], [1, 2])
        t = render_heatmap(ann, 128, 128, R=4)
        ids = {k for *_, k in t.positives}
        assert ids == {1, 2}
        for x, y, c, k in t.positives:
            assert t.Y[c - 1, y, x] > t.tau
            assert ann.class_of[k] == c

    def test_id_permutation_invariance(self):
        boxes = [(4, 4, 20, 20), (30, 8, 50, 30), (40, 40, 60, 60)]
        a = square_annotation((64, 64), boxes, [1, 2, 1])
        b = square_annotation((64, 64), boxes[::-1], [1, 2, 1][::-1])
        np.testing.assert_array_equal(render_heatmap(a).Y, render_heatmap(b).Y)

    def test_centerpoint_mode(self):
        ann = square_annotation((64, 64), [(10, 10, 30, 30)], [1])
        t = render_heatmap(ann, mode="centerpoint-map")
        assert t.Y.sum() == 1.0

    def test_indivisible(self):
        ann = square_annotation((30, 30), [(0, 0, 4, 4)], [1])
        with pytest.raises(ValueError):
            render_heatmap(ann, 30, 30, R=4)


class TestCollisions:
    def test_identity(self):
        out = resolve_center_collisions([(2, 2, 1), (10, 10, 2)], {1: 5, 2: 5}, 4)
        assert out == [(0, 0, 1), (2, 2, 2)]

    def test_smaller_moves(self):
        inst = np.zeros((16, 16), np.int32)
        inst[0:8, 0:2] = 1  # large
        inst[0:3, 2:5] = 2  # small, reaches into cell (1, 0) through column 4
        centers = [(1, 1, 1), (3, 1, 2)]  # both quantize to cell (0, 0)
        out = resolve_center_collisions(centers, {1: 16, 2: 9}, 4, inst)
        cells = {k: (x, y) for x, y, k in out}
        assert cells[1] == (0, 0)
        assert cells[2] == (1, 0)

    def test_degenerate_dropped(self):
        inst = np.zeros((8, 8), np.int32)
        inst[0:4, 0:4] = 1
        inst[1, 1] = 2
        with pytest.warns(UserWarning, match="dropped"):
            out = resolve_center_collisions([(1, 1, 1), (1, 1, 2)], {1: 15, 2: 1}, 4, inst)
        assert out == [(0, 0, 1)]

    def test_render_supervises_both(self):
        inst = np.zeros((16, 16), np.int32)
        inst[0:4, 0:2] = 1
        inst[0:4, 2:6] = 2
        ann = InstanceAnnotation(inst, {1: 1, 2: 1}, 1)
        t = render_heatmap(ann, R=4)
        assert len(set(t.centers.values())) == 2
        assert {k for *_, k in t.positives} == {1, 2}
