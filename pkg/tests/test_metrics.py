import json

import numpy as np
import pytest

from pointnu.metrics import (PER_CLASS_KEYS, REPORT_KEYS, aggregate, as_instance_map,
                             evaluate_image, greedy_center_pairs, gt_centroids, match_instances,
                             panoptic_quality, pq_from_counts)


def random_scene(rng, size=32, max_n=6):
    m = np.zeros((size, size), np.int64)
    n = int(rng.integers(0, max_n + 1))
    for k in range(1, n + 1):
        y, x = rng.integers(0, size - 4, 2)
        h, w = rng.integers(3, 12, 2)
        m[y:y + h, x:x + w] = k
    # painting order may erase ids; keep whatever survives
    return m


def brute_match(pm, gm):
    """All-pairs IoU, then greedy pairing in descending IoU over pairs above 0.5."""
    pids = [i for i in np.unique(pm) if i]
    gids = [j for j in np.unique(gm) if j]
    cand = []
    for p in pids:
        for g in gids:
            a, b = pm == p, gm == g
            iou = (a & b).sum() / (a | b).sum()
            if iou > 0.5:
                cand.append((iou, p, g))
    used_p, used_g, pairs = set(), set(), []
    for iou, p, g in sorted(cand, reverse=True):
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((int(p), int(g), float(iou)))
    return sorted(pairs), len(pids) - len(pairs), len(gids) - len(pairs)


class TestMatching:
    def test_identity(self):
        m = np.zeros((8, 8), int)
        m[:3, :3], m[5:, 5:] = 1, 2
        r = match_instances(m, m)
        assert [p[2] for p in r.pairs] == [1.0, 1.0] and not r.unmatched_gt and not r.unmatched_pred

    def test_empty_pred(self):
        g = np.zeros((8, 8), int)
        g[0, 0], g[2, 2], g[4, 4] = 1, 2, 3
        assert len(match_instances(np.zeros_like(g), g).unmatched_gt) == 3

    def test_overlapping_stack_rejected(self):
        s = np.zeros((2, 4, 4), bool)
        s[:, 1, 1] = True
        with pytest.raises(ValueError):
            as_instance_map(s)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pm, gm = random_scene(rng), random_scene(rng)
            r = match_instances(pm, gm)
            pairs, fp, fn = brute_match(pm, gm)
            assert sorted(r.pairs) == pytest.approx(pairs)
            assert (len(r.unmatched_pred), len(r.unmatched_gt)) == (fp, fn)
            dq, sq, pq = panoptic_quality(r)
            assert abs(pq - dq * sq) < 1e-9 and 0 <= pq <= 1

    def test_id_permutation_invariance(self):
        rng = np.random.default_rng(1)
        pm, gm = random_scene(rng), random_scene(rng)
        ids = np.unique(pm)[1:]
        lut = np.zeros(pm.max() + 1, int)
        lut[ids] = rng.permutation(ids)
        assert panoptic_quality(match_instances(lut[pm], gm)) == panoptic_quality(match_instances(pm, gm))


class TestPQ:
    def test_single_pair(self):
        assert pq_from_counts(1, 0, 0, 0.6) == (1.0, 0.6, 0.6)

    def test_tp_fp_fn(self):
        dq, sq, pq = pq_from_counts(1, 1, 1, 0.8)
        assert (dq, sq) == (0.5, 0.8) and pq == pytest.approx(0.4, abs=1e-15)

    def test_no_tp(self):
        assert pq_from_counts(0, 2, 3, 0.0) == (0.0, 0.0, 0.0)

    def test_hand_maps(self):
        g = np.zeros((10, 10), int)
        g[0:10, 0:5] = 1  # 50 px
        p = np.zeros_like(g)
        p[0:10, 0:3] = 1  # 30 px inside: IoU 0.6
        assert panoptic_quality(match_instances(p, g)) == pytest.approx((1.0, 0.6, 0.6))


def _eval(pm, pcls, gm, gcls, C=2, radius=12.0, centres=None, tissue=None):
    n = len(pcls)
    if centres is None:
        centres = gt_centroids(pm, n)
    return evaluate_image(pm, pcls, centres, gm, gcls, C, radius, tissue)


class TestAggregate:
    def test_perfect(self):
        g = np.zeros((32, 32), int)
        g[2:8, 2:8], g[20:30, 20:30] = 1, 2
        rep = aggregate([_eval(g, {1: 1, 2: 2}, g, {1: 1, 2: 2})], 2)
        assert rep.bPQ == rep.mPQ == 1.0 and rep.detection["F1"] == 1.0
        assert all(v["F1"] == 1.0 for v in rep.classification.values())
        assert all(rep.size_buckets[b]["F1"] in (0.0, 1.0) for b in ("small", "medium", "large"))

    def test_pooled_mpq_oracle(self):
        g1 = np.zeros((32, 32), int)
        g1[0:10, 0:10], g1[15:25, 15:25] = 1, 2
        p1 = np.zeros_like(g1)
        p1[0:10, 0:8] = 1  # IoU 0.8 class 1
        p1[15:25, 15:22] = 2  # IoU 0.7 class 2
        g2 = np.zeros_like(g1)
        g2[0:10, 0:10] = 1
        p2 = np.zeros_like(g1)
        p2[20:30, 20:30] = 1  # FP + FN on class 1
        e = [_eval(p1, {1: 1, 2: 2}, g1, {1: 1, 2: 2}), _eval(p2, {1: 1}, g2, {1: 1})]
        rep = aggregate(e, 2)
        c1 = pq_from_counts(1, 1, 1, 0.8)[2]
        c2 = pq_from_counts(1, 0, 0, 0.7)[2]
        assert rep.mPQ == pytest.approx((c1 + c2) / 2, abs=1e-12)
        assert rep.bPQ == pytest.approx(pq_from_counts(2, 1, 1, 1.5)[2], abs=1e-12)
        # per-image average: image 1 has both classes, image 2 only class 1
        assert rep.mPQ_image_avg == pytest.approx(((0.8 + 0.7) / 2 + 0.0) / 2)

    def test_absent_class_excluded(self):
        g = np.zeros((16, 16), int)
        g[:4, :4] = 1
        rep = aggregate([_eval(g, {1: 1}, g, {1: 1}, C=3)], 3)
        assert rep.mPQ == 1.0

    def test_binary_equals_multiclass_when_single_class(self):
        rng = np.random.default_rng(5)
        evals = []
        for _ in range(5):
            pm, gm = random_scene(rng), random_scene(rng)
            pm = np.unique(pm, return_inverse=True)[1].reshape(pm.shape)
            gm = np.unique(gm, return_inverse=True)[1].reshape(gm.shape)
            evals.append(_eval(pm, {i: 1 for i in range(1, pm.max() + 1)}, gm,
                               {i: 1 for i in range(1, gm.max() + 1)}, C=1))
        rep = aggregate(evals, 1)
        assert rep.bPQ == pytest.approx(rep.mPQ, abs=1e-12)

    def test_two_preds_one_gt(self):
        g = np.zeros((40, 40), int)
        g[10:20, 10:20] = 1
        p = np.zeros_like(g)
        p[10:20, 10:15], p[10:20, 15:20] = 1, 2
        cents = np.array([[14.5, 14.5], [17.0, 14.5]])
        e = _eval(p, {1: 1, 2: 1}, g, {1: 1}, centres=cents)
        assert e.det_pairs == [(0, 0)]
        det = aggregate([e], 2).detection
        assert (det["TP"], det["FP"], det["FN"]) == (1, 1, 0)

    def test_no_predictions(self):
        g = np.zeros((16, 16), int)
        g[:4, :4] = 1
        det = aggregate([_eval(np.zeros_like(g), {}, g, {1: 1})], 2).detection
        assert det["P"] == 0.0 and det["R"] == 0.0

    def test_equal_areas_all_medium(self):
        g = np.zeros((32, 32), int)
        g[0:4, 0:4], g[10:14, 10:14], g[20:24, 20:24] = 1, 2, 3
        sb = aggregate([_eval(g, {1: 1, 2: 1, 3: 1}, g, {1: 1, 2: 1, 3: 1})], 2).size_buckets
        assert sb["medium"]["TP"] == 3 and sb["small"]["TP"] == sb["large"]["TP"] == 0

    def test_drop_small_bucket(self):
        g = np.zeros((64, 64), int)
        sizes = [2, 3, 5, 5, 6, 6, 9, 10]
        x = 0
        for k, s in enumerate(sizes, start=1):
            g[0:s, x:x + s] = k
            x += s + 2
        gcls = {k: 1 for k in range(1, len(sizes) + 1)}
        full = aggregate([_eval(g, gcls, g, gcls)], 1).size_buckets
        lo = full["thresholds"][0]
        areas = np.bincount(g.ravel())[1:]
        keep = [k for k in range(1, len(sizes) + 1) if areas[k - 1] >= lo]
        p = np.zeros_like(g)
        for i, k in enumerate(keep, start=1):
            p[g == k] = i
        ab = aggregate([_eval(p, {i: 1 for i in range(1, len(keep) + 1)}, g, gcls)], 1).size_buckets
        assert full["small"]["F1"] == 1.0 and ab["small"]["F1"] == 0.0
        assert ab["medium"] == full["medium"] and ab["large"] == full["large"]

    def test_schema_and_files(self, tmp_path):
        g = np.zeros((16, 16), int)
        g[:4, :4] = 1
        rep = aggregate([_eval(g, {1: 1}, g, {1: 1}, tissue="Breast")], 2, ["a", "b"])
        d = rep.to_dict()
        assert tuple(d) == REPORT_KEYS
        assert all(tuple(v) == PER_CLASS_KEYS for v in d["per_class"].values())
        assert "Breast" in d["per_tissue"]
        txt, js = rep.write(tmp_path)
        assert json.loads(js.read_text())["bPQ"] == 1.0 and "bPQ" in txt.read_text()


def test_greedy_pairs_ascending_distance():
    pairs = greedy_center_pairs([[0, 0], [5, 0]], [[4, 0], [30, 0]], 12)
    assert pairs == [(1, 0)]
