import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noduledet import geometry as G

import oracles

positive = st.floats(0.5, 200.0, allow_nan=False)
coord = st.floats(-300.0, 300.0, allow_nan=False)
boxes = st.builds(G.Box, coord, coord, positive, positive)


def random_boxes(rng, n, lo=0.0, hi=60.0):
    centers = rng.uniform(lo, hi, size=(n, 2))
    sizes = rng.uniform(2.0, 25.0, size=(n, 2))
    return np.hstack([centers, sizes])


class TestBox:
    def test_rejects_non_positive_extent(self):
        with pytest.raises(ValueError):
            G.Box(0, 0, 0.0, 1.0)

    @given(boxes)
    def test_corner_round_trip(self, b):
        x1, y1, x2, y2 = b.corners()
        assert x1 < x2 and y1 < y2
        back = G.Box.from_corners(x1, y1, x2, y2)
        assert back.as_array() == pytest.approx(b.as_array(), rel=1e-12, abs=1e-9)


class TestAnchors:
    def test_single_anchor(self):
        a = G.generate_anchors((1, 1), 4, [4])
        np.testing.assert_array_equal(a.boxes, [[2.0, 2.0, 4.0, 4.0]])

    def test_six_sizes_on_2x2(self):
        a = G.generate_anchors((2, 2), 4)
        assert len(a.boxes) == 24
        assert tuple(a.sizes) == (4, 6, 10, 16, 22, 32)

    def test_150x150_matches_enumeration(self):
        a = G.generate_anchors((150, 150), 4)
        assert len(a.boxes) == 135000
        expected = np.array(
            [((c + 0.5) * 4, (r + 0.5) * 4, s, s) for r in range(150) for c in range(150) for s in G.ANCHOR_SIZES]
        )
        np.testing.assert_array_equal(a.boxes, expected)

    def test_border_anchors_flagged_not_clipped(self):
        a = G.generate_anchors((2, 2), 4, [16])
        assert not a.inside(8, 8).any()
        np.testing.assert_array_equal(a.boxes[:, 2], 16.0)


class TestIoU:
    def test_identity(self):
        b = G.Box(3, 4, 5, 6)
        assert G.iou(b, b) == 1.0

    def test_disjoint(self):
        assert G.iou(G.Box(0, 0, 2, 2), G.Box(10, 10, 2, 2)) == 0.0

    def test_one_seventh(self):
        a = G.Box.from_corners(0, 0, 2, 2)
        b = G.Box.from_corners(1, 1, 3, 3)
        assert G.iou(a, b) == pytest.approx(1 / 7, abs=1e-15)

    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        ab, ba = G.iou(a, b), G.iou(b, a)
        assert ab == pytest.approx(ba, abs=1e-15)
        assert 0.0 <= ab <= 1.0 + 1e-15

    def test_matrix_matches_pairwise_oracle(self, rng):
        a, b = random_boxes(rng, 15), random_boxes(rng, 9)
        m = G.iou_matrix(a, b)
        for i in range(15):
            for j in range(9):
                ref = oracles.iou_corners(oracles.center_to_corners(a[i]), oracles.center_to_corners(b[j]))
                assert abs(m[i, j] - ref) <= 1e-12


class TestEncoding:
    def test_identity_delta(self):
        b = G.Box(5, 5, 8, 8)
        assert G.encode_box(b, b).as_array() == pytest.approx([0, 0, 0, 0], abs=0)

    def test_doubling(self):
        d = G.encode_box(G.Box(0, 0, 10, 10), G.Box(0, 0, 20, 20))
        assert d.as_array() == pytest.approx([0, 0, math.log(2), math.log(2)], abs=1e-15)

    def test_rejects_non_positive_gt(self):
        with pytest.raises(ValueError):
            G.encode(np.array([[0, 0, 4, 4.0]]), np.array([[0, 0, 0, 4.0]]))

    def test_seeded_round_trip(self):
        rng = np.random.default_rng(0)
        anchors, gts = random_boxes(rng, 1000), random_boxes(rng, 1000)
        back = G.decode(anchors, G.encode(anchors, gts))
        assert np.max(np.abs(back - gts)) < 1e-9

    @given(boxes, boxes)
    def test_round_trip_property(self, anchor, gt):
        back = G.decode_box(anchor, G.encode_box(anchor, gt))
        assert back.as_array() == pytest.approx(gt.as_array(), rel=1e-9, abs=1e-9)


class TestAssignment:
    def test_no_gts_all_negative(self):
        a = G.generate_anchors((3, 3), 4, [4, 6])
        res = G.assign_anchors(a.boxes, np.zeros((0, 4)))
        assert np.all(res.labels == G.NEGATIVE)

    def test_exact_match_is_positive(self):
        a = G.generate_anchors((4, 4), 4, [4, 10])
        gt = a.boxes[13:14]
        res = G.assign_anchors(a.boxes, gt)
        assert res.labels[13] == G.POSITIVE
        assert res.matched[13] == 0

    def test_argmax_rescues_low_overlap_gt(self):
        anchors = np.array([[10.0, 10.0, 4.0, 4.0], [40.0, 40.0, 4.0, 4.0]])
        gt = np.array([[11.0, 11.0, 6.0, 6.0]])
        res = G.assign_anchors(anchors, gt)
        assert res.max_iou[0] < 0.7
        assert res.labels.tolist() == [G.POSITIVE, G.NEGATIVE]

    def test_outside_anchors_ignored(self):
        anchors = np.array([[1.0, 1.0, 8.0, 8.0], [20.0, 20.0, 4.0, 4.0]])
        res = G.assign_anchors(anchors, np.zeros((0, 4)), inside=np.array([False, True]))
        assert res.labels.tolist() == [G.IGNORE, G.NEGATIVE]

    @pytest.mark.parametrize("seed", range(5))
    def test_random_scene_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        anchors = G.generate_anchors((6, 6), 4).boxes
        gts = random_boxes(rng, int(rng.integers(1, 4)), 4, 20)
        inside = rng.random(len(anchors)) > 0.2
        res = G.assign_anchors(anchors, gts, 0.7, 0.3, inside=inside)
        assert res.labels.tolist() == oracles.assign_loops(anchors, gts, 0.7, 0.3, inside)


class TestNms:
    def test_single_box(self):
        assert G.nms(np.array([[1, 1, 2, 2.0]]), np.array([0.3]), 0.5) == [0]

    def test_identical_pair(self):
        b = np.array([[5, 5, 4, 4.0], [5, 5, 4, 4.0]])
        assert G.nms(b, np.array([0.8, 0.9]), 0.5) == [1]

    def test_tie_prefers_lower_index(self):
        b = np.array([[5, 5, 4, 4.0], [5, 5, 4, 4.0]])
        assert G.nms(b, np.array([0.5, 0.5]), 0.5) == [0]

    def test_fifty_random_boxes(self, rng):
        b = random_boxes(rng, 50)
        s = rng.random(50)
        assert G.nms(b, s, 0.4) == oracles.nms_loops(b, s, 0.4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 1.0))
    def test_kept_set_is_antichain(self, seed, thresh):
        rng = np.random.default_rng(seed)
        b = random_boxes(rng, 30)
        s = rng.random(30)
        keep = G.nms(b, s, thresh)
        assert keep == sorted(keep, key=lambda i: (-s[i], i))
        m = G.iou_matrix(b[keep], b[keep])
        np.fill_diagonal(m, 0.0)
        assert np.all(m <= thresh)
