import numpy as np
import pytest

from pcldet.errors import DataError
from pcldet.geometry import Detection, iou, iou_matrix, nms, validate_boxes

from oracles import nms_bruteforce, raster_iou


def random_boxes(rng, n, span=50.0):
    x1 = rng.uniform(0.0, span, n)
    y1 = rng.uniform(0.0, span, n)
    w = rng.uniform(1.0, span / 2, n)
    h = rng.uniform(1.0, span / 2, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


class TestIoU:
    def test_identical_boxes(self):
        assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0

    def test_disjoint_boxes(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_quarter_overlap_against_raster_oracle(self):
        a = (0.0, 0.0, 10.0, 10.0)
        b = (5.0, 5.0, 15.0, 15.0)
        value = iou(a, b)
        assert value == pytest.approx(25.0 / 175.0, abs=1e-12)
        assert value == pytest.approx(raster_iou(a, b, step=0.01), abs=5e-3)

    def test_symmetry_and_self_iou(self):
        rng = np.random.default_rng(7)
        boxes = random_boxes(rng, 30)
        for a in boxes[:10]:
            assert iou(a, a) == 1.0
        for a, b in zip(boxes[:15], boxes[15:]):
            assert iou(a, b) == pytest.approx(iou(b, a), abs=0)
            assert 0.0 <= iou(a, b) <= 1.0

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(11)
        a = random_boxes(rng, 6)
        b = random_boxes(rng, 5)
        m = iou_matrix(a, b)
        for i in range(6):
            for j in range(5):
                assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)


class TestValidateBoxes:
    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(DataError):
            validate_boxes([[0, 0, 0, 1]])
        with pytest.raises(DataError):
            validate_boxes([[0, 0, np.nan, 1]])
        with pytest.raises(DataError):
            validate_boxes([[0, 0, 1]])

    def test_accepts_single_box(self):
        out = validate_boxes((0, 0, 2, 3))
        assert out.shape == (1, 4)


class TestNMS:
    def test_high_overlap_keeps_best(self):
        a = Detection(box=(0, 0, 10, 10), class_id=1, score=0.9)
        # shifted copy with IoU 0.8 (x-shift by w*(1-t)/(1+t))
        d = 10 * (1 - 0.8) / (1 + 0.8)
        b = Detection(box=(d, 0, 10 + d, 10), class_id=1, score=0.7)
        assert iou(a.box, b.box) == pytest.approx(0.8, abs=1e-12)
        assert nms([a, b], 0.3) == [a]

    def test_single_detection(self):
        d = Detection(box=(0, 0, 1, 1), class_id=1, score=0.5)
        assert nms([d], 0.5) == [d]

    def test_empty_input(self):
        assert nms([], 0.5) == []

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            boxes = random_boxes(rng, 10, span=20.0)
            scores = rng.uniform(0.0, 1.0, 10)
            dets = [
                Detection(box=tuple(b), class_id=1, score=float(s))
                for b, s in zip(boxes, scores)
            ]
            assert nms(dets, 0.5) == nms_bruteforce(dets, 0.5)

    def test_subset_pairwise_and_idempotent(self):
        rng = np.random.default_rng(5)
        for threshold in (0.3, 0.5, 0.7):
            boxes = random_boxes(rng, 15, span=25.0)
            scores = rng.uniform(0.0, 1.0, 15)
            dets = [
                Detection(box=tuple(b), class_id=1, score=float(s))
                for b, s in zip(boxes, scores)
            ]
            kept = nms(dets, threshold)
            assert all(d in dets for d in kept)
            for i, a in enumerate(kept):
                for b in kept[i + 1 :]:
                    assert iou(a.box, b.box) <= threshold
            assert nms(kept, threshold) == kept

    def test_score_tie_keeps_lower_index(self):
        a = Detection(box=(0, 0, 10, 10), class_id=1, score=0.5)
        b = Detection(box=(1, 0, 11, 10), class_id=1, score=0.5)
        assert nms([a, b], 0.3)[0] is a
        assert nms([b, a], 0.3)[0] is b

    def test_rejects_bad_threshold(self):
        d = Detection(box=(0, 0, 1, 1), class_id=1, score=0.5)
        with pytest.raises(DataError):
            nms([d], 0.0)
        with pytest.raises(DataError):
            nms([d], 1.0)
