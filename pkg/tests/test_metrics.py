import numpy as np
import pytest

from pcldet.geometry import Detection, iou
from pcldet.metrics import (
    average_precision,
    class_score_matrix,
    corloc,
    detect,
    evaluate,
    read_detections,
    score_detection_file,
    write_detections,
)
from pcldet.model import embed, forward_basic, forward_refined, init_params

from oracles import pair_iou


def det(box, class_id, score):
    return Detection(box=box, class_id=class_id, score=score)


GT_BOX_A = (0.0, 0.0, 10.0, 10.0)
GT_BOX_B = (30.0, 30.0, 40.0, 40.0)


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = {"i1": [(GT_BOX_A, 1)], "i2": [(GT_BOX_B, 1)]}
        dets = [("i1", det(GT_BOX_A, 1, 0.9)), ("i2", det(GT_BOX_B, 1, 0.8))]
        assert average_precision(dets, gts, 1) == 1.0

    def test_zero_true_positives(self):
        gts = {"i1": [(GT_BOX_A, 1)]}
        dets = [("i1", det((50.0, 50.0, 60.0, 60.0), 1, 0.9))]
        assert average_precision(dets, gts, 1) == 0.0

    def test_hand_derived_tp_fp_tp_example(self):
        gts = {"i1": [(GT_BOX_A, 1), (GT_BOX_B, 1)]}
        dets = [
            ("i1", det(GT_BOX_A, 1, 0.9)),                    # TP
            ("i1", det((60.0, 60.0, 70.0, 70.0), 1, 0.8)),    # FP
            ("i1", det(GT_BOX_B, 1, 0.7)),                    # TP
        ]
        assert average_precision(dets, gts, 1) == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_each_groundtruth_matches_once(self):
        gts = {"i1": [(GT_BOX_A, 1)]}
        dets = [
            ("i1", det(GT_BOX_A, 1, 0.9)),
            ("i1", det(GT_BOX_A, 1, 0.8)),  # duplicate: FP, not a second TP
        ]
        # one TP then one FP over one groundtruth: AP stays 1.0 only until
        # recall 1.0 is reached at rank 1, so AP = 1.0
        assert average_precision(dets, gts, 1) == 1.0
        # reversed scores: the 0.9 duplicate still leaves one TP
        gts2 = {"i1": [(GT_BOX_A, 1), (GT_BOX_B, 1)]}
        dets2 = [
            ("i1", det(GT_BOX_A, 1, 0.9)),
            ("i1", det(GT_BOX_A, 1, 0.8)),
            ("i1", det(GT_BOX_B, 1, 0.7)),
        ]
        assert average_precision(dets2, gts2, 1) == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_invariant_under_monotone_score_rescaling(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            gts = {}
            dets = []
            for i in range(6):
                iid = f"i{i}"
                gx, gy = rng.uniform(0, 30, 2)
                gts[iid] = [((gx, gy, gx + 8, gy + 8), 1)]
                x, y = rng.uniform(0, 30, 2)
                dets.append((iid, det((x, y, x + 8, y + 8), 1, float(rng.uniform()))))
                if rng.uniform() < 0.5:
                    box = gts[iid][0][0]
                    dets.append((iid, det(box, 1, float(rng.uniform()))))
            base = average_precision(dets, gts, 1)
            scaled = [
                (iid, det(d.box, 1, 3.0 * d.score ** 3 + 1.0)) for iid, d in dets
            ]
            assert average_precision(scaled, gts, 1) == pytest.approx(base, abs=1e-12)

    def test_no_groundtruth_warns_and_returns_none(self):
        with pytest.warns(UserWarning, match="no groundtruth"):
            assert average_precision([], {"i1": [(GT_BOX_A, 2)]}, 1) is None


class TestCorLoc:
    def test_counting_rule(self):
        # top-IoU values 0.6, 0.4, 0.9 over three positive images -> 2/3
        gts = {}
        tops = {}
        for i, target in enumerate((0.6, 0.4, 0.9)):
            iid = f"i{i}"
            gts[iid] = [((0.0, 0.0, 10.0, 10.0), 1)]
            d = 10.0 * (1 - target) / (1 + target)
            tops[iid] = (d, 0.0, 10.0 + d, 10.0)
            assert pair_iou(tops[iid], gts[iid][0][0]) == pytest.approx(target)
        assert corloc(tops, gts, 1) == pytest.approx(2.0 / 3.0)

    def test_all_localized(self):
        gts = {f"i{i}": [(GT_BOX_A, 1)] for i in range(4)}
        tops = {f"i{i}": GT_BOX_A for i in range(4)}
        assert corloc(tops, gts, 1) == 1.0

    def test_matches_bruteforce_recheck_on_random_images(self):
        rng = np.random.default_rng(1)
        gts = {}
        tops = {}
        for i in range(50):
            iid = f"i{i}"
            x, y = rng.uniform(0, 40, 2)
            gts[iid] = [((x, y, x + 10, y + 10), 1)]
            tx, ty = rng.uniform(0, 40, 2)
            tops[iid] = (tx, ty, tx + 10, ty + 10)
        expected = sum(
            1 for iid in tops if pair_iou(tops[iid], gts[iid][0][0]) > 0.5
        ) / len(tops)
        assert corloc(tops, gts, 1) == pytest.approx(expected)

    def test_no_positive_images_warns_and_returns_none(self):
        with pytest.warns(UserWarning, match="no positive image"):
            assert corloc({}, {}, 1) is None


class TestDetect:
    def make_params(self, rng, k, c=3, raw=5, emb=4):
        return init_params(raw, emb, c, k, rng, weight_std=0.6)

    def toy_boxes(self, n):
        return np.array([[i * 15.0, 0.0, i * 15.0 + 10.0, 10.0] for i in range(n)])

    def test_single_stream_scores_equal_that_stream(self):
        rng = np.random.default_rng(2)
        params = self.make_params(rng, k=1)
        feats = rng.normal(size=(4, 5))
        scores, used_basic = class_score_matrix(feats, params)
        assert not used_basic
        F = embed(feats, params)
        expected = forward_refined(F, params, 1)[:3]
        assert np.allclose(scores, expected, atol=0)

    def test_mean_over_streams_matches_recomputation(self):
        rng = np.random.default_rng(3)
        params = self.make_params(rng, k=3)
        feats = rng.normal(size=(6, 5))
        scores, _ = class_score_matrix(feats, params)
        F = embed(feats, params)
        expected = sum(forward_refined(F, params, k)[:3] for k in (1, 2, 3)) / 3.0
        assert np.allclose(scores, expected, atol=1e-15)

    def test_k0_falls_back_to_basic_scores_with_flag(self):
        rng = np.random.default_rng(4)
        params = self.make_params(rng, k=0)
        feats = rng.normal(size=(4, 5))
        scores, used_basic = class_score_matrix(feats, params)
        assert used_basic
        F = embed(feats, params)
        expected, _ = forward_basic(F, params)
        assert np.allclose(scores, expected, atol=0)

    def test_duplicate_proposals_suppressed_by_nms(self):
        rng = np.random.default_rng(5)
        params = self.make_params(rng, k=1)
        feats = rng.normal(size=(2, 5))
        boxes = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
        feats[1] = feats[0]  # identical features too
        dets, _ = detect(boxes, feats, params, nms_threshold=0.3)
        by_class = {}
        for d in dets:
            by_class.setdefault(d.class_id, []).append(d)
        for group in by_class.values():
            assert len(group) == 1

    def test_nms_invariant_on_outputs(self):
        rng = np.random.default_rng(6)
        params = self.make_params(rng, k=2)
        boxes = np.concatenate([self.toy_boxes(3)] * 2)
        boxes[3:, 0] += 2.0  # overlapping near-duplicates
        boxes[3:, 2] += 2.0
        feats = rng.normal(size=(6, 5))
        dets, _ = detect(boxes, feats, params, nms_threshold=0.3)
        by_class = {}
        for d in dets:
            by_class.setdefault(d.class_id, []).append(d)
        for group in by_class.values():
            for i, a in enumerate(group):
                for b in group[i + 1 :]:
                    assert iou(a.box, b.box) <= 0.3


class FakeImage:
    def __init__(self, image_id, boxes, features, label_vector, groundtruth):
        self.image_id = image_id
        self.boxes = boxes
        self.features = features
        self.label_vector = label_vector
        self.groundtruth = groundtruth


class TestEvaluateAndFiles:
    def test_report_shape_and_detection_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        params = init_params(5, 4, 2, 2, rng, weight_std=0.6)
        images = []
        for i in range(4):
            boxes = np.array(
                [[0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 30.0, 10.0], [5.0, 5.0, 14.0, 14.0]]
            )
            images.append(
                FakeImage(
                    image_id=f"i{i}",
                    boxes=boxes,
                    features=rng.normal(size=(3, 5)),
                    label_vector=np.array([1.0, i % 2]),
                    groundtruth=[(boxes[0], 1)] + ([(boxes[1], 2)] if i % 2 else []),
                )
            )
        report = evaluate(images, params, collect_detections=True)
        dets = report.pop("detections")
        assert set(report["per_class"]) == {"1", "2"}
        assert report["map"] is not None
        assert 0.0 <= report["map"] <= 1.0
        assert 0.0 <= report["mean_corloc"] <= 1.0

        path = tmp_path / "dets.jsonl"
        write_detections(str(path), dets)
        loaded = read_detections(str(path))
        assert loaded == [(iid, d) for iid, d in dets]

        rescored = score_detection_file(loaded, images, 2)
        for c in ("1", "2"):
            assert rescored["per_class"][c]["ap"] == pytest.approx(
                report["per_class"][c]["ap"]
            )
            assert rescored["per_class"][c]["corloc"] == pytest.approx(
                report["per_class"][c]["corloc"]
            )
