import json
import math

import numpy as np
import pytest

from evifuse.errors import ValidationError
from evifuse.geometry import Box
from evifuse.heatmap import EvidenceStack
from evifuse.metrics import (
    Detection,
    GroundTruth,
    MetricsReport,
    average_precision,
    boxes_from_labelmap,
    corloc,
    harvest_detections,
    miou,
    miou_dataset,
    multilabel_prf,
    voc_map,
)
from evifuse.pixelfusion import UNCERTAIN, PixelLabelMap
from tests.oracles import corloc_reference, multilabel_reference, voc_ap_reference


def random_toy(rng):
    """Up to 20 detections and a few GT boxes over 3 images, at most 5 classes."""
    num_classes = int(rng.integers(1, 6))
    gt = GroundTruth()
    for image in range(3):
        objects = []
        for _ in range(int(rng.integers(0, 4))):
            x0, y0 = (int(v) for v in rng.integers(0, 10, size=2))
            objects.append((Box(x0, y0, x0 + int(rng.integers(2, 6)), y0 + int(rng.integers(2, 6))), int(rng.integers(0, num_classes))))
        gt.boxes[f"im{image}"] = objects
    dets = []
    for _ in range(int(rng.integers(0, 21))):
        image_id = f"im{int(rng.integers(0, 3))}"
        x0, y0 = (int(v) for v in rng.integers(0, 10, size=2))
        box = Box(x0, y0, x0 + int(rng.integers(2, 6)), y0 + int(rng.integers(2, 6)))
        confidence = float(rng.choice([0.2, 0.5, 0.7, 0.9]))
        dets.append(Detection(image_id, box, int(rng.integers(0, num_classes)), confidence))
    return dets, gt


class TestMIoU:
    def test_identical_maps(self):
        gt = np.array([[0, 1, 1], [2, 2, 0]])
        result = miou(gt, gt, 2)
        assert result.per_class == (1.0, 1.0, 1.0)
        assert result.mean == 1.0

    def test_half_overlap_rectangles(self):
        pred = np.zeros((2, 4), dtype=np.uint16)
        gt = np.zeros((2, 4), dtype=np.uint16)
        pred[:, 0:2] = 1
        gt[:, 1:3] = 1
        result = miou(pred, gt, 1)
        assert result.per_class == (1 / 3, 1 / 3)
        assert result.mean == 1 / 3

    def test_disjoint_regions(self):
        pred = np.array([[1, 0]])
        gt = np.array([[0, 1]])
        assert miou(pred, gt, 1).per_class[1] == 0.0

    def test_absent_classes_are_skipped(self):
        pred = np.array([[0, 1]])
        result = miou(pred, pred, 3)
        assert math.isnan(result.per_class[2])
        assert result.mean == 1.0

    def test_uncertain_pixels(self):
        pred = np.array([[1, UNCERTAIN]], dtype=np.uint16)
        gt = np.array([[1, 1]])
        assert miou(pred, gt, 1, exclude_uncertain=True).per_class[1] == 1.0
        assert miou(pred, gt, 1, exclude_uncertain=False).per_class[1] == 0.5

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a = rng.integers(0, 4, size=(8, 8))
        b = rng.integers(0, 4, size=(8, 8))
        assert miou(a, b, 3).per_class == miou(b, a, 3).per_class

    def test_dataset_accumulates_counts(self):
        one = (np.array([[1, 1]]), np.array([[1, 0]]))
        two = (np.array([[1, 0]]), np.array([[1, 0]]))
        result = miou_dataset([one, two], 1)
        assert result.per_class == (0.5, 2 / 3)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            miou(np.zeros((2, 2)), np.zeros((2, 3)), 1)


class TestCorLoc:
    def setup_method(self):
        self.gt = GroundTruth(boxes={"a": [(Box(0, 0, 10, 10), 0)], "b": [(Box(5, 5, 15, 15), 0), (Box(0, 0, 4, 4), 1)]})

    def test_top_detection_hits(self):
        dets = [
            Detection("a", Box(0, 0, 10, 10), 0, 0.9),
            Detection("b", Box(5, 5, 15, 15), 0, 0.8),
            Detection("b", Box(0, 0, 4, 4), 1, 0.4),
        ]
        assert corloc(dets, self.gt).mean == 1.0

    def test_no_detections(self):
        assert corloc([], self.gt).mean == 0.0

    def test_only_the_top_detection_counts(self):
        dets = [
            Detection("a", Box(0, 0, 10, 10), 0, 0.5),
            Detection("a", Box(20, 20, 30, 30), 0, 0.9),
            Detection("b", Box(5, 5, 15, 15), 0, 0.8),
        ]
        result = corloc(dets, self.gt)
        assert result.per_class == {0: 0.5, 1: 0.0}

    def test_matches_reference(self):
        rng = np.random.default_rng(50)
        for _ in range(50):
            dets, gt = random_toy(rng)
            if not gt.classes():
                continue
            assert corloc(dets, gt).per_class == corloc_reference(dets, gt.boxes)


class TestVocMap:
    def setup_method(self):
        self.gt = GroundTruth(boxes={"a": [(Box(0, 0, 10, 10), 0)], "b": [(Box(0, 0, 10, 10), 0)]})

    def test_perfect_detections(self):
        dets = [Detection("a", Box(0, 0, 10, 10), 0, 0.9), Detection("b", Box(0, 0, 10, 10), 0, 0.8)]
        assert voc_map(dets, self.gt).per_class == {0: 1.0}

    def test_zero_detections(self):
        assert voc_map([], self.gt).mean == 0.0

    def test_three_detection_case(self):
        dets = [
            Detection("a", Box(0, 0, 10, 10), 0, 0.9),
            Detection("a", Box(20, 20, 30, 30), 0, 0.8),
            Detection("b", Box(1, 0, 10, 10), 0, 0.7),
        ]
        assert voc_map(dets, self.gt).mean == pytest.approx(0.5 + 0.5 * 2 / 3)
        assert voc_map(dets, self.gt, interpolation="11point").mean == pytest.approx((6 + 5 * 2 / 3) / 11)

    def test_duplicate_detection_is_false_positive(self):
        dets = [Detection("a", Box(0, 0, 10, 10), 0, 0.9), Detection("a", Box(0, 0, 10, 10), 0, 0.8)]
        assert voc_map(dets, self.gt).mean == pytest.approx(0.5)

    def test_demoting_a_true_positive_never_helps(self):
        good = [
            Detection("a", Box(0, 0, 10, 10), 0, 0.9),
            Detection("a", Box(20, 20, 30, 30), 0, 0.6),
            Detection("b", Box(0, 0, 10, 10), 0, 0.8),
        ]
        worse = [good[0], good[1], Detection("b", Box(0, 0, 10, 10), 0, 0.1)]
        assert voc_map(worse, self.gt).mean <= voc_map(good, self.gt).mean

    def test_matches_reference(self):
        rng = np.random.default_rng(51)
        for _ in range(50):
            dets, gt = random_toy(rng)
            if not gt.classes():
                continue
            fast = voc_map(dets, gt).per_class
            slow = voc_ap_reference(dets, gt.boxes)
            assert fast.keys() == slow.keys()
            for c in fast:
                assert fast[c] == pytest.approx(slow[c], abs=1e-12)

    def test_unknown_interpolation(self):
        with pytest.raises(ValidationError):
            average_precision(np.array([1.0]), np.array([1.0]), "101point")


class TestMultilabel:
    def test_identical_predictions(self):
        gts = [[1, 0, 1], [0, 1, 0], [1, 1, 0]]
        result = multilabel_prf(np.array(gts, dtype=float), gts)
        assert all(v == 1.0 for v in result.values())

    def test_all_negative(self):
        result = multilabel_prf([[0.1, 0.2]], [[1, 1]])
        assert result["R-C"] == 0.0
        assert result["R-O"] == 0.0

    def test_hand_counted_case(self):
        scores = [[0.9, 0.6, 0.1, 0.2], [0.3, 0.8, 0.7, 0.1], [0.6, 0.4, 0.5, 0.9]]
        gts = [[1, 0, 0, 0], [0, 1, 1, 1], [1, 0, 0, 1]]
        result = multilabel_prf(scores, gts)
        # tp = [2, 1, 1, 1], fp = [0, 1, 0, 0], fn = [0, 0, 0, 1]
        assert result["P-C"] == pytest.approx((1 + 0.5 + 1 + 1) / 4)
        assert result["R-C"] == pytest.approx((1 + 1 + 1 + 0.5) / 4)
        assert result["P-O"] == pytest.approx(5 / 6)
        assert result["R-O"] == pytest.approx(5 / 6)
        assert result["F1-C"] == pytest.approx(2 * 0.875 * 0.875 / 1.75)

    def test_top_k(self):
        result = multilabel_prf([[0.9, 0.8, 0.7, 0.6]], [[1, 1, 1, 1]], topk=3)
        assert result["R-O"] == pytest.approx(0.75)
        assert result["P-O"] == 1.0

    def test_threshold_is_strict(self):
        assert multilabel_prf([[0.5]], [[1]])["R-O"] == 0.0

    def test_matches_reference(self):
        rng = np.random.default_rng(52)
        for _ in range(50):
            n, c = int(rng.integers(1, 8)), int(rng.integers(1, 6))
            scores = rng.choice([0.1, 0.5, 0.6, 0.9], size=(n, c))
            gts = (rng.random((n, c)) < 0.4).astype(int)
            for topk in (None, 3):
                fast = multilabel_prf(scores, gts, topk=topk)
                slow = multilabel_reference(scores.tolist(), gts.tolist(), topk=topk)
                assert fast == pytest.approx(slow, abs=1e-12)
                for p, r, f in (("P-C", "R-C", "F1-C"), ("P-O", "R-O", "F1-O")):
                    if fast[p] > 0 and fast[r] > 0:
                        assert fast[f] == pytest.approx(2 * fast[p] * fast[r] / (fast[p] + fast[r]))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            multilabel_prf([[0.1, 0.2]], [[1]])


class TestHarvest:
    def test_single_blob(self):
        data = np.zeros((6, 6), dtype=np.uint16)
        data[1:4, 2:5] = 3
        instances = boxes_from_labelmap(PixelLabelMap(data, 3), "img")
        assert len(instances) == 1
        assert instances[0].box == Box(2, 1, 5, 4)
        assert instances[0].class_id == 2
        assert instances[0].provenance == "harvest"

    def test_background_and_uncertain_are_ignored(self):
        data = np.zeros((4, 4), dtype=np.uint16)
        assert boxes_from_labelmap(PixelLabelMap(data, 2)) == []
        data[:] = UNCERTAIN
        assert boxes_from_labelmap(PixelLabelMap(data, 2)) == []

    def test_diagonal_blobs_are_separate(self):
        data = np.zeros((4, 4), dtype=np.uint16)
        data[0:2, 0:2] = 1
        data[2:4, 2:4] = 1
        assert [i.box for i in boxes_from_labelmap(PixelLabelMap(data, 1))] == [Box(0, 0, 2, 2), Box(2, 2, 4, 4)]

    def test_confidence_is_mean_probability(self):
        data = np.zeros((2, 2), dtype=np.uint16)
        data[0, :] = 1
        prob = np.zeros((2, 2, 2))
        prob[1, 0, :] = [0.7, 0.9]
        dets = harvest_detections(PixelLabelMap(data, 1), EvidenceStack(prob, has_background=True), "img")
        assert len(dets) == 1
        assert dets[0].confidence == pytest.approx(0.8)
        assert harvest_detections(PixelLabelMap(data, 1))[0].confidence == 1.0


class TestMetricsReport:
    def setup_method(self):
        gt = np.array([[0, 1], [1, 1]])
        self.report = MetricsReport(
            num_classes=2,
            segmentation=miou(gt, gt, 2),
            multilabel={"F1-C": 0.5},
            class_names=["cat", "dog"],
        )

    def test_summary(self):
        assert self.report.summary() == {"mIoU": 1.0, "F1-C": 0.5}

    def test_dataframe(self):
        df = self.report.to_dataframe()
        assert list(df["class"]) == ["background", "cat", "dog"]
        assert list(df.columns) == ["class", "IoU"]

    def test_json_has_no_nan(self):
        document = json.loads(self.report.to_json())
        assert document["summary"]["mIoU"] == 1.0
        assert document["per_class"][2]["IoU"] is None

    def test_tsv(self):
        assert self.report.to_tsv().splitlines()[0] == "class\tIoU"
