import numpy as np
import pytest

from snadapter.detection import (
    Box3D,
    Proposal,
    Scene,
    average_precision,
    detect,
    evaluate_detection,
    iou3d,
    load_scenes,
    nms3d,
    run_detection_pipeline,
    save_scenes,
    sweep_detection,
)
from snadapter.errors import ValidationError
from snadapter.prototypes import PrototypeStore
from snadapter.retrieval import KnnConfig


def box(x: float, y: float = 0.0, z: float = 0.0, size: float = 1.0, label: int = 0, score: float = 1.0):
    return Box3D([x, y, z], [size, size, size], label, score)


def two_proposal_scene():
    """
    Two heavily overlapping proposals: the baseline labels both class 0, the
    retrieval votes class 0 for the first and class 1 for the second
    """
    store = PrototypeStore([[0.0, 0.0], [10.0, 10.0]], [0, 1], [0, 1], "object")
    proposals = [
        Proposal(box(0.0), np.array([0.0, 0.0]), np.array([2.0, 0.0])),
        Proposal(box(0.1), np.array([10.0, 10.0]), np.array([1.5, 0.0])),
    ]
    return store, proposals


class TestIou:
    def test_identical(self):
        assert iou3d(box(0), box(0)) == pytest.approx(1.0)

    def test_disjoint(self):
        assert iou3d(box(0), box(3)) == 0.0

    def test_half_shifted(self):
        assert iou3d(box(0), box(0.5)) == pytest.approx(1 / 3)

    def test_symmetric(self):
        a, b = Box3D([0, 0, 0], [1, 2, 3], 0), Box3D([0.3, 0.5, -0.2], [2, 1, 1], 0)
        assert iou3d(a, b) == pytest.approx(iou3d(b, a))

    def test_extents_must_be_positive(self):
        with pytest.raises(ValidationError, match="extents"):
            Box3D([0, 0, 0], [1, 0, 1], 0)


class TestNms:
    def test_overlapping_keeps_the_best(self):
        assert nms3d([box(0, score=0.5), box(0.05, score=0.9)], 0.25) == [1]

    def test_disjoint_boxes_survive(self):
        assert nms3d([box(0, score=0.5), box(5, score=0.9)], 0.25) == [1, 0]

    def test_class_wise(self):
        boxes = [box(0, label=0, score=0.9), box(0.05, label=1, score=0.8)]
        assert nms3d(boxes, 0.25, class_wise=True) == [0, 1]
        assert nms3d(boxes, 0.25, class_wise=False) == [0]

    def test_ties_by_index(self):
        assert nms3d([box(0, score=0.5), box(0, score=0.5)], 0.25) == [0]

    def test_empty(self):
        assert nms3d([], 0.25) == []

    def test_matches_greedy_reference(self):
        rng = np.random.default_rng(53)
        boxes = [
            Box3D(rng.uniform(0, 4, 3), rng.uniform(0.5, 1.5, 3), int(rng.integers(0, 2)), float(rng.uniform()))
            for _ in range(60)
        ]
        kept = nms3d(boxes, 0.25)

        remaining = sorted(range(60), key=lambda i: -boxes[i].score)
        expected = []
        while remaining:
            best = remaining.pop(0)
            expected.append(best)
            remaining = [
                i
                for i in remaining
                if boxes[i].label != boxes[best].label or iou3d(boxes[i], boxes[best]) <= 0.25
            ]
        assert kept == expected


class TestPlacement:
    def test_fusion_before_nms_keeps_both_boxes(self):
        store, proposals = two_proposal_scene()
        detections = run_detection_pipeline(proposals, store, KnnConfig(k=1), 8.0, "before_nms")

        assert sorted(detection.label for detection in detections) == [0, 1]

    def test_fusion_after_nms_keeps_one_box(self):
        store, proposals = two_proposal_scene()
        detections = run_detection_pipeline(proposals, store, KnnConfig(k=1), 8.0, "after_nms")

        assert len(detections) == 1
        np.testing.assert_array_equal(detections[0].center, [0, 0, 0])
        assert detections[0].label == 0

    def test_zero_gamma_placements_agree(self):
        rng = np.random.default_rng(5)
        proposals = [
            Proposal(box(*rng.uniform(0, 3, 3)), rng.standard_normal(4), rng.standard_normal(3))
            for _ in range(20)
        ]
        probs = rng.dirichlet(np.ones(3), 20)
        logits = np.stack([proposal.logits for proposal in proposals])

        before = detect(proposals, logits, probs, 0.0, "before_nms")
        after = detect(proposals, logits, probs, 0.0, "after_nms")
        assert [(b.label, b.score, b.center.tolist()) for b in before] == [
            (b.label, b.score, b.center.tolist()) for b in after
        ]

    def test_no_proposals(self):
        store, _ = two_proposal_scene()
        assert run_detection_pipeline([], store, KnnConfig(k=1), 8.0) == []

    def test_unknown_placement(self):
        store, proposals = two_proposal_scene()
        with pytest.raises(ValidationError, match="placement"):
            run_detection_pipeline(proposals, store, KnnConfig(k=1), 8.0, "during_nms")


class TestEvaluation:
    def test_average_precision_hand_case(self):
        assert average_precision(np.array([1.0, 0.0, 1.0]), 2) == pytest.approx(0.8333, abs=1e-4)

    def test_matching_hand_case(self):
        truth = [[box(0), box(5)]]
        detections = [[box(0, score=0.9), box(20, score=0.8), box(5, score=0.7)]]
        metrics = evaluate_detection(detections, truth, 0.25)

        assert metrics.ap[0] == pytest.approx(5 / 6)
        assert metrics.ar[0] == 1.0

    def test_perfect_detections(self):
        truth = [[box(0, label=0), box(5, label=1)], [box(2, label=1)]]
        metrics = evaluate_detection(truth, truth, 0.25)
        assert metrics.mean_ap == 1.0
        assert metrics.mean_ar == 1.0

    def test_no_detections(self):
        metrics = evaluate_detection([[]], [[box(0)]], 0.25)
        assert metrics.mean_ap == 0.0
        assert metrics.mean_ar == 0.0

    def test_classes_without_ground_truth_are_ignored(self):
        metrics = evaluate_detection([[box(0), box(9, label=3)]], [[box(0)]], 0.25)
        assert list(metrics.ap) == [0]
        assert metrics.mean_ap == 1.0

    def test_a_truth_is_matched_once(self):
        metrics = evaluate_detection([[box(0, score=0.9), box(0, score=0.8)]], [[box(0)]], 0.25)
        assert metrics.ap[0] == 1.0
        assert metrics.ar[0] == 1.0

    def test_sweep_reports_recall(self):
        store, proposals = two_proposal_scene()
        scene = Scene(0, [box(0, label=0), box(0.1, label=1)], proposals)
        result = sweep_detection([scene], store, [1], [0.0, 8.0])

        assert result.metric_name == "AR25"
        values = {gamma: value for _, gamma, value in result.grid}
        assert values[0.0] == 0.5
        assert values[8.0] == 1.0


class TestSceneFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        scenes = [
            Scene(
                s,
                [box(s, label=s % 2)],
                [Proposal(box(s + 0.1), rng.standard_normal(4), rng.standard_normal(2))],
            )
            for s in range(3)
        ]
        path = str(tmp_path / "scenes.jsonl")
        save_scenes(scenes, path)
        loaded = load_scenes(path)

        assert [scene.to_dict() for scene in loaded] == [scene.to_dict() for scene in scenes]
