import json
import numpy as np
from .errors import ValidationError
from .fusion import fuse_batch, predict_detection, grid_search, SweepResult
from .prototypes import PrototypeStore
from .retrieval import KnnConfig, NeighborTable, knn_batch

PLACEMENTS = ["before_nms", "after_nms"]

# IoU used both for suppression and evaluation matching
DEFAULT_IOU = 0.25


class Box3D:
    """
    Axis-aligned box. score is the max class probability of the logits that
    labelled it
    """

    def __init__(self, center, size, label: int, score: float = 1.0):
        self.center: np.ndarray = np.asarray(center, dtype=np.float64).reshape(3)
        self.size: np.ndarray = np.asarray(size, dtype=np.float64).reshape(3)
        self.label: int = label
        self.score: float = score
        if not np.all(self.size > 0):
            raise ValidationError(f"box extents must be positive, got {self.size.tolist()}")

    @property
    def low(self) -> np.ndarray:
        return self.center - self.size / 2

    @property
    def high(self) -> np.ndarray:
        return self.center + self.size / 2

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def with_label(self, label: int, score: float) -> "Box3D":
        return Box3D(self.center, self.size, label, score)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "class": int(self.label),
            "score": float(self.score),
        }

    @staticmethod
    def from_dict(data: dict) -> "Box3D":
        return Box3D(data["center"], data["size"], int(data["class"]), float(data.get("score", 1.0)))


class Proposal:
    def __init__(self, box: Box3D, feature: np.ndarray, logits: np.ndarray):
        self.box: Box3D = box
        self.feature: np.ndarray = feature
        self.logits: np.ndarray = logits

    @property
    def position(self) -> np.ndarray:
        return self.box.center

    def to_dict(self) -> dict:
        return {
            "center": self.box.center.tolist(),
            "size": self.box.size.tolist(),
            "feature": np.asarray(self.feature, dtype=np.float64).tolist(),
            "logits": np.asarray(self.logits, dtype=np.float64).tolist(),
        }

    @staticmethod
    def from_dict(data: dict) -> "Proposal":
        logits = np.asarray(data["logits"], dtype=np.float64)
        return Proposal(
            Box3D(data["center"], data["size"], int(np.argmax(logits))),
            np.asarray(data["feature"], dtype=np.float64),
            logits,
        )


class Scene:
    def __init__(
        self, scene_id: int, ground_truth: list | None = None, proposals: list | None = None
    ):
        self.scene_id: int = scene_id
        self.ground_truth: list = [] if ground_truth is None else ground_truth
        self.proposals: list = [] if proposals is None else proposals

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "ground_truth": [box.to_dict() for box in self.ground_truth],
            "proposals": [proposal.to_dict() for proposal in self.proposals],
        }

    @staticmethod
    def from_dict(data: dict) -> "Scene":
        return Scene(
            int(data["scene_id"]),
            [Box3D.from_dict(box) for box in data["ground_truth"]],
            [Proposal.from_dict(proposal) for proposal in data["proposals"]],
        )


def save_scenes(scenes: list, path: str) -> None:
    """
    JSON lines, one scene per line
    """
    with open(path, "w") as f:
        for scene in scenes:
            f.write(json.dumps(scene.to_dict(), sort_keys=True) + "\n")


def load_scenes(path: str) -> list:
    scenes = []
    with open(path) as f:
        for line in f:
            if line.strip():
                scenes.append(Scene.from_dict(json.loads(line)))
    return scenes


def iou3d(a: Box3D, b: Box3D) -> float:
    overlap = np.clip(np.minimum(a.high, b.high) - np.maximum(a.low, b.low), 0.0, None)
    intersection = float(np.prod(overlap))
    union = a.volume + b.volume - intersection

    return intersection / union


def nms3d(boxes: list, iou_threshold: float = DEFAULT_IOU, class_wise: bool = True) -> list:
    """
    Greedy suppression: boxes are visited by decreasing score (ties by index) and kept
    if their IoU with every kept box (of the same class when class_wise) is at most
    iou_threshold. Returns the kept indices in visiting order
    """
    scores = np.array([box.score for box in boxes], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("NMS needs finite scores")

    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        suppressed = False
        for j in kept:
            if class_wise and boxes[i].label != boxes[j].label:
                continue
            if iou3d(boxes[i], boxes[j]) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)

    return kept


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    exp = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return exp / np.sum(exp, axis=-1, keepdims=True)


def scored_boxes(proposals: list, logits: np.ndarray) -> list:
    """
    Labels each proposal box with the argmax of its logits, scored by the softmax max
    """
    if len(proposals) == 0:
        return []
    probabilities = softmax(logits)
    labels = np.argmax(probabilities, axis=1)

    return [
        proposal.box.with_label(int(label), float(probabilities[i, label]))
        for i, (proposal, label) in enumerate(zip(proposals, labels))
    ]


def detect(
    proposals: list,
    baseline_logits: np.ndarray,
    knn_probs: np.ndarray,
    gamma: float,
    placement: str = "before_nms",
    iou_threshold: float = DEFAULT_IOU,
    class_wise: bool = True,
    knn_only: bool = False,
) -> list:
    """
    Detections of one scene given the retrieval probabilities of all its proposals.

    - before_nms: fuse every proposal, then suppress on the fused scores
    - after_nms: suppress on the baseline scores, then fuse the survivors
    knn_only scores the proposals with the retrieval probabilities alone (before NMS)
    """
    if placement not in PLACEMENTS:
        raise ValidationError(f"unknown placement: {placement} (known: {', '.join(PLACEMENTS)})")
    if len(proposals) == 0:
        return []

    if placement == "before_nms":
        fused = fuse_batch(baseline_logits, knn_probs, gamma)
        boxes = scored_boxes(proposals, fused.knn_probs if knn_only else fused.fused)
        kept = nms3d(boxes, iou_threshold, class_wise)
        return [boxes[i] for i in kept]

    boxes = scored_boxes(proposals, baseline_logits)
    kept = nms3d(boxes, iou_threshold, class_wise)
    fused = fuse_batch(baseline_logits[kept], knn_probs[kept], gamma)

    return scored_boxes([proposals[i] for i in kept], fused.fused)


def proposal_arrays(proposals: list) -> tuple:
    features = np.stack([proposal.feature for proposal in proposals])
    positions = np.stack([proposal.position for proposal in proposals])
    logits = np.stack([proposal.logits for proposal in proposals]).astype(np.float64)
    return features, positions, logits


def run_detection_pipeline(
    proposals: list,
    store: PrototypeStore,
    cfg: KnnConfig,
    gamma: float,
    placement: str = "before_nms",
    iou_threshold: float = DEFAULT_IOU,
    class_wise: bool = True,
    knn_only: bool = False,
    workers: int = 1,
) -> list:
    if placement not in PLACEMENTS:
        raise ValidationError(f"unknown placement: {placement} (known: {', '.join(PLACEMENTS)})")
    if len(proposals) == 0:
        return []

    features, positions, logits = proposal_arrays(proposals)
    fused = predict_detection(features, positions, store, logits, cfg, gamma, workers=workers)

    return detect(
        proposals,
        logits,
        fused.knn_probs,
        gamma,
        placement,
        iou_threshold,
        class_wise,
        knn_only,
    )


class DetectionMetrics:
    def __init__(self, ap: dict, ar: dict, mean_ap: float, mean_ar: float):
        # Per class with at least one ground truth
        self.ap: dict = ap
        self.ar: dict = ar
        self.mean_ap: float = mean_ap
        self.mean_ar: float = mean_ar


def average_precision(tp: np.ndarray, num_ground_truth: int) -> float:
    """
    Area under the precision / recall curve, all-point interpolation
    """
    if len(tp) == 0 or num_ground_truth == 0:
        return 0.0
    tp_cumulative = np.cumsum(tp)
    fp_cumulative = np.cumsum(1 - tp)
    recall = tp_cumulative / num_ground_truth
    precision = tp_cumulative / (tp_cumulative + fp_cumulative)

    recall = np.concatenate([[0.0], recall, [1.0]])
    precision = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])

    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def evaluate_detection(
    detections: list, ground_truth: list, iou_threshold: float = DEFAULT_IOU
) -> DetectionMetrics:
    """
    detections and ground_truth are lists (one entry per scene) of Box3D lists.

    For each class, detections are visited by decreasing score and matched to the
    unmatched ground truth of the same scene with the highest IoU (at least
    iou_threshold). Classes without ground truth are excluded from the means.
    """
    if len(detections) != len(ground_truth):
        raise ValidationError("one detection list per ground truth scene is required")

    classes = sorted({box.label for scene in ground_truth for box in scene})
    ap, ar = {}, {}
    for c in classes:
        truths = [[box for box in scene if box.label == c] for scene in ground_truth]
        matched = [np.zeros(len(scene), dtype=bool) for scene in truths]
        num_ground_truth = sum(len(scene) for scene in truths)

        candidates = [
            (box.score, s, i)
            for s, scene in enumerate(detections)
            for i, box in enumerate(scene)
            if box.label == c
        ]
        candidates.sort(key=lambda candidate: (-candidate[0], candidate[1], candidate[2]))

        tp = np.zeros(len(candidates))
        for n, (_, s, i) in enumerate(candidates):
            best, best_iou = None, iou_threshold
            for g, truth in enumerate(truths[s]):
                if matched[s][g]:
                    continue
                iou = iou3d(detections[s][i], truth)
                if iou >= best_iou and (best is None or iou > best_iou):
                    best, best_iou = g, iou
            if best is not None:
                matched[s][best] = True
                tp[n] = 1.0

        ap[c] = average_precision(tp, num_ground_truth)
        ar[c] = float(sum(np.count_nonzero(m) for m in matched) / num_ground_truth)

    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    mean_ar = float(np.mean(list(ar.values()))) if ar else 0.0

    return DetectionMetrics(ap, ar, mean_ap, mean_ar)


def sweep_detection(
    scenes: list,
    store: PrototypeStore,
    k_grid,
    gamma_grid,
    metric: str = "euclidean",
    zero_distance_clamp: float = 1e-12,
    placement: str = "before_nms",
    iou_threshold: float = DEFAULT_IOU,
    eval_iou: float = DEFAULT_IOU,
    on_point=None,
    workers: int = 1,
) -> SweepResult:
    """
    Detection k / gamma sweep maximizing the mean AR at eval_iou
    """
    cfg = KnnConfig(k=max(k_grid), metric=metric, zero_distance_clamp=zero_distance_clamp)
    prepared = []
    for scene in scenes:
        if len(scene.proposals) == 0:
            prepared.append((scene, None, None))
            continue
        features, positions, logits = proposal_arrays(scene.proposals)
        queries = store.encode_queries(features, positions=positions)
        prepared.append((scene, logits, NeighborTable(knn_batch(queries, store, cfg, workers))))

    def score(k: int, gamma: float) -> float:
        detections = []
        for scene, logits, table in prepared:
            if table is None:
                detections.append([])
                continue
            probs = table.probabilities(store, logits.shape[1], cfg, k)
            detections.append(
                detect(scene.proposals, logits, probs, gamma, placement, iou_threshold)
            )
        metrics = evaluate_detection(
            detections, [scene.ground_truth for scene in scenes], eval_iou
        )
        return metrics.mean_ar

    return grid_search(k_grid, gamma_grid, score, f"AR{round(eval_iou * 100)}", on_point)
