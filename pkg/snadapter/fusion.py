import numpy as np
import optuna
from .errors import ValidationError, DimensionMismatchError
from .prototypes import PrototypeStore
from .retrieval import KnnConfig, NeighborTable, knn, knn_batch, class_probabilities
from .toybench.metrics import overall_accuracy, instance_miou, masked_argmax

# Relative weight of the retrieval probabilities
DEFAULT_GAMMA = 8.0

# Number of neighbors per task when no sweep is run
DEFAULT_K = {
    "cls": 21,
    "seg": 1,
    "det": 32,
}


class FusedPrediction:
    """
    fused = baseline_logits + gamma * knn_probs
    """

    def __init__(
        self, baseline_logits: np.ndarray, knn_probs: np.ndarray, gamma: float, fused: np.ndarray
    ):
        self.baseline_logits: np.ndarray = baseline_logits
        self.knn_probs: np.ndarray = knn_probs
        self.gamma: float = gamma
        self.fused: np.ndarray = fused

    @property
    def argmax(self) -> int:
        # np.argmax returns the lowest index among ties
        return int(np.argmax(self.fused))

    @property
    def baseline_argmax(self) -> int:
        return int(np.argmax(self.baseline_logits))

    @property
    def knn_argmax(self) -> int:
        return int(np.argmax(self.knn_probs))


class FusedBatch:
    """
    Fused predictions of Q queries, stored as Q x K matrices
    """

    def __init__(
        self, baseline_logits: np.ndarray, knn_probs: np.ndarray, gamma: float, fused: np.ndarray
    ):
        self.baseline_logits: np.ndarray = baseline_logits
        self.knn_probs: np.ndarray = knn_probs
        self.gamma: float = gamma
        self.fused: np.ndarray = fused

    def __len__(self) -> int:
        return self.fused.shape[0]

    def __getitem__(self, index: int) -> FusedPrediction:
        return FusedPrediction(
            self.baseline_logits[index], self.knn_probs[index], self.gamma, self.fused[index]
        )

    def __iter__(self):
        for index in range(len(self)):
            yield self[index]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.fused, axis=1)

    def baseline_argmax(self) -> np.ndarray:
        return np.argmax(self.baseline_logits, axis=1)

    def knn_argmax(self) -> np.ndarray:
        return np.argmax(self.knn_probs, axis=1)


def _check_gamma(gamma: float) -> None:
    if not gamma >= 0:
        raise ValidationError(f"gamma must be nonnegative, got {gamma}")


def fuse(baseline_logits, knn_probs, gamma: float) -> FusedPrediction:
    baseline_logits = np.asarray(baseline_logits, dtype=np.float64).reshape(-1)
    knn_probs = np.asarray(knn_probs, dtype=np.float64).reshape(-1)
    if baseline_logits.shape != knn_probs.shape:
        raise DimensionMismatchError(
            f"{len(baseline_logits)} baseline logits but {len(knn_probs)} retrieval probabilities"
        )
    _check_gamma(gamma)

    # gamma = 0 must give back the baseline bit for bit (including -0.0)
    if gamma == 0:
        fused = baseline_logits.copy()
    else:
        fused = baseline_logits + gamma * knn_probs

    return FusedPrediction(baseline_logits, knn_probs, float(gamma), fused)


def fuse_batch(baseline_logits, knn_probs, gamma: float) -> FusedBatch:
    baseline_logits = np.asarray(baseline_logits, dtype=np.float64)
    knn_probs = np.asarray(knn_probs, dtype=np.float64)
    if baseline_logits.shape != knn_probs.shape:
        raise DimensionMismatchError(
            f"baseline logits {baseline_logits.shape} and retrieval probabilities "
            f"{knn_probs.shape} differ"
        )
    _check_gamma(gamma)

    if gamma == 0:
        fused = baseline_logits.copy()
    else:
        fused = baseline_logits + gamma * knn_probs

    return FusedBatch(baseline_logits, knn_probs, float(gamma), fused)


def predict_classification(
    query_feature,
    store: PrototypeStore,
    baseline_logits,
    cfg: KnnConfig,
    gamma: float,
    cloud=None,
) -> FusedPrediction:
    """
    Fuses the classifier logits of one sample with the vote of its nearest
    sample-wise prototypes. cloud is required when the store was built with a
    global positional vector
    """
    query = store.encode_queries(query_feature, clouds=None if cloud is None else [cloud])[0]
    neighbors = knn(query, store, cfg)
    probs = class_probabilities(neighbors, store, len(baseline_logits), cfg)

    return fuse(baseline_logits, probs, gamma)


def predict_classification_batch(
    features,
    store: PrototypeStore,
    baseline_logits,
    cfg: KnnConfig,
    gamma: float,
    clouds: list | None = None,
    workers: int = 1,
) -> FusedBatch:
    baseline_logits = np.asarray(baseline_logits, dtype=np.float64)
    queries = store.encode_queries(features, clouds=clouds)
    table = NeighborTable(knn_batch(queries, store, cfg, workers))
    probs = table.probabilities(store, baseline_logits.shape[1], cfg)

    return fuse_batch(baseline_logits, probs, gamma)


def _segmentation_config(
    store: PrototypeStore, cfg: KnnConfig, object_class: int | None, scoped: bool
) -> KnnConfig:
    if store.kind != "part":
        raise ValidationError(f"segmentation needs a part store, got a {store.kind} store")
    if not scoped:
        return cfg.with_scope(None)

    if object_class is None or int(object_class) not in set(store.labels.tolist()):
        raise ValidationError(f"object class {object_class} has no part prototypes in the store")

    return cfg.with_scope(int(object_class))


def predict_segmentation(
    point_features,
    store: PrototypeStore,
    baseline_logits,
    cfg: KnnConfig,
    gamma: float,
    object_class: int | None = None,
    scoped: bool = True,
    workers: int = 1,
) -> FusedBatch:
    """
    Per-point fusion over the part vocabulary. With scoped retrieval, only the part
    prototypes of the object class are searched
    """
    baseline_logits = np.asarray(baseline_logits, dtype=np.float64)
    cfg = _segmentation_config(store, cfg, object_class, scoped)
    table = NeighborTable(knn_batch(point_features, store, cfg, workers))
    probs = table.probabilities(store, baseline_logits.shape[1], cfg)

    return fuse_batch(baseline_logits, probs, gamma)


def predict_detection(
    proposal_features,
    positions,
    store: PrototypeStore,
    baseline_logits,
    cfg: KnnConfig,
    gamma: float,
    encoding=None,
    workers: int = 1,
) -> FusedBatch:
    """
    Per-proposal fusion. Queries are feature + PE(position) under the store encoding;
    when encoding is passed it must match the one the store was built with
    """
    if store.kind != "object":
        raise ValidationError(f"detection needs an object store, got a {store.kind} store")
    if encoding is not None and encoding != store.encoding:
        raise ValidationError(
            f"query encoding {encoding} doesn't match the store encoding {store.encoding}"
        )
    baseline_logits = np.asarray(baseline_logits, dtype=np.float64)
    if len(baseline_logits) == 0:
        empty = np.zeros((0, store.num_retrieval_classes))
        return FusedBatch(empty, empty.copy(), float(gamma), empty.copy())

    queries = store.encode_queries(proposal_features, positions=positions)
    table = NeighborTable(knn_batch(queries, store, cfg, workers))
    probs = table.probabilities(store, baseline_logits.shape[1], cfg)

    return fuse_batch(baseline_logits, probs, gamma)


class SweepResult:
    def __init__(
        self,
        metric_name: str,
        grid: list,
        best_k: int,
        best_gamma: float,
        best_value: float,
        baseline_value: float,
    ):
        self.metric_name: str = metric_name
        # (k, gamma, value), sorted by k then gamma
        self.grid: list = grid
        self.best_k: int = best_k
        self.best_gamma: float = best_gamma
        self.best_value: float = best_value
        self.baseline_value: float = baseline_value

    def rows(self) -> list:
        return [
            {"k": k, "gamma": gamma, "metric_name": self.metric_name, "value": value}
            for k, gamma, value in self.grid
        ]


def grid_search(
    k_grid, gamma_grid, score, metric_name: str, on_point=None
) -> SweepResult:
    """
    Evaluates score(k, gamma) on every grid point through an optuna grid study.
    The best point maximizes the score, ties going to the smaller gamma, then the
    smaller k, whatever the trial order
    """
    k_grid = sorted(set(int(k) for k in k_grid))
    gamma_grid = sorted(set(float(gamma) for gamma in gamma_grid))
    if not k_grid or not gamma_grid:
        raise ValidationError("sweep grids can't be empty")
    if 0.0 not in gamma_grid:
        raise ValidationError("the gamma grid must contain 0 (the baseline)")

    values = {}

    def objective(trial):
        k = trial.suggest_categorical("k", k_grid)
        gamma = trial.suggest_categorical("gamma", gamma_grid)
        value = float(score(k, gamma))
        values[(k, gamma)] = value
        if on_point is not None:
            on_point(k, gamma, value)

        return value

    optuna.logging.set_verbosity(optuna.logging.WARNING)
    sampler = optuna.samplers.GridSampler({"k": k_grid, "gamma": gamma_grid}, seed=0)
    study = optuna.create_study(sampler=sampler, direction="maximize")
    study.optimize(objective, n_trials=len(k_grid) * len(gamma_grid))

    grid = [(k, gamma, values[(k, gamma)]) for k in k_grid for gamma in gamma_grid]
    best_k, best_gamma, best_value = max(
        grid, key=lambda point: (point[2], -point[1], -point[0])
    )

    return SweepResult(
        metric_name,
        grid,
        best_k,
        best_gamma,
        best_value,
        values[(k_grid[0], 0.0)],
    )


def sweep(
    val_queries,
    store: PrototypeStore,
    baseline_logits,
    labels,
    k_grid,
    gamma_grid,
    metric: str = "euclidean",
    zero_distance_clamp: float = 1e-12,
    clouds: list | None = None,
    on_point=None,
    workers: int = 1,
) -> SweepResult:
    """
    Classification k / gamma sweep maximizing the validation overall accuracy.
    Neighbors are retrieved once at the largest k and truncated for smaller ones
    """
    baseline_logits = np.asarray(baseline_logits, dtype=np.float64)
    labels = np.asarray(labels)
    cfg = KnnConfig(k=max(k_grid), metric=metric, zero_distance_clamp=zero_distance_clamp)
    queries = store.encode_queries(val_queries, clouds=clouds)
    table = NeighborTable(knn_batch(queries, store, cfg, workers))
    probabilities = {}

    def score(k: int, gamma: float) -> float:
        if k not in probabilities:
            probabilities[k] = table.probabilities(store, baseline_logits.shape[1], cfg, k)
        fused = fuse_batch(baseline_logits, probabilities[k], gamma)
        return overall_accuracy(fused.argmax(), labels)

    return grid_search(k_grid, gamma_grid, score, "OA", on_point)


def sweep_segmentation(
    instances: list,
    store: PrototypeStore,
    k_grid,
    gamma_grid,
    metric: str = "euclidean",
    zero_distance_clamp: float = 1e-12,
    scoped: bool = True,
    on_point=None,
    workers: int = 1,
) -> SweepResult:
    """
    Segmentation sweep maximizing the instance mIoU.

    instances is a list of dicts with "features" (N x C), "logits" (N x K_part),
    "parts" (N ground truth part labels), "object_class" and "valid_parts"
    """
    cfg = KnnConfig(k=max(k_grid), metric=metric, zero_distance_clamp=zero_distance_clamp)
    neighbor_lists, logits, masks, slices = [], [], [], []
    start = 0
    for instance in instances:
        instance_cfg = _segmentation_config(store, cfg, instance["object_class"], scoped)
        neighbor_lists += knn_batch(instance["features"], store, instance_cfg, workers)
        instance_logits = np.asarray(instance["logits"], dtype=np.float64)
        mask = np.zeros(instance_logits.shape[1], dtype=bool)
        mask[list(instance["valid_parts"])] = True
        logits.append(instance_logits)
        masks.append(np.broadcast_to(mask, instance_logits.shape))
        slices.append(slice(start, start + len(instance_logits)))
        start += len(instance_logits)

    table = NeighborTable(neighbor_lists)
    logits = np.concatenate(logits)
    masks = np.concatenate(masks)
    probabilities = {}

    def score(k: int, gamma: float) -> float:
        if k not in probabilities:
            probabilities[k] = table.probabilities(store, logits.shape[1], cfg, k)
        predictions = masked_argmax(fuse_batch(logits, probabilities[k], gamma).fused, masks)
        return instance_miou(
            [predictions[s] for s in slices],
            [instance["parts"] for instance in instances],
            [instance["valid_parts"] for instance in instances],
        )

    return grid_search(k_grid, gamma_grid, score, "mIoU_I", on_point)


class RectificationStats:
    """
    Counts of the samples where the baseline and the retrieval disagree or both fail,
    split by the correctness of the fused prediction
    """

    def __init__(
        self,
        baseline_right_knn_wrong_fused_right: int,
        baseline_right_knn_wrong_fused_wrong: int,
        baseline_wrong_knn_right_fused_right: int,
        baseline_wrong_knn_right_fused_wrong: int,
        both_wrong_fused_right: int,
        total: int,
        baseline_correct: int,
        knn_correct: int,
        fused_correct: int,
    ):
        self.baseline_right_knn_wrong_fused_right: int = baseline_right_knn_wrong_fused_right
        self.baseline_right_knn_wrong_fused_wrong: int = baseline_right_knn_wrong_fused_wrong
        self.baseline_wrong_knn_right_fused_right: int = baseline_wrong_knn_right_fused_right
        self.baseline_wrong_knn_right_fused_wrong: int = baseline_wrong_knn_right_fused_wrong
        self.both_wrong_fused_right: int = both_wrong_fused_right
        self.total: int = total
        self.baseline_correct: int = baseline_correct
        self.knn_correct: int = knn_correct
        self.fused_correct: int = fused_correct

    def rows(self) -> list:
        """
        (baseline correct, knn correct, fused correct, count) rows
        """
        return [
            (True, False, True, self.baseline_right_knn_wrong_fused_right),
            (True, False, False, self.baseline_right_knn_wrong_fused_wrong),
            (False, True, True, self.baseline_wrong_knn_right_fused_right),
            (False, True, False, self.baseline_wrong_knn_right_fused_wrong),
            (False, False, True, self.both_wrong_fused_right),
        ]


def rectification_stats(baseline_preds, knn_preds, fused_preds, labels) -> RectificationStats:
    baseline_preds, knn_preds, fused_preds, labels = (
        np.asarray(values).reshape(-1)
        for values in (baseline_preds, knn_preds, fused_preds, labels)
    )
    if not len(baseline_preds) == len(knn_preds) == len(fused_preds) == len(labels):
        raise DimensionMismatchError("predictions and labels must have the same length")

    baseline = baseline_preds == labels
    retrieval = knn_preds == labels
    fused = fused_preds == labels

    def count(mask) -> int:
        return int(np.count_nonzero(mask))

    return RectificationStats(
        baseline_right_knn_wrong_fused_right=count(baseline & ~retrieval & fused),
        baseline_right_knn_wrong_fused_wrong=count(baseline & ~retrieval & ~fused),
        baseline_wrong_knn_right_fused_right=count(~baseline & retrieval & fused),
        baseline_wrong_knn_right_fused_wrong=count(~baseline & retrieval & ~fused),
        both_wrong_fused_right=count(~baseline & ~retrieval & fused),
        total=len(labels),
        baseline_correct=count(baseline),
        knn_correct=count(retrieval),
        fused_correct=count(fused),
    )
