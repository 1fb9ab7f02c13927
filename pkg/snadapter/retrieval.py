from concurrent.futures import ThreadPoolExecutor
import numpy as np
from . import message
from .errors import ValidationError, DimensionMismatchError
from .prototypes import PrototypeStore

# Maximum number of (query, row, component) entries materialized at once
CHUNK_ELEMENTS = 4_000_000


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def _manhattan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(a - b), axis=-1)


def _chebyshev(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.abs(a - b)
    if diff.shape[-1] == 0:
        return np.zeros(diff.shape[:-1])
    return np.max(diff, axis=-1)


def _hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Exact value inequality, features are not binarized
    return np.count_nonzero(a != b, axis=-1).astype(np.float64)


def _canberra(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    numerator = np.abs(a - b)
    denominator = np.abs(a) + np.abs(b)
    terms = np.divide(
        numerator, denominator, out=np.zeros_like(numerator), where=denominator != 0
    )
    return np.sum(terms, axis=-1)


def _braycurtis(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    numerator = np.asarray(np.sum(np.abs(a - b), axis=-1))
    denominator = np.asarray(np.sum(np.abs(a + b), axis=-1))
    return np.divide(
        numerator, denominator, out=np.zeros_like(numerator), where=denominator != 0
    )


# All metrics broadcast over leading axes and reduce the last one
metrics = {
    "euclidean": _euclidean,
    "manhattan": _manhattan,
    "chebyshev": _chebyshev,
    "hamming": _hamming,
    "canberra": _canberra,
    "braycurtis": _braycurtis,
}


class KnnConfig:
    def __init__(
        self,
        k: int = 21,
        metric: str = "euclidean",
        zero_distance_clamp: float = 1e-12,
        scope: int | None = None,
    ):
        if k < 1:
            raise ValidationError(f"k must be at least 1, got {k}")
        if metric not in metrics:
            raise ValidationError(f"unknown metric: {metric} (known: {', '.join(metrics)})")
        if zero_distance_clamp <= 0:
            raise ValidationError("zero_distance_clamp must be positive")

        self.k: int = k
        self.metric: str = metric
        self.zero_distance_clamp: float = zero_distance_clamp
        # Only retrieve rows whose label is scope (part stores: the object class)
        self.scope: int | None = scope

    def with_scope(self, scope: int | None) -> "KnnConfig":
        return KnnConfig(self.k, self.metric, self.zero_distance_clamp, scope)


class NeighborList:
    """
    Retrieved prototypes, ascending by distance, ties broken by ascending row index
    """

    def __init__(self, indices: np.ndarray, distances: np.ndarray):
        self.indices: np.ndarray = indices
        self.distances: np.ndarray = distances

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        for index, distance in zip(self.indices, self.distances):
            yield int(index), float(distance)

    def head(self, k: int) -> "NeighborList":
        return NeighborList(self.indices[:k], self.distances[:k])


def distance(a, b, metric: str = "euclidean") -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"can't compare vectors of dims {len(a)} and {len(b)}")
    if metric not in metrics:
        raise ValidationError(f"unknown metric: {metric} (known: {', '.join(metrics)})")

    return float(metrics[metric](a, b))


def pairwise_distances(vectors, metric: str = "euclidean") -> np.ndarray:
    """
    R x R distance matrix between the rows of vectors
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    R, C = vectors.shape
    result = np.empty((R, R))
    chunk = max(1, CHUNK_ELEMENTS // max(1, R * C))
    for start in range(0, R, chunk):
        block = vectors[start : start + chunk]
        result[start : start + chunk] = metrics[metric](vectors[None, :, :], block[:, None, :])

    return result


def select_nearest(distances: np.ndarray, rows: np.ndarray, k: int) -> NeighborList:
    """
    The k smallest distances, ordered by (distance, row index)
    """
    k = min(k, len(distances))
    if k < len(distances):
        kth = np.partition(distances, k - 1)[k - 1]
        candidates = np.flatnonzero(distances <= kth)
    else:
        candidates = np.arange(len(distances))

    order = candidates[np.lexsort((rows[candidates], distances[candidates]))][:k]

    return NeighborList(rows[order], distances[order])


def _candidate_rows(store: PrototypeStore, dim: int, cfg: KnnConfig) -> np.ndarray:
    if len(store) == 0:
        raise ValidationError("can't retrieve from an empty store")
    if dim != store.dim:
        raise DimensionMismatchError(f"query has dimension {dim}, store has {store.dim}")

    rows = store.scoped_rows(cfg.scope)
    if len(rows) == 0:
        raise ValidationError(f"no prototype is labelled {cfg.scope} in the store")
    if cfg.k > len(rows):
        scope = "" if cfg.scope is None else f" labelled {cfg.scope}"
        message.warning(f"k={cfg.k} truncated to the {len(rows)} prototypes{scope}")

    return rows


def knn(query, store: PrototypeStore, cfg: KnnConfig) -> NeighborList:
    """
    Exact k nearest prototypes of a single query (k is truncated to the number of
    rows available under cfg.scope)
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    rows = _candidate_rows(store, len(query), cfg)
    distances = metrics[cfg.metric](store.vectors64[rows], query)

    return select_nearest(distances, rows, cfg.k)


def knn_batch(queries, store: PrototypeStore, cfg: KnnConfig, workers: int = 1) -> list:
    """
    knn for every row of queries, computed by blocks of queries. Blocks are
    independent, so they can be spread over worker threads without changing results
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None, :]
    rows = _candidate_rows(store, queries.shape[1], cfg)
    vectors = store.vectors64[rows]
    chunk = max(1, CHUNK_ELEMENTS // max(1, len(rows) * store.dim))

    def run(start: int) -> list:
        block = queries[start : start + chunk]
        distances = metrics[cfg.metric](vectors[None, :, :], block[:, None, :])
        return [select_nearest(row, rows, cfg.k) for row in distances]

    starts = range(0, len(queries), chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(run, starts))
    else:
        blocks = [run(start) for start in starts]

    return [neighbors for block in blocks for neighbors in block]


def class_probabilities(
    neighbors: NeighborList, store: PrototypeStore, num_classes: int, cfg: KnnConfig
) -> np.ndarray:
    """
    Inverse-distance vote of the neighbors:
    Prob(c) = sum_{n in N_c} 1/d(n) / sum_{n in N} 1/d(n)
    Distances below cfg.zero_distance_clamp are clamped before inversion.
    """
    if len(neighbors) == 0:
        raise ValidationError("can't compute probabilities without neighbors")
    labels = store.retrieval_labels[neighbors.indices]
    if labels.max() >= num_classes:
        raise ValidationError(
            f"neighbor label {labels.max()} is outside the {num_classes} classes"
        )

    weights = 1.0 / np.maximum(neighbors.distances, cfg.zero_distance_clamp)
    votes = np.bincount(labels, weights=weights, minlength=num_classes)

    return votes / np.sum(votes)


class NeighborTable:
    """
    Neighbor lists of Q queries padded into Q x L arrays, so probabilities for any
    k <= L can be computed without retrieving again
    """

    def __init__(self, neighbor_lists: list):
        length = max([len(neighbors) for neighbors in neighbor_lists], default=0)
        Q = len(neighbor_lists)
        self.indices: np.ndarray = np.zeros((Q, length), dtype=np.int64)
        self.distances: np.ndarray = np.ones((Q, length))
        self.valid: np.ndarray = np.zeros((Q, length), dtype=bool)

        for q, neighbors in enumerate(neighbor_lists):
            n = len(neighbors)
            self.indices[q, :n] = neighbors.indices
            self.distances[q, :n] = neighbors.distances
            self.valid[q, :n] = True

    def __len__(self) -> int:
        return self.indices.shape[0]

    def probabilities(
        self, store: PrototypeStore, num_classes: int, cfg: KnnConfig, k: int | None = None
    ) -> np.ndarray:
        """
        Q x K class probabilities using the first k neighbors of each query
        """
        k = self.indices.shape[1] if k is None else k
        Q = len(self)
        labels = store.retrieval_labels[self.indices[:, :k]].astype(np.int64)
        weights = 1.0 / np.maximum(self.distances[:, :k], cfg.zero_distance_clamp)
        weights = np.where(self.valid[:, :k], weights, 0.0)

        bins = (np.arange(Q)[:, None] * num_classes + labels).reshape(-1)
        votes = np.bincount(bins, weights=weights.reshape(-1), minlength=Q * num_classes)
        votes = votes.reshape(Q, num_classes)

        return votes / np.sum(votes, axis=1, keepdims=True)


def _purity_coverage(distances: np.ndarray, labels: np.ndarray, epsilon: float) -> tuple:
    within = distances <= epsilon
    same = labels[:, None] == labels[None, :]
    pure = np.all(same | ~within, axis=1)
    coverage = np.mean(np.sum(within, axis=1)) / len(labels)

    return float(np.mean(pure)), float(coverage)


def purity_coverage(store: PrototypeStore, epsilon: float) -> tuple:
    """
    Purity and coverage of the euclidean epsilon-balls centered on every prototype.

    A ball is pure when all the prototypes it contains share its center label;
    purity is the fraction of pure balls, coverage the mean fraction of the store
    that a ball contains.
    """
    if len(store) == 0:
        raise ValidationError("can't compute purity of an empty store")

    distances = pairwise_distances(store.vectors64)
    return _purity_coverage(distances, store.retrieval_labels, epsilon)


def purity_coverage_curve(store: PrototypeStore, epsilons) -> list:
    """
    (epsilon, purity, coverage) for every radius of epsilons
    """
    if len(store) == 0:
        raise ValidationError("can't compute purity of an empty store")

    distances = pairwise_distances(store.vectors64)
    return [
        (float(epsilon), *_purity_coverage(distances, store.retrieval_labels, float(epsilon)))
        for epsilon in epsilons
    ]


def default_epsilon_grid(store: PrototypeStore, steps: int = 10) -> list:
    """
    0 followed by evenly spaced quantiles of the pairwise prototype distances
    """
    distances = pairwise_distances(store.vectors64)
    upper = distances[np.triu_indices(len(store), 1)]
    if len(upper) == 0:
        return [0.0]
    quantiles = np.quantile(upper, np.linspace(0.0, 1.0, steps + 1)[1:])
    return [0.0] + [float(q) for q in quantiles]


class EpsilonSearch:
    def __init__(self, epsilon: float, purity: float, coverage: float, found: bool):
        self.epsilon: float = epsilon
        self.purity: float = purity
        self.coverage: float = coverage
        # False when no candidate reached the purity threshold (epsilon is then 0)
        self.found: bool = found


def find_epsilon_star(store: PrototypeStore, alpha: float) -> EpsilonSearch:
    """
    Largest radius (among 0 and the distinct pairwise distances) whose balls are
    pure with a fraction at least alpha
    """
    if len(store) == 0:
        raise ValidationError("can't search epsilon on an empty store")
    if not 0 < alpha <= 1:
        raise ValidationError(f"alpha must be in (0, 1], got {alpha}")

    distances = pairwise_distances(store.vectors64)
    labels = store.retrieval_labels
    R = len(labels)
    candidates = np.unique(
        np.concatenate([[0.0], distances[np.triu_indices(R, 1)]])
    )

    # A ball stays pure as long as its radius is strictly below the distance to the
    # nearest prototype of another label
    nearest_other = np.where(labels[:, None] != labels[None, :], distances, np.inf)
    nearest_other = np.sort(np.min(nearest_other, axis=1))
    purities = (R - np.searchsorted(nearest_other, candidates, side="right")) / R

    satisfying = np.flatnonzero(purities >= alpha)
    if len(satisfying) == 0:
        message.warning(f"no radius reaches purity {alpha}, falling back to epsilon=0")
        purity, coverage = _purity_coverage(distances, labels, 0.0)
        return EpsilonSearch(0.0, purity, coverage, False)

    epsilon = float(candidates[satisfying[-1]])
    purity, coverage = _purity_coverage(distances, labels, epsilon)

    return EpsilonSearch(epsilon, purity, coverage, True)
