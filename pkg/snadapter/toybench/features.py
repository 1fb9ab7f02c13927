import json
import numpy as np
from ..errors import ValidationError, DimensionMismatchError
from .shapes import MIN_POINTS

GLOBAL_DIM = 66
POINT_DIM = 32

# Local neighborhood size of the point features
NEIGHBORS = 16

# Pairwise distance histogram subset
PAIRWISE_POINTS = 64
PAIRWISE_SEED = 0

# Histogram ranges (values outside are clipped into the last bin)
RADIAL_RANGE = 2.0
HEIGHT_RANGE = 3.0
PAIRWISE_RANGE = 4.0
BINS = 16

EPSILON = 1e-12


def _check_cloud(cloud) -> np.ndarray:
    points = np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionMismatchError(f"a cloud must be a N x 3 array, got shape {points.shape}")
    if len(points) < MIN_POINTS:
        raise ValidationError(f"a cloud needs at least {MIN_POINTS} points, got {len(points)}")
    if not np.all(np.isfinite(points)):
        raise ValidationError("cloud has non-finite coordinates")
    return points


def _canonical_order(points: np.ndarray) -> np.ndarray:
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def _histogram(values: np.ndarray, upper: float) -> np.ndarray:
    values = np.clip(values, 0.0, upper * (1 - 1e-9))
    counts, _ = np.histogram(values, bins=BINS, range=(0.0, upper))
    return counts / len(values)


def raw_features(cloud) -> np.ndarray:
    """
    Unstandardized global descriptor of a cloud. Points are put in a canonical
    (lexicographic) order first, so the result doesn't depend on their order
    """
    points = _check_cloud(cloud)
    points = points[_canonical_order(points)]
    N = len(points)

    centered = points - np.mean(points, axis=0)
    radial = np.linalg.norm(centered, axis=1)

    covariance = centered.T @ centered / N
    eigenvalues = np.linalg.eigvalsh(covariance)[::-1]

    moments = np.concatenate(
        [np.mean(np.abs(centered), axis=0), np.mean(centered**2, axis=0), np.mean(centered**3, axis=0)]
    )

    height = points[:, 2] - np.min(points[:, 2])

    count = min(PAIRWISE_POINTS, N)
    subset = np.sort(np.random.default_rng(PAIRWISE_SEED).choice(N, count, replace=False))
    subset = points[subset]
    rows, cols = np.triu_indices(count, 1)
    pairwise = np.linalg.norm(subset[rows] - subset[cols], axis=1)

    normalizers = np.array(
        [
            np.log(N),
            np.mean(centered[:, 2] > 0),
            np.mean(radial < 0.5),
            np.mean(radial < 1.0),
            np.mean(radial),
            np.std(radial),
        ]
    )

    return np.concatenate(
        [
            _histogram(radial, RADIAL_RANGE),
            eigenvalues,
            moments,
            _histogram(height, HEIGHT_RANGE),
            _histogram(pairwise, PAIRWISE_RANGE),
            normalizers,
        ]
    )


def _quantiles(values: np.ndarray) -> np.ndarray:
    # Fraction of the values strictly below each value
    return np.searchsorted(np.sort(values), values, side="left") / len(values)


def _point_features(points: np.ndarray) -> np.ndarray:
    N = len(points)
    rel = points - np.mean(points, axis=0)
    radial = np.linalg.norm(rel, axis=1)
    xy_radial = np.linalg.norm(rel[:, :2], axis=1)

    distances = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    np.fill_diagonal(distances, np.inf)
    k = min(NEIGHBORS, N - 1)
    nearest = np.argsort(distances, axis=1, kind="stable")[:, :k]
    rows = np.arange(N)[:, None]

    neighbors = points[nearest]
    mean_offset = np.mean(neighbors - points[:, None, :], axis=1)
    local = neighbors - np.mean(neighbors, axis=1, keepdims=True)
    covariance = np.einsum("nki,nkj->nij", local, local) / k
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    l3, l2, l1 = eigenvalues[:, 0], eigenvalues[:, 1], eigenvalues[:, 2]
    trace = np.sum(eigenvalues, axis=1)

    def ratio(numerator, denominator):
        return np.divide(
            numerator, denominator, out=np.zeros_like(numerator), where=denominator > EPSILON
        )

    neighbor_distances = distances[rows, nearest]
    knn_radius = neighbor_distances[:, -1]
    z = points[:, 2]

    columns = [
        rel,
        radial[:, None],
        mean_offset,
        trace[:, None],
        np.stack([ratio(l1, trace), ratio(l2, trace), ratio(l3, trace)], axis=1),
        _quantiles(z)[:, None],
        knn_radius[:, None],
        np.mean(neighbor_distances, axis=1)[:, None],
        # z component of the local normal (smallest eigenvector)
        np.abs(eigenvectors[:, 2, 0])[:, None],
        np.stack([ratio(l1 - l2, l1), ratio(l2 - l3, l1), ratio(l3, l1)], axis=1),
        (np.max(neighbors[:, :, 2], axis=1) - np.min(neighbors[:, :, 2], axis=1))[:, None],
        xy_radial[:, None],
        (np.max(z) - z)[:, None],
        rel**2,
        ratio(rel[:, 2], radial)[:, None],
        _quantiles(radial)[:, None],
        _quantiles(xy_radial)[:, None],
        (z - np.min(z))[:, None],
        np.abs(rel),
        -np.log(knn_radius + 1e-6)[:, None],
    ]
    return np.concatenate(columns, axis=1)


def raw_point_features(cloud) -> np.ndarray:
    """
    Unstandardized N x 32 per-point descriptors. Computed in canonical point order and
    scattered back, so shuffling the points shuffles the rows the same way
    """
    points = _check_cloud(cloud)
    order = _canonical_order(points)
    features = np.empty((len(points), POINT_DIM))
    features[order] = _point_features(points[order])
    return features


class Standardizer:
    """
    Componentwise (x - mean) / std with statistics of the train split. Constant
    components keep std = 1
    """

    def __init__(self, mean, std):
        self.mean: np.ndarray = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std: np.ndarray = np.asarray(std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise DimensionMismatchError("standardizer mean and std dims differ")

    @staticmethod
    def fit(raw) -> "Standardizer":
        raw = np.asarray(raw, dtype=np.float64)
        if len(raw) == 0:
            raise ValidationError("can't fit a standardizer on no features")
        std = np.std(raw, axis=0)
        std[std < EPSILON] = 1.0
        return Standardizer(np.mean(raw, axis=0), std)

    def transform(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != len(self.mean):
            raise DimensionMismatchError(
                f"features have dimension {raw.shape[-1]}, standardizer has {len(self.mean)}"
            )
        return (raw - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(data: dict) -> "Standardizer":
        return Standardizer(data["mean"], data["std"])

    def save(self, filename: str) -> None:
        with open(filename, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @staticmethod
    def load(filename: str) -> "Standardizer":
        with open(filename) as f:
            return Standardizer.from_dict(json.load(f))


def extract_features(cloud, standardizer: Standardizer | None = None) -> np.ndarray:
    features = raw_features(cloud)
    if standardizer is not None:
        features = standardizer.transform(features)
    return features


def extract_point_features(cloud, standardizer: Standardizer | None = None) -> np.ndarray:
    features = raw_point_features(cloud)
    if standardizer is not None:
        features = standardizer.transform(features)
    return features
