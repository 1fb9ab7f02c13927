from concurrent.futures import ThreadPoolExecutor
import numpy as np
from ..errors import ValidationError
from ..feature_store import FeatureSet
from .shapes import ShapeSpec, sample_cloud, CLASS_NAMES, PART_NAMES, VALID_PARTS
from .features import Standardizer, raw_features, raw_point_features

SPLITS = ["train", "val", "test"]

# Scenes are laid on a grid of CELL x CELL cells, one object at most per cell; an
# object fits in a cell so boxes never overlap
GRID = 4
CELL = 4.0
MAX_OBJECTS = 5
CENTER_JITTER = 0.1


class CloudSet:
    """
    Point clouds with their object class and per-point part labels
    """

    def __init__(self):
        self.clouds: list = []
        self.labels: list = []
        self.part_labels: list = []

    def __len__(self) -> int:
        return len(self.clouds)

    def append(self, cloud: np.ndarray, label: int, parts: np.ndarray) -> None:
        self.clouds.append(cloud)
        self.labels.append(label)
        self.part_labels.append(parts)

    def class_counts(self) -> dict:
        return {name: self.labels.count(c) for c, name in enumerate(CLASS_NAMES)}


class ToyObject:
    def __init__(self, cloud: np.ndarray, label: int, center: np.ndarray, size: np.ndarray):
        self.cloud: np.ndarray = cloud
        self.label: int = label
        # Axis-aligned ground truth box
        self.center: np.ndarray = center
        self.size: np.ndarray = size


class ToyScene:
    def __init__(self, scene_id: int):
        self.scene_id: int = scene_id
        self.objects: list = []


class ToyDataset:
    def __init__(self, train: CloudSet, val: CloudSet, test: CloudSet, scenes: dict):
        self.train: CloudSet = train
        self.val: CloudSet = val
        self.test: CloudSet = test
        # Split name -> list of ToyScene
        self.scenes: dict = scenes

    def split(self, name: str) -> CloudSet:
        if name not in SPLITS:
            raise ValidationError(f"unknown split: {name} (known: {', '.join(SPLITS)})")
        return getattr(self, name)


def split_counts(n: int, split_fractions) -> tuple:
    """
    Per-class (train, val, test) counts: train and val are floored, test takes
    the remainder
    """
    fractions = [float(f) for f in split_fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValidationError(f"split_fractions must be 3 nonnegative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValidationError(f"split_fractions must sum to 1, got {sum(fractions)}")

    train = int(np.floor(fractions[0] * n + 1e-9))
    val = int(np.floor(fractions[1] * n + 1e-9))
    return train, val, n - train - val


def parse_imbalance(imbalance) -> dict:
    """
    Accepts {class name or index: factor} and returns {class index: factor}
    """
    factors = {}
    for key, factor in (imbalance or {}).items():
        if isinstance(key, str) and not key.isdigit():
            if key not in CLASS_NAMES:
                raise ValidationError(
                    f"unknown class in imbalance: {key} (known: {', '.join(CLASS_NAMES)})"
                )
            index = CLASS_NAMES.index(key)
        else:
            index = int(key)
            if not 0 <= index < len(CLASS_NAMES):
                raise ValidationError(f"imbalance class index {index} out of range")
        factor = float(factor)
        if not 0 <= factor <= 1:
            raise ValidationError(f"imbalance factor must be in [0, 1], got {factor}")
        factors[index] = factor
    return factors


def _object_rng(seed: int, *path: int) -> np.random.Generator:
    # One independent stream per (seed, ...) path, whatever the generation order
    return np.random.default_rng([seed, *path])


def _sample(seed: int, class_index: int, sample: int, shape_spec: dict) -> tuple:
    spec = ShapeSpec(CLASS_NAMES[class_index], **shape_spec)
    return sample_cloud(spec, _object_rng(seed, class_index, sample))


def _scene(seed: int, split: int, scene_id: int, shape_spec: dict) -> ToyScene:
    rng = _object_rng(seed, len(CLASS_NAMES) + split, scene_id)
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = rng.choice(GRID * GRID, count, replace=False)
    scene = ToyScene(scene_id)

    for cell in cells:
        label = int(rng.integers(len(CLASS_NAMES)))
        cloud, _ = sample_cloud(ShapeSpec(CLASS_NAMES[label], **shape_spec), rng)
        low, high = np.min(cloud, axis=0), np.max(cloud, axis=0)
        size = high - low

        center = np.array(
            [(cell // GRID + 0.5) * CELL, (cell % GRID + 0.5) * CELL, size[2] / 2]
        )
        center[:2] += rng.uniform(-CENTER_JITTER, CENTER_JITTER, 2)
        cloud = cloud - (low + high) / 2 + center
        scene.objects.append(ToyObject(cloud, label, center, size))

    return scene


def generate_dataset(
    num_per_class: int = 100,
    split_fractions=(0.7, 0.1, 0.2),
    seed: int = 47,
    imbalance: dict | None = None,
    num_points: int = 512,
    jitter: float = 0.02,
    scale_range=(0.75, 1.25),
    num_scenes=(40, 10, 20),
    workers: int = 1,
) -> ToyDataset:
    """
    Generates the classification / segmentation clouds of every class and the
    detection scenes of every split.

    imbalance maps a class to a factor f: only floor(f * n_train) of its training
    samples are kept
    """
    if num_per_class < 1:
        raise ValidationError(f"num_per_class must be positive, got {num_per_class}")
    counts = split_counts(num_per_class, split_fractions)
    factors = parse_imbalance(imbalance)
    shape_spec = {
        "num_points": int(num_points),
        "jitter": float(jitter),
        "scale_range": tuple(scale_range),
    }
    # Validates the shape parameters once
    ShapeSpec(CLASS_NAMES[0], **shape_spec)

    jobs = []
    for class_index in range(len(CLASS_NAMES)):
        kept_train = counts[0]
        if class_index in factors:
            kept_train = int(np.floor(factors[class_index] * counts[0] + 1e-9))
        for sample in range(num_per_class):
            if sample < counts[0]:
                split = 0
                if sample >= kept_train:
                    continue
            elif sample < counts[0] + counts[1]:
                split = 1
            else:
                split = 2
            jobs.append((split, class_index, sample))

    scene_jobs = [
        (split, scene_id) for split in range(3) for scene_id in range(int(num_scenes[split]))
    ]

    def run_sample(job):
        return _sample(seed, job[1], job[2], shape_spec)

    def run_scene(job):
        return _scene(seed, job[0], job[1], shape_spec)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            clouds = list(pool.map(run_sample, jobs))
            scenes = list(pool.map(run_scene, scene_jobs))
    else:
        clouds = [run_sample(job) for job in jobs]
        scenes = [run_scene(job) for job in scene_jobs]

    sets = [CloudSet(), CloudSet(), CloudSet()]
    for (split, class_index, _), (cloud, parts) in zip(jobs, clouds):
        sets[split].append(cloud, class_index, parts)

    by_split = {name: [] for name in SPLITS}
    for (split, _), scene in zip(scene_jobs, scenes):
        by_split[SPLITS[split]].append(scene)

    return ToyDataset(sets[0], sets[1], sets[2], by_split)


def _map(function, items: list, workers: int) -> list:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(function, items))
    return [function(item) for item in items]


def raw_sample_features(clouds: CloudSet, workers: int = 1) -> np.ndarray:
    return np.stack(_map(raw_features, clouds.clouds, workers))


def raw_point_feature_list(clouds: CloudSet, workers: int = 1) -> list:
    return _map(raw_point_features, clouds.clouds, workers)


def sample_feature_set(
    clouds: CloudSet, standardizer: Standardizer, workers: int = 1, raw=None
) -> FeatureSet:
    """
    One global feature per cloud (raw: precomputed raw_sample_features)
    """
    if raw is None:
        raw = raw_sample_features(clouds, workers)
    return FeatureSet(
        standardizer.transform(raw),
        clouds.labels,
        class_names=CLASS_NAMES,
        kind="sample",
    )


def point_feature_set(
    clouds: CloudSet, standardizer: Standardizer, workers: int = 1, raw: list | None = None
) -> FeatureSet:
    """
    One record per point; positions hold the point coordinates and group_sizes the
    number of points of each cloud (raw: precomputed raw_point_feature_list)
    """
    if raw is None:
        raw = raw_point_feature_list(clouds, workers)
    labels = np.concatenate(
        [np.full(len(cloud), label) for cloud, label in zip(clouds.clouds, clouds.labels)]
    )
    return FeatureSet(
        standardizer.transform(np.concatenate(raw)),
        labels,
        class_names=CLASS_NAMES,
        kind="point",
        positions=np.concatenate(clouds.clouds),
        part_labels=np.concatenate(clouds.part_labels),
        part_names=PART_NAMES,
        valid_parts=VALID_PARTS,
        group_sizes=[len(cloud) for cloud in clouds.clouds],
    )


def object_feature_set(
    scenes: list, standardizer: Standardizer, workers: int = 1
) -> FeatureSet:
    """
    One record per ground truth object of the scenes, positioned at its box center
    """
    objects = [obj for scene in scenes for obj in scene.objects]
    if not objects:
        raise ValidationError("scenes have no objects")
    raw = _map(raw_features, [obj.cloud for obj in objects], workers)
    return FeatureSet(
        standardizer.transform(np.stack(raw)),
        [obj.label for obj in objects],
        class_names=CLASS_NAMES,
        kind="object",
        positions=[obj.center for obj in objects],
        group_sizes=[len(scene.objects) for scene in scenes],
    )


def point_clouds(feature_set: FeatureSet) -> list:
    """
    Clouds of a point feature set, from its positions and group sizes
    """
    if feature_set.positions is None:
        raise ValidationError("point features have no 'position' column")
    return [np.asarray(feature_set.positions[group], dtype=np.float64) for group in feature_set.groups()]
