import numpy as np
from ..detection import Box3D, Proposal, Scene
from .classifier import ToyClassifier
from ..errors import ValidationError
from .dataset import SPLITS, ToyScene
from .features import Standardizer, extract_features

# Main proposal: the object box, slightly jittered
MAIN_CENTER_JITTER = 0.05
MAIN_SIZE_JITTER = 0.05

# Duplicates: looser boxes on the same object
DUPLICATES = (1, 2)
DUPLICATE_CENTER_JITTER = 0.2
DUPLICATE_SIZE_JITTER = 0.1

# Decoys: duplicates whose logits are pushed toward another class
DECOY_PROBABILITY = 0.3
DECOY_BIAS = 2.5

# Noise added to the proposal clouds and to the classifier logits
POINT_NOISE = 0.02
LOGIT_NOISE = 1.5


def _box(obj, rng: np.random.Generator, center_jitter: float, size_jitter: float) -> tuple:
    center = obj.center + rng.normal(0.0, center_jitter, 3)
    size = obj.size * np.clip(1.0 + rng.normal(0.0, size_jitter, 3), 0.5, 1.5)
    return center, size


def synthesize_scene(
    toy_scene: ToyScene,
    standardizer: Standardizer,
    classifier: ToyClassifier,
    seed: int = 0,
    logit_noise: float = LOGIT_NOISE,
    split: str = "val",
) -> Scene:
    """
    Turns a toy scene into detector output: for each object a main proposal, jittered
    duplicates and sometimes a class-confused decoy. Proposal features are extracted
    from a noisy copy of the object cloud and logits are the classifier logits plus
    gaussian noise, so some proposals are mislabelled by the baseline alone.
    The random stream is keyed by (seed, split, scene id)
    """
    if split not in SPLITS:
        raise ValidationError(f"unknown split: {split} (known: {', '.join(SPLITS)})")
    rng = np.random.default_rng([seed, SPLITS.index(split), toy_scene.scene_id])
    ground_truth = [Box3D(obj.center, obj.size, obj.label) for obj in toy_scene.objects]
    proposals = []

    def propose(obj, center_jitter: float, size_jitter: float, bias_class: int | None = None):
        center, size = _box(obj, rng, center_jitter, size_jitter)
        cloud = obj.cloud + rng.normal(0.0, POINT_NOISE, obj.cloud.shape)
        feature = extract_features(cloud, standardizer)
        logits = classifier.logits(feature) + rng.normal(0.0, logit_noise, classifier.num_classes)
        if bias_class is not None:
            logits[bias_class] += DECOY_BIAS
        proposals.append(Proposal(Box3D(center, size, int(np.argmax(logits))), feature, logits))

    for obj in toy_scene.objects:
        propose(obj, MAIN_CENTER_JITTER, MAIN_SIZE_JITTER)
        for _ in range(int(rng.integers(DUPLICATES[0], DUPLICATES[1] + 1))):
            propose(obj, DUPLICATE_CENTER_JITTER, DUPLICATE_SIZE_JITTER)
        if rng.uniform() < DECOY_PROBABILITY:
            wrong = int(rng.integers(classifier.num_classes - 1))
            wrong += wrong >= obj.label
            propose(obj, DUPLICATE_CENTER_JITTER, DUPLICATE_SIZE_JITTER, wrong)

    order = rng.permutation(len(proposals))
    return Scene(toy_scene.scene_id, ground_truth, [proposals[i] for i in order])


def synthesize_scenes(
    toy_scenes: list,
    standardizer: Standardizer,
    classifier: ToyClassifier,
    seed: int = 0,
    logit_noise: float = LOGIT_NOISE,
    split: str = "val",
) -> list:
    return [
        synthesize_scene(scene, standardizer, classifier, seed, logit_noise, split)
        for scene in toy_scenes
    ]
