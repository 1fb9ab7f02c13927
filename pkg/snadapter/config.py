import json
import os
from .errors import ValidationError
from .encoding import EncodingSpec, encoders, poolings
from .fusion import DEFAULT_GAMMA, DEFAULT_K
from .retrieval import KnnConfig, metrics
from .detection import PLACEMENTS, DEFAULT_IOU

TASKS = ["cls", "seg", "det"]
PE_KINDS = ["none"] + list(encoders)


class RunConfig:
    """
    Settings of a run. Loaded from a JSON file, then overridden by the command line
    flags that were explicitly given
    """

    def __init__(self):
        self.task: str = "cls"

        # Dataset directory written by gen-data, and reports directory
        self.data: str = "data"
        self.out: str = "output"
        # Explicit files (defaults derived from data and task when None)
        self.features: str | None = None
        self.store: str | None = None
        # Evaluated split (eval: test, sweep: val when None)
        self.split: str | None = None

        # Retrieval (k defaults to the task default)
        self.k: int | None = None
        self.metric: str = "euclidean"
        self.zero_distance_clamp: float = 1e-12
        self.scoped: bool = True
        self.gamma: float = DEFAULT_GAMMA

        # Sweep grids
        self.k_grid: list = list(range(1, 33))
        self.gamma_grid: list = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0]

        # Positional encoding of cls / det stores
        self.pe: str = "sincos"
        self.temperature: float = 10000.0
        self.fourier_seed: int = 0
        self.fourier_scale: float = 1.0
        self.pooling: str = "max"

        # Detection
        self.placement: str = "before_nms"
        self.nms_iou: float = DEFAULT_IOU
        self.eval_iou: float = DEFAULT_IOU
        self.class_wise_nms: bool = True

        # Dataset generation and toy classifier
        self.seed: int = 47
        self.num_per_class: int = 100
        self.split_fractions: list = [0.7, 0.1, 0.2]
        self.num_points: int = 512
        self.jitter: float = 0.02
        self.scale_range: list = [0.75, 1.25]
        self.num_scenes: list = [40, 10, 20]
        self.imbalance: dict = {}
        self.learning_rate: float = 0.5
        self.epochs: int = 300
        # Points subsampled from the train split to fit the part classifier
        self.seg_train_points: int = 20000
        self.logit_noise: float = 1.5

        # Diagnosis
        self.alpha: float = 0.95
        self.epsilon_grid: list | None = None

        self.workers: int = 1
        self.quiet: bool = False
        self.wandb: bool = False

    def update(self, values: dict) -> None:
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in vars(self):
                raise ValidationError(f"unknown config key: {key}")
            if key == "placement" and isinstance(value, str):
                value = value.replace("-", "_")
            setattr(self, key, value)

    def to_dict(self) -> dict:
        return dict(vars(self))

    @property
    def knn_k(self) -> int:
        return DEFAULT_K[self.task] if self.k is None else int(self.k)

    def knn_config(self) -> KnnConfig:
        return KnnConfig(
            k=self.knn_k, metric=self.metric, zero_distance_clamp=self.zero_distance_clamp
        )

    def encoding(self, dim: int) -> EncodingSpec | None:
        """
        Positional encoding matching features of dimension dim, None with pe=none
        """
        if self.pe == "none":
            return None
        return EncodingSpec(
            kind=self.pe,
            dim=dim,
            temperature=float(self.temperature),
            fourier_seed=int(self.fourier_seed),
            fourier_scale=float(self.fourier_scale),
        )

    def path(self, filename: str) -> str:
        return os.path.join(self.data, filename)

    def validate(self) -> None:
        def choice(name: str, known: list):
            if getattr(self, name) not in known:
                raise ValidationError(
                    f"{name}: unknown value {getattr(self, name)!r} "
                    f"(known: {', '.join(str(value) for value in known if value is not None)})"
                )

        choice("task", TASKS)
        choice("metric", list(metrics))
        choice("pe", PE_KINDS)
        choice("pooling", list(poolings))
        choice("placement", PLACEMENTS)
        choice("split", [None, "train", "val", "test"])

        if self.k is not None and int(self.k) < 1:
            raise ValidationError(f"k: must be at least 1, got {self.k}")
        if not float(self.gamma) >= 0:
            raise ValidationError(f"gamma: must be nonnegative, got {self.gamma}")
        if not self.k_grid or min(int(k) for k in self.k_grid) < 1:
            raise ValidationError("k_grid: values must be at least 1")
        if not self.gamma_grid or min(float(g) for g in self.gamma_grid) < 0:
            raise ValidationError("gamma_grid: values must be nonnegative")

        fractions = [float(f) for f in self.split_fractions]
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-6:
            raise ValidationError(
                f"split_fractions: expected 3 nonnegative values summing to 1, got {fractions}"
            )
        if len(self.num_scenes) != 3 or min(int(n) for n in self.num_scenes) < 0:
            raise ValidationError("num_scenes: expected 3 nonnegative counts (train, val, test)")
        if int(self.num_scenes[0]) == 0:
            raise ValidationError("num_scenes: the train split needs at least one scene")
        if not 0 < float(self.alpha) <= 1:
            raise ValidationError(f"alpha: must be in (0, 1], got {self.alpha}")
        if int(self.workers) < 1:
            raise ValidationError(f"workers: must be at least 1, got {self.workers}")


def load_config(filename: str | None = None, overrides: dict | None = None) -> RunConfig:
    """
    Defaults, then the JSON file values, then the overrides
    """
    config = RunConfig()
    if filename is not None:
        with open(filename) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValidationError(f"{filename}: a config file must hold a JSON object")
        config.update(data)
    if overrides:
        config.update(overrides)

    config.validate()
    return config


def parse_assignments(assignments: list) -> dict:
    """
    Parses ["key=value", ...] where value is JSON (bare strings allowed)
    """
    values = {}
    for assignment in assignments or []:
        if "=" not in assignment:
            raise ValidationError(f"expected key=value, got {assignment!r}")
        key, raw = assignment.split("=", 1)
        try:
            values[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            values[key.strip()] = raw
    return values
