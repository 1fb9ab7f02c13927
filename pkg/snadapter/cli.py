import argparse
import json
import os
import re
import socket
import sys
import time
import numpy as np
import pandas as pd
from . import message
from .config import RunConfig, TASKS, PE_KINDS, load_config, parse_assignments
from .detection import (
    PLACEMENTS,
    detect,
    evaluate_detection,
    load_scenes,
    proposal_arrays,
    save_scenes,
    sweep_detection,
)
from .errors import SnadapterError
from .feature_store import FeatureSet, load_feature_set, save_feature_set
from .fusion import (
    predict_classification_batch,
    predict_detection,
    predict_segmentation,
    rectification_stats,
    sweep,
    sweep_segmentation,
)
from .prototypes import (
    PrototypeStore,
    build_object_prototypes,
    build_part_prototypes,
    build_sample_prototypes,
    load_store,
    save_store,
)
from .retrieval import (
    default_epsilon_grid,
    find_epsilon_star,
    metrics as distance_metrics,
    purity_coverage_curve,
)
from .toybench.classifier import ToyClassifier, train_classifier
from .toybench.dataset import (
    SPLITS,
    generate_dataset,
    object_feature_set,
    point_clouds,
    point_feature_set,
    raw_point_feature_list,
    raw_sample_features,
    sample_feature_set,
)
from .toybench.features import Standardizer
from .toybench.metrics import evaluate_metrics, masked_argmax, per_class_accuracy
from .toybench.scenes import synthesize_scenes
from .toybench.shapes import CLASS_NAMES, PART_NAMES


def features_path(config: RunConfig, split: str) -> str:
    if config.task == "det":
        if split == "train":
            return config.path("det_train.snpf")
        return config.path(f"scenes_{split}.jsonl")
    return config.path(f"{config.task}_{split}.snpf")


def store_path(config: RunConfig) -> str:
    return config.store or config.path(f"store_{config.task}.snps")


def write_report(
    config: RunConfig, name: str, frame: pd.DataFrame, sections: list | None = None
) -> None:
    """
    Writes output/<name>.csv and output/<name>.md (the table followed by the extra
    (title, DataFrame or text) sections). DataFrame sections are also written to
    output/<name>_<title>.csv
    """
    os.makedirs(config.out, exist_ok=True)
    frame.to_csv(os.path.join(config.out, f"{name}.csv"), index=False)

    lines = [f"# {name}", "", frame.to_markdown(index=False, floatfmt=".4f"), ""]
    for title, content in sections or []:
        lines += [f"## {title}", ""]
        if isinstance(content, pd.DataFrame):
            slug = re.sub(r"[^a-z0-9]+", "_", title.lower()).strip("_")
            content.to_csv(os.path.join(config.out, f"{name}_{slug}.csv"), index=False)
            lines.append(content.to_markdown(index=False, floatfmt=".4f"))
        else:
            lines.append(str(content))
        lines.append("")

    with open(os.path.join(config.out, f"{name}.md"), "w") as f:
        f.write("\n".join(lines))

    message.info(f"Report written to {message.emphasis(os.path.join(config.out, name))}.csv/.md")


def cmd_gen_data(config: RunConfig) -> None:
    message.bright(f"Generating the toy dataset (seed {config.seed})")
    dataset = generate_dataset(
        config.num_per_class,
        config.split_fractions,
        config.seed,
        config.imbalance,
        config.num_points,
        config.jitter,
        config.scale_range,
        config.num_scenes,
        config.workers,
    )
    os.makedirs(config.data, exist_ok=True)
    for split in SPLITS:
        message.print_parameter(f"{split} samples", len(dataset.split(split)))
    message.print_parameter("scenes", {split: len(dataset.scenes[split]) for split in SPLITS})

    message.bright("Extracting features")
    raw = {split: raw_sample_features(dataset.split(split), config.workers) for split in SPLITS}
    raw_points = {
        split: raw_point_feature_list(dataset.split(split), config.workers) for split in SPLITS
    }
    standardizer = Standardizer.fit(raw["train"])
    point_standardizer = Standardizer.fit(np.concatenate(raw_points["train"]))
    standardizer.save(config.path("standardizer_cls.json"))
    point_standardizer.save(config.path("standardizer_seg.json"))

    sets, point_sets = {}, {}
    for split in SPLITS:
        clouds = dataset.split(split)
        sets[split] = sample_feature_set(clouds, standardizer, raw=raw[split])
        save_feature_set(sets[split], config.path(f"cls_{split}.snpf"))
        point_sets[split] = point_feature_set(clouds, point_standardizer, raw=raw_points[split])
        save_feature_set(point_sets[split], config.path(f"seg_{split}.snpf"))
    point_train = point_sets["train"]

    objects = object_feature_set(dataset.scenes["train"], standardizer, config.workers)
    save_feature_set(objects, config.path("det_train.snpf"))

    message.bright("Training the toy classifiers")
    classifier = train_classifier(
        sets["train"].features,
        sets["train"].labels,
        num_classes=len(CLASS_NAMES),
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        seed=config.seed,
    )
    classifier.save(config.path("classifier_cls.json"))
    message.print_parameter(
        "cls loss", f"{classifier.config['losses'][0]:.4f} -> {classifier.config['losses'][-1]:.4f}"
    )

    rng = np.random.default_rng(config.seed)
    count = min(len(point_train), int(config.seg_train_points))
    subset = np.sort(rng.choice(len(point_train), count, replace=False))
    part_classifier = train_classifier(
        point_train.features[subset],
        point_train.part_labels[subset],
        num_classes=len(PART_NAMES),
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        seed=config.seed,
    )
    part_classifier.save(config.path("classifier_seg.json"))
    message.print_parameter(
        "seg loss",
        f"{part_classifier.config['losses'][0]:.4f} -> {part_classifier.config['losses'][-1]:.4f}",
    )

    message.bright("Synthesizing detection proposals")
    for split in ["val", "test"]:
        scenes = synthesize_scenes(
            dataset.scenes[split], standardizer, classifier, config.seed, config.logit_noise, split
        )
        save_scenes(scenes, config.path(f"scenes_{split}.jsonl"))
        message.print_parameter(
            f"{split} proposals", sum(len(scene.proposals) for scene in scenes)
        )

    with open(config.path("dataset.json"), "w") as f:
        summary = {
            "seed": config.seed,
            "class_names": CLASS_NAMES,
            "part_names": PART_NAMES,
            "class_counts": {split: dataset.split(split).class_counts() for split in SPLITS},
            "num_objects": len(objects),
        }
        json.dump(summary, f, indent=2, sort_keys=True)

    message.info(message.success(f"Dataset written to {config.data}"))


def _clouds(config: RunConfig, split: str, store: PrototypeStore | None = None) -> list | None:
    """
    Point clouds of a split (from the segmentation points), needed when the
    classification store carries global positional vectors
    """
    if store is not None and store.encoding is None:
        return None
    return point_clouds(load_feature_set(config.path(f"seg_{split}.snpf")))


def build_store(config: RunConfig) -> PrototypeStore:
    train = load_feature_set(config.features or features_path(config, "train"))

    if config.task == "cls":
        spec = config.encoding(train.dim)
        clouds = None if spec is None else _clouds(config, "train")
        return build_sample_prototypes(train, clouds, spec, config.pooling)
    if config.task == "seg":
        return build_part_prototypes(train)

    return build_object_prototypes(train, config.encoding(train.dim))


def cmd_build_protos(config: RunConfig) -> None:
    message.bright(f"Building {config.task} prototypes")
    store = build_store(config)
    save_store(store, store_path(config))

    message.print_parameter("kind", store.kind)
    message.print_parameter("rows", len(store))
    message.print_parameter("dim", store.dim)
    message.print_parameter(
        "encoding", "none" if store.encoding is None else store.encoding.kind
    )
    message.print_parameter("memory", f"{store.nbytes()} bytes")
    message.info(f"Store written to {message.emphasis(store_path(config))}")


def _seg_instances(config: RunConfig, points: FeatureSet, classifier: ToyClassifier) -> list:
    instances = []
    for group in points.groups():
        object_class = int(points.labels[group.start])
        features = np.asarray(points.features[group], dtype=np.float64)
        instances.append(
            {
                "features": features,
                "logits": classifier.logits(features),
                "parts": np.asarray(points.part_labels[group]),
                "object_class": object_class,
                "valid_parts": points.valid_parts[points.class_names[object_class]],
            }
        )
    return instances


def evaluate_cls(config: RunConfig, store: PrototypeStore) -> tuple:
    queries = load_feature_set(config.features or features_path(config, config.split))
    classifier = ToyClassifier.load(config.path("classifier_cls.json"))
    logits = classifier.logits(queries.features)
    clouds = _clouds(config, config.split, store)

    start = time.perf_counter()
    fused = predict_classification_batch(
        queries.features, store, logits, config.knn_config(), config.gamma, clouds, config.workers
    )
    elapsed = time.perf_counter() - start

    predictions = {
        "baseline": fused.baseline_argmax(),
        "knn": fused.knn_argmax(),
        "fused": fused.argmax(),
    }
    rows = []
    per_class = {"class": queries.class_names}
    for method, preds in predictions.items():
        rows.append({"method": method, **evaluate_metrics(preds, queries.labels, "cls")})
        accuracies = per_class_accuracy(preds, queries.labels)
        per_class[method] = [accuracies.get(c, np.nan) for c in range(queries.num_classes)]

    stats = rectification_stats(
        predictions["baseline"], predictions["knn"], predictions["fused"], queries.labels
    )
    rectification = pd.DataFrame(
        stats.rows(), columns=["baseline_correct", "knn_correct", "fused_correct", "count"]
    )
    sections = [
        ("Per-class accuracy", pd.DataFrame(per_class)),
        ("Rectification", rectification),
        (
            "Totals",
            f"{stats.total} samples: baseline {stats.baseline_correct}, "
            f"knn {stats.knn_correct}, fused {stats.fused_correct} correct",
        ),
    ]
    return rows, sections, elapsed


def evaluate_seg(config: RunConfig, store: PrototypeStore) -> tuple:
    points = load_feature_set(config.features or features_path(config, config.split))
    classifier = ToyClassifier.load(config.path("classifier_seg.json"))
    instances = _seg_instances(config, points, classifier)

    predictions = {"baseline": [], "knn": [], "fused": []}
    elapsed = 0.0
    for instance in instances:
        start = time.perf_counter()
        fused = predict_segmentation(
            instance["features"],
            store,
            instance["logits"],
            config.knn_config(),
            config.gamma,
            instance["object_class"],
            config.scoped,
            config.workers,
        )
        elapsed += time.perf_counter() - start

        mask = np.zeros(fused.fused.shape[1], dtype=bool)
        mask[instance["valid_parts"]] = True
        predictions["baseline"].append(masked_argmax(fused.baseline_logits, mask))
        predictions["knn"].append(masked_argmax(fused.knn_probs, mask))
        predictions["fused"].append(masked_argmax(fused.fused, mask))

    labels = [instance["parts"] for instance in instances]
    valid_parts = [instance["valid_parts"] for instance in instances]
    rows = [
        {"method": method, **evaluate_metrics(preds, labels, "seg", valid_parts)}
        for method, preds in predictions.items()
    ]
    return rows, [], elapsed


def evaluate_det(config: RunConfig, store: PrototypeStore) -> tuple:
    scenes = load_scenes(config.features or features_path(config, config.split))
    cfg = config.knn_config()
    detections = {"baseline": [], "knn": [], "fused": []}
    elapsed = 0.0

    for scene in scenes:
        if len(scene.proposals) == 0:
            for method in detections:
                detections[method].append([])
            continue
        features, positions, logits = proposal_arrays(scene.proposals)
        start = time.perf_counter()
        fused = predict_detection(
            features, positions, store, logits, cfg, config.gamma, workers=config.workers
        )
        elapsed += time.perf_counter() - start

        def run(gamma: float, placement: str, knn_only: bool = False) -> list:
            return detect(
                scene.proposals,
                logits,
                fused.knn_probs,
                gamma,
                placement,
                config.nms_iou,
                config.class_wise_nms,
                knn_only,
            )

        detections["baseline"].append(run(0.0, "before_nms"))
        detections["knn"].append(run(0.0, "before_nms", knn_only=True))
        detections["fused"].append(run(config.gamma, config.placement))

    ground_truth = [scene.ground_truth for scene in scenes]
    rows = []
    iou = f"{config.eval_iou:g}"
    for method, boxes in detections.items():
        result = evaluate_detection(boxes, ground_truth, config.eval_iou)
        rows.append(
            {
                "method": method,
                "placement": config.placement if method == "fused" else "before_nms",
                f"mAP@{iou}": result.mean_ap,
                f"mAR@{iou}": result.mean_ar,
            }
        )
    return rows, [], elapsed


evaluators = {
    "cls": evaluate_cls,
    "seg": evaluate_seg,
    "det": evaluate_det,
}


def cmd_eval(config: RunConfig) -> None:
    config.split = config.split or "test"
    store = load_store(store_path(config))
    message.bright(
        f"Evaluating {config.task} on {config.split} (k={config.knn_k}, gamma={config.gamma:g})"
    )
    rows, sections, elapsed = evaluators[config.task](config, store)

    frame = pd.DataFrame(rows)
    frame.insert(0, "task", config.task)
    frame.insert(2, "k", config.knn_k)
    frame.insert(3, "gamma", float(config.gamma))

    baseline = rows[0]
    for row in rows:
        for name, value in row.items():
            if isinstance(value, float):
                message.print_metric(
                    f"{row['method']} {name}", value, None if row is baseline else baseline[name]
                )

    sections = sections + [
        (
            "Cost",
            f"store memory {store.nbytes()} bytes ({len(store)} x {store.dim} prototypes)",
        )
    ]
    # Wall time is printed only, reports must be identical across reruns
    message.print_parameter("retrieval time", f"{elapsed:.4f} s")
    message.print_parameter("store memory", f"{store.nbytes()} bytes")
    write_report(config, f"eval_{config.task}", frame, sections)


def run_sweep(config: RunConfig, store: PrototypeStore, on_point=None):
    split = config.split
    cfg = dict(metric=config.metric, zero_distance_clamp=config.zero_distance_clamp)

    if config.task == "cls":
        queries = load_feature_set(config.features or features_path(config, split))
        classifier = ToyClassifier.load(config.path("classifier_cls.json"))
        return sweep(
            queries.features,
            store,
            classifier.logits(queries.features),
            queries.labels,
            config.k_grid,
            config.gamma_grid,
            clouds=_clouds(config, split, store),
            on_point=on_point,
            workers=config.workers,
            **cfg,
        )
    if config.task == "seg":
        points = load_feature_set(config.features or features_path(config, split))
        classifier = ToyClassifier.load(config.path("classifier_seg.json"))
        return sweep_segmentation(
            _seg_instances(config, points, classifier),
            store,
            config.k_grid,
            config.gamma_grid,
            scoped=config.scoped,
            on_point=on_point,
            workers=config.workers,
            **cfg,
        )

    return sweep_detection(
        load_scenes(config.features or features_path(config, split)),
        store,
        config.k_grid,
        config.gamma_grid,
        placement=config.placement,
        iou_threshold=config.nms_iou,
        eval_iou=config.eval_iou,
        on_point=on_point,
        workers=config.workers,
        **cfg,
    )


def cmd_sweep(config: RunConfig) -> None:
    config.split = config.split or "val"
    store = load_store(store_path(config))
    message.bright(
        f"Sweeping {config.task} on {config.split}: {len(config.k_grid)} k x "
        f"{len(config.gamma_grid)} gamma"
    )

    wandb_run = None
    if config.wandb:
        import wandb

        wandb_run = wandb.init(
            name=f"sweep_{config.task}_{config.seed}",
            project="snadapter_sweep",
            config={**config.to_dict(), "hostname": socket.gethostname()},
        )

    def on_point(k: int, gamma: float, value: float) -> None:
        if wandb_run is not None:
            wandb_run.log({"sweep/k": k, "sweep/gamma": gamma, "sweep/value": value})

    result = run_sweep(config, store, on_point)
    if wandb_run is not None:
        wandb_run.finish()

    frame = pd.DataFrame(result.rows(), columns=["k", "gamma", "metric_name", "value"])
    curves = frame.pivot(index="k", columns="gamma", values="value").reset_index()
    curves.columns = ["k"] + [f"gamma={gamma:g}" for gamma in curves.columns[1:]]
    summary = (
        f"best k={result.best_k}, gamma={result.best_gamma:g}: "
        f"{result.metric_name}={result.best_value:.4f} "
        f"(baseline {result.baseline_value:.4f})"
    )
    write_report(config, f"sweep_{config.task}", frame, [("Best", summary), ("Curves", curves)])

    message.print_parameter("best k", result.best_k)
    message.print_parameter("best gamma", result.best_gamma)
    message.print_metric(result.metric_name, result.best_value, result.baseline_value)


def cmd_diagnose(config: RunConfig) -> None:
    store = load_store(store_path(config))
    message.bright(f"Diagnosing the {store.kind} store ({len(store)} prototypes)")

    search = find_epsilon_star(store, config.alpha)
    epsilons = config.epsilon_grid
    if epsilons is None:
        epsilons = default_epsilon_grid(store)
    curve = purity_coverage_curve(store, epsilons)

    frame = pd.DataFrame(curve, columns=["epsilon", "purity", "coverage"])
    summary = (
        f"alpha={config.alpha:g}: epsilon*={search.epsilon:.6f}, purity {search.purity:.4f}, "
        f"coverage {search.coverage:.4f}"
    )
    if not search.found:
        summary += " (no radius reaches alpha, fell back to 0)"
    write_report(config, f"diagnose_{config.task}", frame, [("Epsilon*", summary)])

    message.print_parameter("epsilon*", search.epsilon)
    message.print_parameter("purity", search.purity)
    message.print_parameter("coverage", search.coverage)


commands = {
    "gen-data": (cmd_gen_data, "generate the toy dataset, features, classifiers and scenes"),
    "build-protos": (cmd_build_protos, "build a prototype store from training features"),
    "eval": (cmd_eval, "baseline, k-NN and fused metrics on a split"),
    "sweep": (cmd_sweep, "grid search of k and gamma"),
    "diagnose": (cmd_diagnose, "purity / coverage of the store over epsilon"),
}


class ArgumentParser(argparse.ArgumentParser):
    """
    Usage errors exit with code 1
    """

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _list(cast):
    def parse(value: str) -> list:
        try:
            return [cast(item) for item in value.split(",") if item.strip() != ""]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma separated list, got {value!r}")

    return parse


def _imbalance(value: str) -> tuple:
    if "=" not in value:
        raise argparse.ArgumentTypeError(f"expected CLASS=FACTOR, got {value!r}")
    name, factor = value.split("=", 1)
    try:
        return name, float(factor)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid factor in {value!r}")


def add_arguments(parser: argparse.ArgumentParser) -> None:
    # Only given flags override the config file
    add = lambda *names, **kwargs: parser.add_argument(
        *names, default=argparse.SUPPRESS, **kwargs
    )
    add("--config", type=str, help="JSON run config")
    add("--task", choices=TASKS)
    add("--data", type=str, help="dataset directory")
    add("--features", type=str, help="input features (or scenes) file")
    add("--store", type=str, help="prototype store file")
    add("--out", type=str, help="reports directory")
    add("--split", choices=SPLITS)
    add("--k", type=int)
    add("--gamma", type=float)
    add("--metric", choices=list(distance_metrics))
    add("--pe", choices=PE_KINDS)
    add("--pooling", choices=["avg", "max"])
    add("--placement", choices=[placement.replace("_", "-") for placement in PLACEMENTS])
    add("--seed", type=int)
    add("--k-grid", dest="k_grid", type=_list(int))
    add("--gamma-grid", dest="gamma_grid", type=_list(float))
    add("--epsilon-grid", dest="epsilon_grid", type=_list(float))
    add("--alpha", type=float)
    add("--split-fractions", dest="split_fractions", type=_list(float))
    add("--num-per-class", dest="num_per_class", type=int)
    add("--imbalance", type=_imbalance, nargs="+", metavar="CLASS=FACTOR")
    add("--unscoped", dest="scoped", action="store_false", help="segmentation retrieval over all parts")
    add("--workers", type=int)
    add("--quiet", action="store_true")
    add("--wandb", action="store_true", help="stream sweep points to Weights & Biases")
    add("--set", dest="assignments", nargs="+", metavar="KEY=VALUE", help="override any config key")


def make_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="snadapter", description="Spatial-neighbor adapter toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help) in commands.items():
        add_arguments(subparsers.add_parser(name, help=help))
    return parser


def overrides(args: argparse.Namespace) -> dict:
    values = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config", "assignments")
    }
    if "imbalance" in values:
        values["imbalance"] = dict(values["imbalance"])
    values.update(parse_assignments(getattr(args, "assignments", [])))
    return values


def main(argv: list | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        config = load_config(getattr(args, "config", None), overrides(args))
        message.set_quiet(config.quiet)
        commands[args.command][0](config)
    except (SnadapterError, OSError, ValueError) as e:
        message.error(f"{args.command}: {e}")
        return 2
    finally:
        message.set_quiet(False)

    return 0
