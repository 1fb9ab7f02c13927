import os
import numpy as np
import pandas as pd
import pytest

from snadapter.cli import main
from snadapter.feature_store import load_feature_set
from snadapter.fusion import predict_classification_batch
from snadapter.prototypes import load_store
from snadapter.retrieval import KnnConfig
from snadapter.toybench.classifier import ToyClassifier
from snadapter.toybench.dataset import point_clouds
from snadapter.toybench.metrics import mean_class_accuracy, overall_accuracy

TINY = [
    "--num-per-class",
    "10",
    "--set",
    "num_points=64",
    "num_scenes=[3,2,2]",
    "epochs=20",
    "seg_train_points=2000",
]


def generate(directory) -> int:
    return main(["gen-data", "--data", str(directory), "--quiet"] + TINY)


def read_files(directory) -> dict:
    contents = {}
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as f:
            contents[name] = f.read()
    return contents


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    directory = tmp_path_factory.mktemp("data")
    assert generate(directory) == 0
    return directory


def run(command: str, data, out, *flags) -> int:
    # Stores are kept next to the reports so the shared dataset stays untouched
    store = os.path.join(str(out), "store.snps")
    return main(
        [command, "--data", str(data), "--out", str(out), "--store", store, "--quiet", *flags]
    )


class TestGenData:
    def test_files(self, data):
        names = set(os.listdir(data))
        for split in ["train", "val", "test"]:
            assert f"cls_{split}.snpf" in names
            assert f"seg_{split}.snpf" in names
        assert {"det_train.snpf", "scenes_val.jsonl", "scenes_test.jsonl", "dataset.json"} <= names
        assert {"classifier_cls.json", "classifier_seg.json", "standardizer_cls.json"} <= names

        assert len(load_feature_set(os.path.join(data, "cls_train.snpf"))) == 7 * 8

    def test_same_seed_same_files(self, data, tmp_path):
        assert generate(tmp_path) == 0
        assert read_files(tmp_path) == read_files(data)

    def test_invalid_split_fractions(self, tmp_path, capsys):
        code = main(["gen-data", "--data", str(tmp_path), "--split-fractions", "0.5,0.5,0.5"])

        assert code == 2
        assert "split_fractions" in capsys.readouterr().err

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exit:
            main(["gen-data", "--k", "many"])
        assert exit.value.code == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        assert main(["gen-data", "--data", str(tmp_path), "--set", "gama=2"]) == 2
        assert "gama" in capsys.readouterr().err


class TestClassification:
    def test_zero_gamma_fused_is_the_baseline(self, data, tmp_path):
        assert run("build-protos", data, tmp_path, "--task", "cls") == 0
        assert run("eval", data, tmp_path, "--task", "cls", "--gamma", "0", "--k", "3") == 0

        frame = pd.read_csv(tmp_path / "eval_cls.csv")
        assert list(frame["method"]) == ["baseline", "knn", "fused"]
        baseline, fused = frame.iloc[0], frame.iloc[2]
        assert fused["OA"] == baseline["OA"]
        assert fused["mAcc"] == baseline["mAcc"]

        test = load_feature_set(os.path.join(data, "cls_test.snpf"))
        predictions = ToyClassifier.load(os.path.join(data, "classifier_cls.json")).predict(
            test.features
        )
        assert baseline["OA"] == pytest.approx(overall_accuracy(predictions, test.labels))
        assert baseline["mAcc"] == pytest.approx(mean_class_accuracy(predictions, test.labels))

    def test_sweep_rows(self, data, tmp_path):
        assert run("build-protos", data, tmp_path, "--task", "cls", "--pe", "none") == 0
        code = run(
            "sweep", data, tmp_path, "--task", "cls", "--pe", "none",
            "--k-grid", "1,3,5", "--gamma-grid", "0,8",
        )
        assert code == 0

        frame = pd.read_csv(tmp_path / "sweep_cls.csv")
        assert list(frame.columns) == ["k", "gamma", "metric_name", "value"]
        assert len(frame) == 3 * 2
        assert set(frame["metric_name"]) == {"OA"}
        baseline = frame[frame["gamma"] == 0]["value"]
        assert baseline.nunique() == 1

    def test_reports_are_reproducible(self, data, tmp_path):
        assert run("build-protos", data, tmp_path, "--task", "cls") == 0
        assert run("eval", data, tmp_path, "--task", "cls", "--out", str(tmp_path / "a")) == 0
        assert run("eval", data, tmp_path, "--task", "cls", "--out", str(tmp_path / "b")) == 0
        assert read_files(tmp_path / "a") == read_files(tmp_path / "b")

    def test_diagnose(self, data, tmp_path):
        assert run("build-protos", data, tmp_path, "--task", "cls") == 0
        assert run("diagnose", data, tmp_path, "--task", "cls") == 0

        frame = pd.read_csv(tmp_path / "diagnose_cls.csv")
        assert list(frame.columns) == ["epsilon", "purity", "coverage"]
        assert frame.iloc[0]["epsilon"] == 0.0
        assert frame.iloc[0]["purity"] == 1.0
        assert np.all(np.diff(frame["coverage"]) >= 0)
        assert "epsilon*" in (tmp_path / "diagnose_cls.md").read_text()

    def test_missing_store(self, data, tmp_path, capsys):
        assert run("eval", data, tmp_path, "--task", "cls", "--store", str(tmp_path / "none.snps")) == 2
        assert "eval" in capsys.readouterr().err


class TestSegmentation:
    def test_eval_and_sweep(self, data, tmp_path):
        assert run("build-protos", data, tmp_path, "--task", "seg") == 0
        assert run("eval", data, tmp_path, "--task", "seg", "--gamma", "0") == 0

        frame = pd.read_csv(tmp_path / "eval_seg.csv")
        assert list(frame.columns) == ["task", "method", "k", "gamma", "OA", "mIoU_I"]
        assert frame.iloc[2]["mIoU_I"] == frame.iloc[0]["mIoU_I"]

        assert run("sweep", data, tmp_path, "--task", "seg", "--k-grid", "1,2", "--gamma-grid", "0,4") == 0
        assert set(pd.read_csv(tmp_path / "sweep_seg.csv")["metric_name"]) == {"mIoU_I"}


class TestDetection:
    @pytest.mark.parametrize("placement", ["before-nms", "after-nms"])
    def test_eval(self, data, tmp_path, placement):
        assert run("build-protos", data, tmp_path, "--task", "det") == 0
        assert run("eval", data, tmp_path, "--task", "det", "--placement", placement) == 0

        frame = pd.read_csv(tmp_path / "eval_det.csv")
        assert list(frame["method"]) == ["baseline", "knn", "fused"]
        assert frame.iloc[2]["placement"] == placement.replace("-", "_")
        assert frame["mAR@0.25"].between(0, 1).all()

    @pytest.mark.parametrize("placement", ["before-nms", "after-nms"])
    def test_zero_gamma_is_the_baseline(self, data, tmp_path, placement):
        assert run("build-protos", data, tmp_path, "--task", "det") == 0
        code = run("eval", data, tmp_path, "--task", "det", "--placement", placement, "--gamma", "0")
        assert code == 0

        frame = pd.read_csv(tmp_path / "eval_det.csv")
        baseline, fused = frame.iloc[0], frame.iloc[2]
        assert fused["mAP@0.25"] == baseline["mAP@0.25"]
        assert fused["mAR@0.25"] == baseline["mAR@0.25"]

    def test_sweep(self, data, tmp_path):
        assert run("build-protos", data, tmp_path, "--task", "det") == 0
        assert run("sweep", data, tmp_path, "--task", "det", "--k-grid", "1,4", "--gamma-grid", "0,8") == 0
        assert set(pd.read_csv(tmp_path / "sweep_det.csv")["metric_name"]) == {"AR25"}

    def test_store_needs_positions(self, data, tmp_path, capsys):
        features = str(data / "cls_train.snpf")
        assert run("build-protos", data, tmp_path, "--task", "det", "--features", features) == 2
        assert "position" in capsys.readouterr().err


class TestClassificationDemo:
    def test_default_split(self, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-data", "--data", str(data), "--seed", "47", "--quiet"]) == 0
        sizes = [len(load_feature_set(data / f"cls_{split}.snpf")) for split in ["train", "val", "test"]]
        assert sizes == [560, 80, 160]

        assert run("build-protos", data, tmp_path, "--task", "cls") == 0
        k_grid = ",".join(str(k) for k in range(1, 33))
        code = run(
            "sweep", data, tmp_path, "--task", "cls", "--k-grid", k_grid,
            "--gamma-grid", "0,1,2,4,8,16",
        )
        assert code == 0

        sweep = pd.read_csv(tmp_path / "sweep_cls.csv")
        assert len(sweep) == 32 * 6
        baseline = sweep[sweep["gamma"] == 0]["value"].iloc[0]
        assert sweep["value"].max() >= baseline

        best = sweep.loc[sweep["value"].idxmax()]
        k, gamma = int(best["k"]), float(best["gamma"])
        code = run(
            "eval", data, tmp_path, "--task", "cls", "--split", "val",
            "--k", str(k), "--gamma", str(gamma),
        )
        assert code == 0
        assert pd.read_csv(tmp_path / "eval_cls.csv").iloc[2]["OA"] == pytest.approx(best["value"])

        val = load_feature_set(data / "cls_val.snpf")
        logits = ToyClassifier.load(os.path.join(data, "classifier_cls.json")).logits(val.features)
        clouds = point_clouds(load_feature_set(data / "seg_val.snpf"))
        fused = predict_classification_batch(
            val.features, load_store(tmp_path / "store.snps"), logits, KnnConfig(k=k), gamma, clouds
        )

        counts = {}
        for b, r, f, label in zip(fused.baseline_argmax(), fused.knn_argmax(), fused.argmax(), val.labels):
            key = (bool(b == label), bool(r == label), bool(f == label))
            counts[key] = counts.get(key, 0) + 1

        table = pd.read_csv(tmp_path / "eval_cls_rectification.csv").to_dict("records")
        assert len(table) == 5
        for row in table:
            key = (bool(row["baseline_correct"]), bool(row["knn_correct"]), bool(row["fused_correct"]))
            assert row["count"] == counts.get(key, 0)

        others = sum(counts.get(key, 0) for key in [(True, True, True), (True, True, False), (False, False, False)])
        assert sum(row["count"] for row in table) + others == 80
