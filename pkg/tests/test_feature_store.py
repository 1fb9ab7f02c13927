import os
import numpy as np
import pytest

from snadapter.errors import (
    BadMagicError,
    PayloadDimensionError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from snadapter.feature_store import (
    HEADER,
    MAGIC,
    FeatureSet,
    load_feature_set,
    meta_path,
    save_feature_set,
)


def read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


class TestRoundTrip:
    def test_empty_set(self, tmp_path):
        path = str(tmp_path / "empty.snpf")
        save_feature_set(FeatureSet(np.zeros((0, 4)), []), path)

        assert HEADER.size == 32
        assert os.path.getsize(path) == 32

        loaded = load_feature_set(path)
        assert len(loaded) == 0
        assert loaded.dim == 4

    def test_small_set_is_byte_stable(self, tmp_path):
        feature_set = FeatureSet([[1, 2, 3], [4, 5, 6]], [0, 1])
        first, second = str(tmp_path / "a.snpf"), str(tmp_path / "b.snpf")
        save_feature_set(feature_set, first)
        save_feature_set(feature_set, second)

        assert read_bytes(first) == read_bytes(second)
        assert read_bytes(meta_path(first)) == read_bytes(meta_path(second))
        assert load_feature_set(first) == feature_set

    def test_random_set_is_bitwise_equal(self, tmp_path):
        rng = np.random.default_rng(7)
        feature_set = FeatureSet(
            rng.standard_normal((1000, 64)), rng.integers(0, 10, 1000), num_classes=10
        )
        path = str(tmp_path / "random.snpf")
        save_feature_set(feature_set, path)
        loaded = load_feature_set(path)

        assert loaded == feature_set
        assert loaded.features.tobytes() == feature_set.features.tobytes()

    def test_point_set_keeps_parts_positions_and_groups(self, tmp_path):
        rng = np.random.default_rng(1)
        feature_set = FeatureSet(
            rng.standard_normal((7, 5)),
            [0, 0, 0, 1, 1, 1, 1],
            class_names=["a", "b"],
            kind="point",
            positions=rng.standard_normal((7, 3)),
            part_labels=[0, 1, 1, 2, 2, 3, 2],
            part_names=["a_x", "a_y", "b_x", "b_y"],
            valid_parts={"a": [0, 1], "b": [2, 3]},
            group_sizes=[3, 4],
        )
        path = str(tmp_path / "points.snpf")
        save_feature_set(feature_set, path)
        loaded = load_feature_set(path)

        assert loaded == feature_set
        assert loaded.kind == "point"
        assert loaded.group_sizes == [3, 4]
        assert [group.start for group in loaded.groups()] == [0, 3]
        assert loaded[4].part_label == 2

    def test_records_are_dense(self):
        feature_set = FeatureSet(np.eye(3), [0, 1, 2])
        assert [record.id for record in feature_set.records()] == [0, 1, 2]

    def test_arrays_are_immutable(self):
        feature_set = FeatureSet(np.eye(3), [0, 1, 2])
        with pytest.raises(ValueError):
            feature_set.features[0, 0] = 5.0


class TestCorruptFiles:
    def save(self, tmp_path, rows: int = 4) -> str:
        path = str(tmp_path / "set.snpf")
        save_feature_set(FeatureSet(np.ones((rows, 3)), np.zeros(rows, dtype=int)), path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self.save(tmp_path)
        data = bytearray(read_bytes(path))
        data[0:4] = b"XXXX"
        with open(path, "wb") as f:
            f.write(data)

        with pytest.raises(BadMagicError, match="bad magic"):
            load_feature_set(path)

    @pytest.mark.parametrize("length", [0, 1, 3])
    def test_start_of_the_magic_is_truncated(self, tmp_path, length):
        path = str(tmp_path / "short.snpf")
        with open(path, "wb") as f:
            f.write(MAGIC[:length])

        with pytest.raises(TruncatedPayloadError, match="truncated header"):
            load_feature_set(path)

    def test_short_foreign_file_is_bad_magic(self, tmp_path):
        path = str(tmp_path / "short.snpf")
        with open(path, "wb") as f:
            f.write(b"XY")

        with pytest.raises(BadMagicError):
            load_feature_set(path)

    def test_header_announces_more_rows(self, tmp_path):
        path = self.save(tmp_path, rows=4)
        data = read_bytes(path)
        magic, version, kind, M, C, K, positions, parts = HEADER.unpack_from(data)
        with open(path, "wb") as f:
            f.write(HEADER.pack(magic, version, kind, 5, C, K, positions, parts))
            f.write(data[HEADER.size :])

        with pytest.raises(TruncatedPayloadError, match="truncated payload"):
            load_feature_set(path)

    def test_extra_payload(self, tmp_path):
        path = self.save(tmp_path)
        with open(path, "ab") as f:
            f.write(b"\x00" * 8)

        with pytest.raises(PayloadDimensionError):
            load_feature_set(path)

    def test_version_mismatch(self, tmp_path):
        path = self.save(tmp_path)
        data = read_bytes(path)
        magic, version, *rest = HEADER.unpack_from(data)
        with open(path, "wb") as f:
            f.write(HEADER.pack(magic, version + 1, *rest))
            f.write(data[HEADER.size :])

        with pytest.raises(VersionMismatchError):
            load_feature_set(path)


class TestValidation:
    def test_non_finite_feature_names_the_record(self, tmp_path):
        features = np.ones((3, 2))
        features[1, 1] = np.nan
        with pytest.raises(ValidationError, match="record 1"):
            save_feature_set(FeatureSet(features, [0, 0, 0]), str(tmp_path / "x.snpf"))

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError, match="label 3"):
            FeatureSet(np.ones((2, 2)), [0, 3], class_names=["a", "b"]).validate()

    def test_group_sizes_must_cover_the_records(self):
        feature_set = FeatureSet(np.ones((3, 2)), [0, 0, 0], kind="point", group_sizes=[1, 1])
        with pytest.raises(ValidationError, match="group sizes"):
            feature_set.validate()
