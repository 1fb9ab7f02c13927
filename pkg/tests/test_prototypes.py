import numpy as np
import pytest

from snadapter.encoding import EncodingSpec, encode_position
from snadapter.errors import BadMagicError, DimensionMismatchError, FormatError, ValidationError
from snadapter.feature_store import FeatureSet
from snadapter.prototypes import (
    PrototypeStore,
    TRAILER_LENGTH,
    build_object_prototypes,
    build_part_prototypes,
    build_sample_prototypes,
    load_store,
    part_pooling,
    save_store,
)

SPEC = EncodingSpec("sincos", dim=12)


def point_set(samples: list, num_classes: int = 3, dim: int = 4, seed: int = 0) -> FeatureSet:
    """
    samples is a list of (object class, part labels of its points)
    """
    rng = np.random.default_rng(seed)
    labels, parts, sizes = [], [], []
    for object_class, sample_parts in samples:
        labels += [object_class] * len(sample_parts)
        parts += list(sample_parts)
        sizes.append(len(sample_parts))
    return FeatureSet(
        rng.standard_normal((len(labels), dim)),
        labels,
        num_classes=num_classes,
        kind="point",
        part_labels=parts,
        group_sizes=sizes,
    )


class TestSamplePrototypes:
    def test_without_encoding_vectors_are_the_features(self):
        train = FeatureSet(np.random.default_rng(0).standard_normal((10, 12)), [0, 1] * 5)
        store = build_sample_prototypes(train)

        assert store.kind == "sample"
        assert store.encoding is None
        np.testing.assert_array_equal(store.vectors, train.features)
        np.testing.assert_array_equal(store.origin_ids, np.arange(10))

    def test_zero_clouds_add_the_origin_encoding(self):
        train = FeatureSet(np.random.default_rng(0).standard_normal((4, 12)), [0, 1, 0, 1])
        clouds = [np.zeros((5, 3))] * 4
        store = build_sample_prototypes(train, clouds, SPEC, "max")

        origin = np.tile([0.0, 1.0], 6)
        np.testing.assert_array_equal(encode_position([0, 0, 0], SPEC), origin)
        np.testing.assert_allclose(store.vectors, train.features + origin, rtol=1e-6, atol=1e-6)

    def test_random_clouds_match_loop(self):
        rng = np.random.default_rng(11)
        train = FeatureSet(rng.standard_normal((50, 12)), rng.integers(0, 4, 50), num_classes=4)
        clouds = [rng.uniform(-1, 1, (rng.integers(1, 30), 3)) for _ in range(50)]
        store = build_sample_prototypes(train, clouds, SPEC, "avg")

        for i, cloud in enumerate(clouds):
            pooled = np.zeros(12)
            for point in cloud:
                pooled += encode_position(point, SPEC)
            pooled /= len(cloud)
            expected = train.features[i].astype(np.float64) + pooled
            np.testing.assert_allclose(store.vectors[i], expected, rtol=1e-6, atol=1e-6)

    def test_encoding_dim_must_match(self):
        train = FeatureSet(np.zeros((2, 6)), [0, 1])
        with pytest.raises(DimensionMismatchError, match="D=12"):
            build_sample_prototypes(train, [np.zeros((2, 3))] * 2, SPEC)

    def test_queries_need_clouds(self):
        train = FeatureSet(np.zeros((2, 12)), [0, 1])
        store = build_sample_prototypes(train, [np.zeros((2, 3))] * 2, SPEC)
        with pytest.raises(ValidationError, match="point clouds"):
            store.encode_queries(np.zeros((1, 12)))

        queries = store.encode_queries(np.zeros((1, 12)), clouds=[np.zeros((3, 3))])
        np.testing.assert_allclose(queries[0], store.vectors64[0])


class TestPartPooling:
    def test_single_part(self):
        features = np.random.default_rng(0).standard_normal((10, 3))
        pooled = part_pooling(features, [2] * 10)

        assert len(pooled) == 1
        assert pooled[0][0] == 2
        np.testing.assert_allclose(pooled[0][1], features.mean(axis=0))

    def test_two_parts(self):
        pooled = part_pooling([[1, 1], [3, 3]], [0, 1])
        assert [part for part, _ in pooled] == [0, 1]
        np.testing.assert_array_equal(pooled[0][1], [1, 1])
        np.testing.assert_array_equal(pooled[1][1], [3, 3])

    def test_accumulation_oracle(self):
        rng = np.random.default_rng(5)
        features = rng.standard_normal((300, 8))
        parts = rng.integers(0, 3, 300)
        pooled = part_pooling(features, parts)

        assert len(pooled) == 3
        for part, mean in pooled:
            total, count = np.zeros(8), 0
            for feature, label in zip(features, parts):
                if label == part:
                    total += feature
                    count += 1
            np.testing.assert_allclose(mean, total / count, atol=1e-6)

    def test_point_order_is_irrelevant(self):
        rng = np.random.default_rng(47)
        for _ in range(100):
            n = int(rng.integers(1, 200))
            features = rng.standard_normal((n, 6))
            parts = rng.integers(0, 5, n)
            permutation = rng.permutation(n)

            pooled = part_pooling(features, parts)
            shuffled = part_pooling(features[permutation], parts[permutation])

            assert [part for part, _ in shuffled] == [part for part, _ in pooled]
            for (_, a), (_, b) in zip(pooled, shuffled):
                np.testing.assert_allclose(a, b, atol=1e-6)

    def test_empty(self):
        with pytest.raises(ValidationError):
            part_pooling(np.zeros((0, 3)), [])


class TestPartPrototypes:
    def test_one_sample_two_parts(self):
        store = build_part_prototypes(point_set([(0, [0, 1, 1, 0, 1])]))
        assert len(store) == 2
        np.testing.assert_array_equal(store.part_labels, [0, 1])
        np.testing.assert_array_equal(store.labels, [0, 0])

    def test_samples_times_parts(self):
        samples = [(i % 3, [0, 1, 2] * 4) for i in range(7)]
        store = build_part_prototypes(point_set(samples))
        assert len(store) == 7 * 3

    def test_row_count_oracle(self):
        rng = np.random.default_rng(9)
        samples = []
        for _ in range(40):
            object_class = int(rng.integers(0, 3))
            parts = 3 * object_class + rng.integers(0, 3, int(rng.integers(5, 40)))
            samples.append((object_class, parts))
        store = build_part_prototypes(point_set(samples, seed=9))

        assert len(store) == sum(len(set(parts.tolist())) for _, parts in samples)
        np.testing.assert_array_equal(
            np.bincount(store.origin_ids), [len(set(parts.tolist())) for _, parts in samples]
        )

    def test_invalid_part(self):
        feature_set = point_set([(0, [0, 1, 5])])
        with pytest.raises(ValidationError, match="not in its valid parts"):
            build_part_prototypes(feature_set, {"class_0": [0, 1]})

    def test_needs_part_labels(self):
        feature_set = FeatureSet(np.zeros((3, 2)), [0, 0, 0], kind="point", group_sizes=[3])
        with pytest.raises(ValidationError, match="part_labels"):
            build_part_prototypes(feature_set)


class TestObjectPrototypes:
    def objects(self, positions, seed: int = 0) -> FeatureSet:
        positions = np.asarray(positions, dtype=np.float64)
        rng = np.random.default_rng(seed)
        return FeatureSet(
            rng.standard_normal((len(positions), 12)),
            rng.integers(0, 3, len(positions)),
            num_classes=3,
            kind="object",
            positions=positions,
        )

    def test_zero_positions(self):
        objects = self.objects(np.zeros((5, 3)))
        store = build_object_prototypes(objects, SPEC)
        np.testing.assert_allclose(
            store.vectors, objects.features + encode_position([0, 0, 0], SPEC), rtol=1e-6, atol=1e-6
        )

    def test_single_object(self):
        objects = self.objects([[1.0, 2.0, 0.5]])
        store = build_object_prototypes(objects, SPEC)
        expected = objects.features[0].astype(np.float64) + encode_position(
            objects.positions[0], SPEC
        )
        np.testing.assert_array_equal(store.vectors[0], expected.astype(np.float32))

    def test_loop_oracle(self):
        rng = np.random.default_rng(13)
        objects = self.objects(rng.uniform(-10, 10, (200, 3)), seed=13)
        store = build_object_prototypes(objects, SPEC)
        for i in range(200):
            expected = objects.features[i] + encode_position(objects.positions[i], SPEC)
            np.testing.assert_allclose(store.vectors[i], expected, atol=1e-6)

    def test_without_encoding(self):
        objects = self.objects(np.ones((3, 3)))
        store = build_object_prototypes(objects, None)
        np.testing.assert_array_equal(store.vectors, objects.features)
        np.testing.assert_array_equal(store.encode_queries(objects.features), objects.features)

    def test_missing_positions(self):
        objects = FeatureSet(np.zeros((2, 12)), [0, 1], kind="object")
        with pytest.raises(ValidationError, match="'position'"):
            build_object_prototypes(objects, SPEC)


class TestStoreFiles:
    def test_sample_store_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        train = FeatureSet(rng.standard_normal((20, 12)), rng.integers(0, 3, 20), num_classes=3)
        clouds = [rng.uniform(-1, 1, (8, 3)) for _ in range(20)]
        store = build_sample_prototypes(train, clouds, EncodingSpec("fourier", dim=12), "avg")
        path = str(tmp_path / "store.snps")
        save_store(store, path)
        loaded = load_store(path)

        assert loaded == store
        assert loaded.encoding == store.encoding
        assert loaded.pooling == "avg"

    def test_part_store_round_trip(self, tmp_path):
        store = build_part_prototypes(point_set([(0, [0, 1, 2]), (1, [3, 4, 4])]))
        path = str(tmp_path / "parts.snps")
        save_store(store, path)
        loaded = load_store(path)

        assert loaded == store
        np.testing.assert_array_equal(loaded.part_labels, store.part_labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.snps"
        path.write_bytes(b"NOPE" + b"\x00" * 60)
        with pytest.raises(BadMagicError):
            load_store(str(path))

    def test_corrupt_trailer(self, tmp_path):
        path = tmp_path / "store.snps"
        save_store(PrototypeStore(np.eye(2), [0, 1], [0, 1], "sample"), str(path))
        data = bytearray(path.read_bytes())
        (length,) = TRAILER_LENGTH.unpack_from(data, len(data) - TRAILER_LENGTH.size)
        start = len(data) - TRAILER_LENGTH.size - length
        data[start : start + length] = b"#" * length
        path.write_bytes(bytes(data))

        with pytest.raises(FormatError, match="trailer"):
            load_store(str(path))

    def test_store_is_immutable(self):
        store = PrototypeStore(np.eye(2), [0, 1], [0, 1], "sample")
        with pytest.raises(ValueError):
            store.vectors[0, 0] = 3.0
