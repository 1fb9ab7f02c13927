import json
import struct
import numpy as np
from .errors import ValidationError, DimensionMismatchError, FormatError, TruncatedPayloadError
from .encoding import EncodingSpec, encode_positions, global_position_vector
from .feature_store import FeatureSet, HEADER, readonly, read_column, read_header

MAGIC = b"SNPS"
VERSION = 1
KINDS = ["sample", "part", "object"]
TRAILER_LENGTH = struct.Struct("<Q")

# Maximum number of parts of a single sample
MAX_PARTS = 6


class PrototypeStore:
    """
    Immutable memory of R prototype vectors of dimension C.

    - sample: one prototype per training sample, labels are object classes
    - part: one prototype per (sample, part), labels are the sample object classes
      (used to scope retrieval) and part_labels the part of each row
    - object: one prototype per training object, labels are object classes

    encoding is the positional encoding used at build time (None if not used);
    queries must be encoded the same way (see encode_queries)
    """

    def __init__(
        self,
        vectors,
        labels,
        origin_ids,
        kind: str,
        part_labels=None,
        encoding: EncodingSpec | None = None,
        pooling: str | None = None,
        class_names: list | None = None,
        part_names: list | None = None,
        valid_parts: dict | None = None,
    ):
        if kind not in KINDS:
            raise ValidationError(f"unknown store kind: {kind}")

        self.vectors: np.ndarray = readonly(np.array(vectors, dtype=np.float32))
        if self.vectors.ndim != 2:
            raise DimensionMismatchError("prototype vectors must be a R x C matrix")
        self.labels: np.ndarray = readonly(np.array(labels, dtype=np.int32).reshape(-1))
        self.origin_ids: np.ndarray = readonly(
            np.array(origin_ids, dtype=np.int32).reshape(-1)
        )
        self.kind: str = kind
        self.part_labels: np.ndarray | None = None
        if part_labels is not None:
            self.part_labels = readonly(np.array(part_labels, dtype=np.int32).reshape(-1))

        self.encoding: EncodingSpec | None = encoding
        self.pooling: str | None = pooling
        self.class_names: list = list(class_names or [])
        self.part_names: list = list(part_names or [])
        self.valid_parts: dict = dict(valid_parts or {})

        if len(self.labels) != len(self.vectors) or len(self.origin_ids) != len(self.vectors):
            raise DimensionMismatchError(
                f"store has {len(self.vectors)} vectors but {len(self.labels)} labels "
                f"and {len(self.origin_ids)} origin ids"
            )
        if kind == "part" and (
            self.part_labels is None or len(self.part_labels) != len(self.vectors)
        ):
            raise ValidationError("every row of a part store needs a part label")

        # Distances are computed in double precision
        self.vectors64: np.ndarray = readonly(self.vectors.astype(np.float64))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def retrieval_labels(self) -> np.ndarray:
        """
        Labels voted by retrieved neighbors: parts for a part store, classes otherwise
        """
        if self.kind == "part":
            return self.part_labels
        return self.labels

    @property
    def num_retrieval_classes(self) -> int:
        if self.kind == "part":
            if self.part_names:
                return len(self.part_names)
            return int(self.part_labels.max()) + 1 if len(self) else 0
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if len(self) else 0

    def scoped_rows(self, scope: int | None) -> np.ndarray:
        """
        Row indices retrievable under a class scope (None: all rows)
        """
        if scope is None:
            return np.arange(len(self))
        return np.flatnonzero(self.labels == scope)

    def nbytes(self) -> int:
        total = self.vectors.nbytes + self.labels.nbytes + self.origin_ids.nbytes
        if self.part_labels is not None:
            total += self.part_labels.nbytes
        return total

    def encode_queries(self, features, clouds: list | None = None, positions=None) -> np.ndarray:
        """
        Turns raw query features into query vectors comparable with the prototypes,
        adding the same positional encoding that was used to build the store
        """
        queries = np.asarray(features, dtype=np.float64)
        if queries.ndim == 1:
            queries = queries[None, :]
        if queries.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"queries have dimension {queries.shape[1]}, store has {self.dim}"
            )
        if self.encoding is None:
            return queries

        if self.kind == "sample":
            if clouds is None or len(clouds) != len(queries):
                raise ValidationError(
                    "the store was built with a global positional vector, "
                    "queries need their point clouds"
                )
            return queries + np.stack(
                [global_position_vector(cloud, self.pooling, self.encoding) for cloud in clouds]
            )

        if self.kind == "object":
            if positions is None:
                raise ValidationError(
                    "the store was built with positional encodings, queries need positions"
                )
            return queries + encode_positions(positions, self.encoding)

        return queries

    def trailer(self) -> dict:
        return {
            "kind": self.kind,
            "encoding": None if self.encoding is None else self.encoding.to_dict(),
            "pooling": self.pooling,
            "class_names": self.class_names,
            "part_names": self.part_names,
            "valid_parts": self.valid_parts,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeStore):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.trailer() == other.trailer()
            and same(self.vectors, other.vectors)
            and same(self.labels, other.labels)
            and same(self.origin_ids, other.origin_ids)
            and same(self.part_labels, other.part_labels)
        )


def check_encoding(spec: EncodingSpec | None, dim: int) -> None:
    if spec is not None and spec.dim != dim:
        raise DimensionMismatchError(
            f"positional encoding dim D={spec.dim} must equal the feature dim C={dim}"
        )


def build_sample_prototypes(
    train: FeatureSet,
    point_clouds: list | None = None,
    spec: EncodingSpec | None = None,
    pooling: str = "max",
) -> PrototypeStore:
    """
    One prototype per training sample. When spec is given, the global positional
    vector of each sample cloud is added to its feature
    """
    train.validate()
    vectors = train.features.astype(np.float64)

    if spec is not None:
        check_encoding(spec, train.dim)
        if point_clouds is None or len(point_clouds) != len(train):
            raise ValidationError(
                "a point cloud per training sample is required to add positional vectors"
            )
        vectors = vectors + np.stack(
            [global_position_vector(cloud, pooling, spec) for cloud in point_clouds]
        )
    else:
        pooling = None
        vectors = train.features

    return PrototypeStore(
        vectors,
        train.labels,
        np.arange(len(train)),
        "sample",
        encoding=spec,
        pooling=pooling,
        class_names=train.class_names,
    )


def part_pooling(point_features, point_part_labels) -> list:
    """
    Averages the features of the points sharing a part label, returns a list of
    (part_label, mean vector) sorted by part label
    """
    point_features = np.asarray(point_features, dtype=np.float64)
    point_part_labels = np.asarray(point_part_labels).reshape(-1)
    if len(point_features) == 0:
        raise ValidationError("can't pool the parts of an empty sample")

    parts, inverse, counts = np.unique(
        point_part_labels, return_inverse=True, return_counts=True
    )
    sums = np.zeros((len(parts), point_features.shape[1]))
    np.add.at(sums, inverse.reshape(-1), point_features)
    means = sums / counts[:, None]

    return [(int(part), mean) for part, mean in zip(parts, means)]


def build_part_prototypes(
    train: FeatureSet, valid_part_map: dict | None = None
) -> PrototypeStore:
    """
    Part-pools every training sample of a point-level feature set. Each row is
    tagged with its sample object class so retrieval can be scoped to it
    """
    train.validate()
    if train.part_labels is None:
        raise ValidationError("point features have no 'part_labels' column")
    if not train.group_sizes:
        raise ValidationError("point features have no 'group_sizes' (samples are unknown)")
    if valid_part_map is None:
        valid_part_map = train.valid_parts

    vectors, labels, part_labels, origin_ids = [], [], [], []
    for sample, group in enumerate(train.groups()):
        if group.stop == group.start:
            continue
        object_class = int(train.labels[group.start])
        class_name = train.class_names[object_class]
        pooled = part_pooling(train.features[group], train.part_labels[group])

        if len(pooled) > MAX_PARTS:
            raise ValidationError(
                f"sample {sample} has {len(pooled)} parts, at most {MAX_PARTS} are supported"
            )
        if class_name in valid_part_map:
            valid = set(valid_part_map[class_name])
            for part, _ in pooled:
                if part not in valid:
                    raise ValidationError(
                        f"sample {sample} ({class_name}) has part {part}, "
                        f"not in its valid parts {sorted(valid)}"
                    )

        for part, mean in pooled:
            vectors.append(mean)
            labels.append(object_class)
            part_labels.append(part)
            origin_ids.append(sample)

    return PrototypeStore(
        np.array(vectors).reshape(len(vectors), train.dim),
        labels,
        origin_ids,
        "part",
        part_labels=part_labels,
        class_names=train.class_names,
        part_names=train.part_names,
        valid_parts=valid_part_map,
    )


def build_object_prototypes(objects: FeatureSet, spec: EncodingSpec | None) -> PrototypeStore:
    """
    Object prototypes: feature + PE(position). spec=None builds the store without
    positional encodings (prototype = feature)
    """
    objects.validate()
    if objects.positions is None:
        raise ValidationError("object features have no 'position' column")

    if spec is None:
        vectors = objects.features
    else:
        check_encoding(spec, objects.dim)
        vectors = objects.features.astype(np.float64) + encode_positions(
            objects.positions, spec
        )

    return PrototypeStore(
        vectors,
        objects.labels,
        np.arange(len(objects)),
        "object",
        encoding=spec,
        class_names=objects.class_names,
    )


def save_store(store: PrototypeStore, path: str) -> None:
    """
    SNPS file: SNPF-like header and columns (vectors, labels, origin ids, part labels)
    followed by a JSON trailer and the trailer length as a final u64
    """
    R, C = store.vectors.shape
    has_parts = store.part_labels is not None
    trailer = json.dumps(store.trailer(), sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(
            HEADER.pack(
                MAGIC,
                VERSION,
                KINDS.index(store.kind),
                R,
                C,
                store.num_retrieval_classes,
                False,
                has_parts,
            )
        )
        f.write(store.vectors.astype("<f4").tobytes())
        f.write(store.labels.astype("<i4").tobytes())
        f.write(store.origin_ids.astype("<i4").tobytes())
        if has_parts:
            f.write(store.part_labels.astype("<i4").tobytes())
        f.write(trailer)
        f.write(TRAILER_LENGTH.pack(len(trailer)))


def load_store(path: str) -> PrototypeStore:
    with open(path, "rb") as f:
        data = f.read()

    kind, R, C, _, _, has_parts = read_header(data, MAGIC, VERSION)
    if kind >= len(KINDS):
        raise FormatError(f"unknown store kind code {kind}")

    columns = R * C * 4 + R * 8 + has_parts * R * 4
    if len(data) < HEADER.size + columns + TRAILER_LENGTH.size:
        raise TruncatedPayloadError(
            f"truncated store: header announces R={R}, C={C}, file has {len(data)} bytes"
        )
    (trailer_length,) = TRAILER_LENGTH.unpack_from(data, len(data) - TRAILER_LENGTH.size)
    if HEADER.size + columns + trailer_length + TRAILER_LENGTH.size != len(data):
        raise TruncatedPayloadError(
            f"store size mismatch: columns and trailer don't add up to {len(data)} bytes"
        )

    offset = HEADER.size
    vectors = read_column(data, offset, "<f4", R * C).reshape(R, C)
    offset += R * C * 4
    labels = read_column(data, offset, "<i4", R)
    offset += R * 4
    origin_ids = read_column(data, offset, "<i4", R)
    offset += R * 4
    part_labels = None
    if has_parts:
        part_labels = read_column(data, offset, "<i4", R)
        offset += R * 4

    try:
        trailer = json.loads(data[offset : offset + trailer_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt store trailer: {e}")
    if not isinstance(trailer, dict):
        raise FormatError("corrupt store trailer: expected a JSON object")
    if trailer["kind"] != KINDS[kind]:
        raise FormatError(f"store header kind {KINDS[kind]} disagrees with trailer {trailer['kind']}")

    return PrototypeStore(
        vectors.astype(np.float32),
        labels.astype(np.int32),
        origin_ids.astype(np.int32),
        trailer["kind"],
        part_labels=part_labels,
        encoding=None if trailer["encoding"] is None else EncodingSpec.from_dict(trailer["encoding"]),
        pooling=trailer["pooling"],
        class_names=trailer["class_names"],
        part_names=trailer["part_names"],
        valid_parts=trailer["valid_parts"],
    )
