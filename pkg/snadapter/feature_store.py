import json
import os
import struct
import numpy as np
from .errors import (
    ValidationError,
    FormatError,
    BadMagicError,
    VersionMismatchError,
    TruncatedPayloadError,
    PayloadDimensionError,
)

MAGIC = b"SNPF"
VERSION = 1
KINDS = ["sample", "point", "object"]

# magic, version, kind, M, C, K, has_positions, has_parts, padding up to 32 bytes
HEADER = struct.Struct("<4sIIIIIBB6x")


def meta_path(path: str) -> str:
    return f"{path}.meta.json"


def readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def read_column(data: bytes, offset: int, dtype: str, count: int) -> np.ndarray:
    """
    Reads count little-endian items from the buffer (count may be 0)
    """
    if count == 0:
        return np.zeros(0, dtype=dtype)
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()


def read_header(data: bytes, magic: bytes, version: int) -> tuple:
    """
    Checks magic and version, returns (kind, M, C, K, has_positions, has_parts)
    """
    if data[: len(magic)] != magic[: len(data)]:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {data[:len(magic)]!r}")
    if len(data) < HEADER.size:
        raise TruncatedPayloadError(
            f"truncated header: {len(data)} bytes, expected {HEADER.size}"
        )
    _, file_version, kind, M, C, K, has_positions, has_parts = HEADER.unpack_from(data)
    if file_version != version:
        raise VersionMismatchError(
            f"version mismatch: file is version {file_version}, expected {version}"
        )

    return kind, M, C, K, bool(has_positions), bool(has_parts)


class FeatureRecord:
    def __init__(
        self,
        id: int,
        feature: np.ndarray,
        label: int,
        position: np.ndarray | None = None,
        part_label: int | None = None,
    ):
        self.id: int = id
        self.feature: np.ndarray = feature
        self.label: int = label
        self.position: np.ndarray | None = position
        self.part_label: int | None = part_label


class FeatureSet:
    """
    A set of M feature vectors of dimension C, labelled over K classes.

    kind is one of:
    - "sample": one record per point cloud (global features)
    - "point": one record per point, label is the owning sample's class and part_labels
      holds the point part; group_sizes gives the number of consecutive records of
      each sample
    - "object": one record per object, positions holds the object centers and
      group_sizes the number of objects of each scene

    Record ids are implicit: record i has id i.
    """

    def __init__(
        self,
        features,
        labels,
        class_names: list | None = None,
        kind: str = "sample",
        positions=None,
        part_labels=None,
        part_names: list | None = None,
        valid_parts: dict | None = None,
        group_sizes: list | None = None,
        num_classes: int | None = None,
    ):
        self.features: np.ndarray = readonly(np.array(features, dtype=np.float32))
        if self.features.ndim == 1 and self.features.size == 0:
            self.features = readonly(np.zeros((0, 0), dtype=np.float32))
        self.labels: np.ndarray = readonly(np.array(labels, dtype=np.int32).reshape(-1))

        if class_names is None:
            if num_classes is None:
                num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
            class_names = [f"class_{k}" for k in range(num_classes)]
        self.class_names: list = list(class_names)
        self.kind: str = kind

        self.positions: np.ndarray | None = None
        if positions is not None:
            self.positions = readonly(
                np.array(positions, dtype=np.float32).reshape(-1, 3)
            )

        self.part_labels: np.ndarray | None = None
        if part_labels is not None:
            self.part_labels = readonly(
                np.array(part_labels, dtype=np.int32).reshape(-1)
            )

        self.part_names: list = list(part_names) if part_names is not None else []
        self.valid_parts: dict = {
            name: [int(part) for part in parts]
            for name, parts in (valid_parts or {}).items()
        }
        self.group_sizes: list = [int(size) for size in (group_sizes or [])]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, index: int) -> FeatureRecord:
        return FeatureRecord(
            id=index,
            feature=self.features[index],
            label=int(self.labels[index]),
            position=None if self.positions is None else self.positions[index],
            part_label=None if self.part_labels is None else int(self.part_labels[index]),
        )

    def records(self):
        for index in range(len(self)):
            yield self[index]

    def groups(self) -> list:
        """
        Record slices of each group (sample for point sets, scene for object sets)
        """
        slices = []
        start = 0
        for size in self.group_sizes:
            slices.append(slice(start, start + size))
            start += size
        return slices

    def validate(self) -> None:
        M = len(self)
        if self.kind not in KINDS:
            raise ValidationError(f"unknown feature set kind: {self.kind}")
        if self.features.ndim != 2:
            raise ValidationError("features must be a M x C matrix")
        if self.labels.shape != (M,):
            raise ValidationError(f"expected {M} labels, got {self.labels.shape[0]}")

        non_finite = np.flatnonzero(~np.isfinite(self.features).all(axis=1))
        if len(non_finite):
            raise ValidationError(
                f"record {non_finite[0]} has a non-finite feature component"
            )

        out_of_range = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if len(out_of_range):
            raise ValidationError(
                f"record {out_of_range[0]} has label {self.labels[out_of_range[0]]}, "
                f"expected in [0, {self.num_classes})"
            )

        if self.positions is not None:
            if self.positions.shape != (M, 3):
                raise ValidationError(f"expected {M} positions, got {len(self.positions)}")
            non_finite = np.flatnonzero(~np.isfinite(self.positions).all(axis=1))
            if len(non_finite):
                raise ValidationError(f"record {non_finite[0]} has a non-finite position")

        if self.part_labels is not None:
            if self.part_labels.shape != (M,):
                raise ValidationError(
                    f"expected {M} part labels, got {len(self.part_labels)}"
                )
            bad = self.part_labels < 0
            if self.part_names:
                bad |= self.part_labels >= len(self.part_names)
            bad = np.flatnonzero(bad)
            if len(bad):
                raise ValidationError(
                    f"record {bad[0]} has part label {self.part_labels[bad[0]]} "
                    f"outside the part vocabulary"
                )

        if self.group_sizes and sum(self.group_sizes) != M:
            raise ValidationError(
                f"group sizes sum to {sum(self.group_sizes)}, expected {M}"
            )

    def metadata(self) -> dict:
        return {
            "class_names": self.class_names,
            "part_names": self.part_names,
            "valid_parts": self.valid_parts,
            "group_sizes": self.group_sizes,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.kind == other.kind
            and self.metadata() == other.metadata()
            and same(self.features, other.features)
            and same(self.labels, other.labels)
            and same(self.positions, other.positions)
            and same(self.part_labels, other.part_labels)
        )


def save_feature_set(feature_set: FeatureSet, path: str) -> None:
    """
    Writes the set to path (SNPF binary) and its vocabularies to path.meta.json
    """
    feature_set.validate()
    M, C = feature_set.features.shape
    has_positions = feature_set.positions is not None
    has_parts = feature_set.part_labels is not None

    with open(path, "wb") as f:
        f.write(
            HEADER.pack(
                MAGIC,
                VERSION,
                KINDS.index(feature_set.kind),
                M,
                C,
                feature_set.num_classes,
                has_positions,
                has_parts,
            )
        )
        f.write(feature_set.features.astype("<f4").tobytes())
        f.write(feature_set.labels.astype("<i4").tobytes())
        if has_positions:
            f.write(feature_set.positions.astype("<f4").tobytes())
        if has_parts:
            f.write(feature_set.part_labels.astype("<i4").tobytes())

    with open(meta_path(path), "w") as f:
        json.dump(feature_set.metadata(), f, indent=2, sort_keys=True)


def load_feature_set(path: str) -> FeatureSet:
    with open(path, "rb") as f:
        data = f.read()

    kind, M, C, K, has_positions, has_parts = read_header(data, MAGIC, VERSION)
    if kind >= len(KINDS):
        raise FormatError(f"unknown feature set kind code {kind}")

    expected = M * C * 4 + M * 4 + has_positions * M * 12 + has_parts * M * 4
    payload = len(data) - HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(
            f"truncated payload: header announces M={M}, C={C} ({expected} bytes), "
            f"got {payload} bytes"
        )
    if payload > expected:
        raise PayloadDimensionError(
            f"payload has {payload} bytes but header dimensions M={M}, C={C} "
            f"account for {expected}"
        )

    offset = HEADER.size
    features = read_column(data, offset, "<f4", M * C).reshape(M, C)
    offset += M * C * 4
    labels = read_column(data, offset, "<i4", M)
    offset += M * 4
    positions = None
    if has_positions:
        positions = read_column(data, offset, "<f4", M * 3).reshape(M, 3)
        offset += M * 12
    part_labels = None
    if has_parts:
        part_labels = read_column(data, offset, "<i4", M)

    metadata = {}
    if os.path.exists(meta_path(path)):
        with open(meta_path(path)) as f:
            try:
                metadata = json.load(f)
            except json.JSONDecodeError as e:
                raise FormatError(f"corrupt sidecar {meta_path(path)}: {e}")
    class_names = metadata.get("class_names", [f"class_{k}" for k in range(K)])
    if len(class_names) != K:
        raise PayloadDimensionError(
            f"sidecar lists {len(class_names)} class names, header says K={K}"
        )

    feature_set = FeatureSet(
        features.astype(np.float32),
        labels.astype(np.int32),
        class_names=class_names,
        kind=KINDS[kind],
        positions=positions,
        part_labels=part_labels,
        part_names=metadata.get("part_names"),
        valid_parts=metadata.get("valid_parts"),
        group_sizes=metadata.get("group_sizes"),
    )
    feature_set.validate()

    return feature_set
