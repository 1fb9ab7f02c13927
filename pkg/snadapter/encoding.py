from functools import lru_cache
import numpy as np
from .errors import ValidationError


class EncodingSpec:
    """
    Positional encoding of 3D coordinates into a D-dimensional vector.

    - sincos: for each axis, D/6 frequencies 1 / temperature^(6j/D), interleaved sin/cos
    - fourier: [sin(2 pi B p), cos(2 pi B p)] with B a (D/2) x 3 gaussian matrix scaled
      by fourier_scale, drawn from fourier_seed
    """

    def __init__(
        self,
        kind: str = "sincos",
        dim: int = 66,
        temperature: float = 10000.0,
        fourier_seed: int = 0,
        fourier_scale: float = 1.0,
    ):
        if kind not in encoders:
            raise ValidationError(f"unknown encoding kind: {kind} (known: {', '.join(encoders)})")
        if dim <= 0:
            raise ValidationError(f"encoding dim must be positive, got {dim}")
        if kind == "sincos" and dim % 6 != 0:
            raise ValidationError(f"sincos encoding dim must be divisible by 6, got {dim}")
        if kind == "fourier" and dim % 2 != 0:
            raise ValidationError(f"fourier encoding dim must be even, got {dim}")
        if temperature <= 0:
            raise ValidationError(f"temperature must be positive, got {temperature}")
        if fourier_scale <= 0:
            raise ValidationError(f"fourier_scale must be positive, got {fourier_scale}")

        self.kind: str = kind
        self.dim: int = dim
        self.temperature: float = temperature
        self.fourier_seed: int = fourier_seed
        self.fourier_scale: float = fourier_scale

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncodingSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"EncodingSpec({self.to_dict()})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "temperature": self.temperature,
            "fourier_seed": self.fourier_seed,
            "fourier_scale": self.fourier_scale,
        }

    @staticmethod
    def from_dict(data: dict) -> "EncodingSpec":
        return EncodingSpec(
            kind=data["kind"],
            dim=int(data["dim"]),
            temperature=float(data["temperature"]),
            fourier_seed=int(data["fourier_seed"]),
            fourier_scale=float(data["fourier_scale"]),
        )


@lru_cache(maxsize=16)
def fourier_matrix(dim: int, seed: int, scale: float) -> np.ndarray:
    """
    The (dim/2) x 3 projection matrix B, a pure function of (dim, seed, scale)
    """
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((dim // 2, 3)) * scale
    B.setflags(write=False)
    return B


def _sincos(points: np.ndarray, spec: EncodingSpec) -> np.ndarray:
    per_axis = spec.dim // 3
    j = np.arange(per_axis // 2)
    frequencies = spec.temperature ** (6.0 * j / spec.dim)

    # N x 3 x (D/6)
    angles = points[:, :, None] / frequencies
    encoded = np.empty((points.shape[0], 3, per_axis))
    encoded[:, :, 0::2] = np.sin(angles)
    encoded[:, :, 1::2] = np.cos(angles)

    return encoded.reshape(points.shape[0], spec.dim)


def _fourier(points: np.ndarray, spec: EncodingSpec) -> np.ndarray:
    B = fourier_matrix(spec.dim, spec.fourier_seed, spec.fourier_scale)
    projected = 2.0 * np.pi * points @ B.T

    return np.concatenate([np.sin(projected), np.cos(projected)], axis=1)


encoders = {
    "sincos": _sincos,
    "fourier": _fourier,
}

poolings = {
    "avg": lambda encoded: np.mean(encoded, axis=0),
    "max": lambda encoded: np.max(encoded, axis=0),
}


def encode_positions(points, spec: EncodingSpec) -> np.ndarray:
    """
    Encodes N x 3 points into a N x D matrix
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise ValidationError("can't encode non-finite positions")

    return encoders[spec.kind](points, spec)


def encode_position(p, spec: EncodingSpec) -> np.ndarray:
    return encode_positions(np.asarray(p, dtype=np.float64).reshape(1, 3), spec)[0]


def global_position_vector(points, pooling: str, spec: EncodingSpec) -> np.ndarray:
    """
    Pools the encodings of all the points of a cloud into a single D-vector
    """
    if pooling not in poolings:
        raise ValidationError(f"unknown pooling: {pooling} (known: {', '.join(poolings)})")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValidationError("can't compute the global position vector of an empty cloud")

    return poolings[pooling](encode_positions(points, spec))
