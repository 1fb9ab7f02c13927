import numpy as np
from ..errors import ValidationError

MIN_POINTS = 16


def _choose(n: int, areas: list, rng: np.random.Generator) -> np.ndarray:
    """
    Region of each of n points, drawn proportionally to the region areas
    """
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / np.sum(areas))


def _disk(n: int, rng: np.random.Generator) -> np.ndarray:
    radius = np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2 * np.pi, n)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def _triangle(a, b, c, n: int, rng: np.random.Generator) -> np.ndarray:
    r1 = rng.uniform(0.0, 1.0, n)
    r2 = rng.uniform(0.0, 1.0, n)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    a, b, c = (np.asarray(v, dtype=np.float64) for v in (a, b, c))
    return a + r1[:, None] * (b - a) + r2[:, None] * (c - a)


class Shape:
    """
    A synthetic object class: samples n surface points of the canonical shape (about
    [-1, 1]^3) with the local part index of each point
    """

    parts: list = []

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        raise NotImplementedError


class Sphere(Shape):
    parts = ["upper", "lower"]
    axes = (1.0, 1.0, 1.0)

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        directions = rng.standard_normal((n, 3))
        directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
        parts = (directions[:, 2] < 0).astype(np.int32)
        return directions * np.array(self.axes), parts


class Ellipsoid(Sphere):
    axes = (1.0, 0.6, 0.45)


class Cube(Shape):
    parts = ["top", "side", "bottom"]

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        faces = rng.integers(0, 6, n)
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        points = rng.uniform(-1.0, 1.0, (n, 3))
        points[np.arange(n), axis] = sign

        parts = np.full(n, 1, dtype=np.int32)
        parts[(axis == 2) & (sign > 0)] = 0
        parts[(axis == 2) & (sign < 0)] = 2
        return points, parts


class Cylinder(Shape):
    parts = ["top", "side", "bottom"]

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        parts = _choose(n, [np.pi, 4 * np.pi, np.pi], rng).astype(np.int32)
        points = np.zeros((n, 3))

        caps = parts != 1
        points[caps, :2] = _disk(np.count_nonzero(caps), rng)
        points[caps, 2] = np.where(parts[caps] == 0, 1.0, -1.0)

        side = parts == 1
        theta = rng.uniform(0.0, 2 * np.pi, np.count_nonzero(side))
        points[side] = np.stack(
            [np.cos(theta), np.sin(theta), rng.uniform(-1.0, 1.0, len(theta))], axis=1
        )
        return points, parts


class Cone(Shape):
    parts = ["side", "base"]

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        parts = _choose(n, [np.pi * np.sqrt(5.0), np.pi], rng).astype(np.int32)
        points = np.zeros((n, 3))

        side = parts == 0
        # Fraction of the base radius, area-uniform from the apex
        t = np.sqrt(rng.uniform(0.0, 1.0, np.count_nonzero(side)))
        theta = rng.uniform(0.0, 2 * np.pi, len(t))
        points[side] = np.stack([t * np.cos(theta), t * np.sin(theta), 1.0 - 2.0 * t], axis=1)

        base = parts == 1
        points[base, :2] = _disk(np.count_nonzero(base), rng)
        points[base, 2] = -1.0
        return points, parts


class Pyramid(Shape):
    parts = ["side", "base"]

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        faces = _choose(n, [np.sqrt(5.0)] * 4 + [4.0], rng)
        points = np.zeros((n, 3))
        corners = [(1, 1, -1), (-1, 1, -1), (-1, -1, -1), (1, -1, -1)]
        apex = (0, 0, 1)

        for face in range(4):
            mask = faces == face
            points[mask] = _triangle(
                corners[face], corners[(face + 1) % 4], apex, np.count_nonzero(mask), rng
            )
        base = faces == 4
        points[base] = np.column_stack(
            [rng.uniform(-1.0, 1.0, (np.count_nonzero(base), 2)), -np.ones(np.count_nonzero(base))]
        )
        return points, (faces == 4).astype(np.int32)


class Torus(Shape):
    parts = ["outer", "inner"]
    major_radius = 0.7
    minor_radius = 0.3

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        theta = rng.uniform(0.0, 2 * np.pi, n)
        phi = rng.uniform(0.0, 2 * np.pi, n)
        ring = self.major_radius + self.minor_radius * np.cos(phi)
        points = np.stack(
            [ring * np.cos(theta), ring * np.sin(theta), self.minor_radius * np.sin(phi)],
            axis=1,
        )
        return points, (np.cos(phi) < 0).astype(np.int32)


class Prism(Shape):
    parts = ["top", "side", "bottom"]

    def sample(self, n: int, rng: np.random.Generator) -> tuple:
        angles = np.deg2rad([90.0, 210.0, 330.0])
        corners = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        cap_area = 3 * np.sqrt(3) / 4
        edge = np.sqrt(3.0)
        regions = _choose(n, [cap_area, edge * 2, edge * 2, edge * 2, cap_area], rng)
        points = np.zeros((n, 3))

        for cap, z in ((0, 1.0), (4, -1.0)):
            mask = regions == cap
            triangle = _triangle(corners[0], corners[1], corners[2], np.count_nonzero(mask), rng)
            points[mask] = np.column_stack([triangle, np.full(len(triangle), z)])
        for face in range(3):
            mask = regions == face + 1
            count = np.count_nonzero(mask)
            t = rng.uniform(0.0, 1.0, count)[:, None]
            xy = corners[face] + t * (corners[(face + 1) % 3] - corners[face])
            points[mask] = np.column_stack([xy, rng.uniform(-1.0, 1.0, count)])

        parts = np.full(n, 1, dtype=np.int32)
        parts[regions == 0] = 0
        parts[regions == 4] = 2
        return points, parts


shapes = {
    "sphere": Sphere(),
    "cube": Cube(),
    "cylinder": Cylinder(),
    "cone": Cone(),
    "torus": Torus(),
    "pyramid": Pyramid(),
    "ellipsoid": Ellipsoid(),
    "prism": Prism(),
}

CLASS_NAMES = list(shapes)

# Global part vocabulary ("cylinder_top", ...) and the parts valid for each class
PART_NAMES = [f"{name}_{part}" for name, shape in shapes.items() for part in shape.parts]
PART_OFFSETS = {}
VALID_PARTS = {}
_offset = 0
for _name, _shape in shapes.items():
    PART_OFFSETS[_name] = _offset
    VALID_PARTS[_name] = list(range(_offset, _offset + len(_shape.parts)))
    _offset += len(_shape.parts)


class ShapeSpec:
    def __init__(
        self,
        shape: str,
        num_points: int = 512,
        jitter: float = 0.02,
        scale_range: tuple = (0.75, 1.25),
        rotation: float | None = None,
    ):
        if shape not in shapes:
            raise ValidationError(f"unknown shape: {shape} (known: {', '.join(shapes)})")
        if num_points < MIN_POINTS:
            raise ValidationError(f"a cloud needs at least {MIN_POINTS} points")
        if jitter < 0:
            raise ValidationError("jitter must be nonnegative")

        self.shape: str = shape
        self.num_points: int = num_points
        # Gaussian noise added to every coordinate
        self.jitter: float = jitter
        # Each axis is scaled by a factor drawn in this range
        self.scale_range: tuple = tuple(scale_range)
        # Rotation around z [rad], drawn uniformly when None
        self.rotation: float | None = rotation


def sample_cloud(spec: ShapeSpec, rng: np.random.Generator) -> tuple:
    """
    Returns (N x 3 points, N global part labels)
    """
    points, parts = shapes[spec.shape].sample(spec.num_points, rng)
    points = points * rng.uniform(spec.scale_range[0], spec.scale_range[1], 3)

    angle = rng.uniform(0.0, 2 * np.pi) if spec.rotation is None else spec.rotation
    c, s = np.cos(angle), np.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    points = points @ rotation.T

    if spec.jitter > 0:
        points = points + rng.normal(0.0, spec.jitter, points.shape)

    return points, parts + PART_OFFSETS[spec.shape]
