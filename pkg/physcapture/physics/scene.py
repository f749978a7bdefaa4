from dataclasses import dataclass
from enum import Enum
from os import PathLike
from pathlib import Path
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy
import toml
import typepigeon


class PrimitiveType(Enum):
    PLANE = "plane"
    BOX = "box"
    HEIGHTFIELD = "heightfield"


@dataclass(frozen=True)
class Plane:
    """half-space ``normal . p <= offset``"""

    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def __post_init__(self):
        normal = numpy.asarray(self.normal, dtype=float)
        length = numpy.linalg.norm(normal)
        if not length > 0:
            raise ValueError(f'plane normal "{self.normal}" has zero length')
        object.__setattr__(self, "normal", tuple((normal / length).tolist()))
        object.__setattr__(self, "offset", float(self.offset))

    def sdf(self, points: numpy.ndarray) -> numpy.ndarray:
        return points @ numpy.asarray(self.normal) - self.offset

    def gradient(self, points: numpy.ndarray) -> numpy.ndarray:
        return numpy.broadcast_to(numpy.asarray(self.normal), points.shape).copy()


@dataclass(frozen=True)
class Box:
    """axis-aligned solid box"""

    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.half_extents) != 3 or any(value <= 0 for value in self.half_extents):
            raise ValueError(f'box half extents must be positive, not "{self.half_extents}"')
        object.__setattr__(self, "center", tuple(float(value) for value in self.center))
        object.__setattr__(
            self, "half_extents", tuple(float(value) for value in self.half_extents)
        )

    def sdf(self, points: numpy.ndarray) -> numpy.ndarray:
        excess = numpy.abs(points - numpy.asarray(self.center)) - numpy.asarray(
            self.half_extents
        )
        outside = numpy.linalg.norm(numpy.maximum(excess, 0.0), axis=-1)
        inside = numpy.minimum(excess.max(axis=-1), 0.0)
        return outside + inside

    def gradient(self, points: numpy.ndarray) -> numpy.ndarray:
        relative = points - numpy.asarray(self.center)
        signs = numpy.where(relative < 0, -1.0, 1.0)
        excess = numpy.abs(relative) - numpy.asarray(self.half_extents)
        positive = numpy.maximum(excess, 0.0)
        outside = numpy.linalg.norm(positive, axis=-1, keepdims=True)

        inside_gradient = numpy.zeros(points.shape)
        axis = numpy.argmax(excess, axis=-1)
        numpy.put_along_axis(inside_gradient, axis[..., None], 1.0, axis=-1)

        gradient = numpy.where(
            outside > 0,
            positive / numpy.where(outside > 0, outside, 1.0),
            inside_gradient,
        )
        return gradient * signs


@dataclass(frozen=True)
class Heightfield:
    """
    terrain ``z <= h(x, y)`` with ``h`` bilinear over a regular grid of heights ``heights[i, j]`` at
    ``(origin_x + i * spacing, origin_y + j * spacing)``; heights are held constant beyond the grid

    the signed distance is the first-order estimate ``(z - h) / sqrt(1 + |grad h|^2)``
    """

    origin: Tuple[float, float]
    spacing: float
    heights: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        heights = numpy.asarray(self.heights, dtype=float)
        if heights.ndim != 2 or min(heights.shape) < 2:
            raise ValueError(f'heightfield needs at least 2x2 samples, not "{heights.shape}"')
        if not self.spacing > 0:
            raise ValueError(f'heightfield spacing must be positive, not "{self.spacing}"')
        object.__setattr__(self, "heights", tuple(tuple(row) for row in heights.tolist()))
        object.__setattr__(self, "origin", tuple(float(value) for value in self.origin))

    def _surface(self, points: numpy.ndarray) -> Tuple[numpy.ndarray, numpy.ndarray]:
        heights = numpy.asarray(self.heights)
        limits = numpy.array(heights.shape) - 1
        cells = (points[..., :2] - numpy.asarray(self.origin)) / self.spacing
        inside = (cells >= 0) & (cells <= limits)
        cells = numpy.clip(cells, 0, limits)
        index = numpy.minimum(numpy.floor(cells).astype(int), limits - 1)
        fraction = cells - index
        i, j = index[..., 0], index[..., 1]
        u, v = fraction[..., 0], fraction[..., 1]
        h00 = heights[i, j]
        h10 = heights[i + 1, j]
        h01 = heights[i, j + 1]
        h11 = heights[i + 1, j + 1]
        height = (
            h00 * (1 - u) * (1 - v) + h10 * u * (1 - v) + h01 * (1 - u) * v + h11 * u * v
        )
        slope = numpy.stack(
            [
                ((h10 - h00) * (1 - v) + (h11 - h01) * v) * inside[..., 0],
                ((h01 - h00) * (1 - u) + (h11 - h10) * u) * inside[..., 1],
            ],
            axis=-1,
        ) / self.spacing
        return height, slope

    def sdf(self, points: numpy.ndarray) -> numpy.ndarray:
        height, slope = self._surface(points)
        return (points[..., 2] - height) / numpy.sqrt(1 + (slope**2).sum(axis=-1))

    def gradient(self, points: numpy.ndarray) -> numpy.ndarray:
        _, slope = self._surface(points)
        gradient = numpy.concatenate([-slope, numpy.ones(slope.shape[:-1] + (1,))], axis=-1)
        return gradient / numpy.linalg.norm(gradient, axis=-1, keepdims=True)


Primitive = Union[Plane, Box, Heightfield]


class SceneGeometry:
    """
    union of solid primitives; the signed distance is the minimum over the primitives, negative inside
    """

    def __init__(self, primitives: Sequence[Primitive]):
        primitives = tuple(primitives)
        if len(primitives) == 0:
            raise ValueError("scene needs at least one primitive")
        for primitive in primitives:
            if not isinstance(primitive, (Plane, Box, Heightfield)):
                raise ValueError(f'unsupported scene primitive "{primitive}"')
        self.__primitives = primitives

    @property
    def primitives(self) -> Tuple[Primitive, ...]:
        return self.__primitives

    def sdf(self, points: numpy.ndarray) -> numpy.ndarray:
        points = numpy.asarray(points, dtype=float)
        return numpy.min([primitive.sdf(points) for primitive in self.__primitives], axis=0)

    def sdf_and_gradient(
        self, points: numpy.ndarray
    ) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """
        :param points: query points ``(..., 3)``
        :return: signed distances ``(...)`` and gradients ``(..., 3)`` of the closest primitive
        """

        points = numpy.asarray(points, dtype=float)
        distances = numpy.stack([primitive.sdf(points) for primitive in self.__primitives])
        closest = numpy.argmin(distances, axis=0)
        gradients = numpy.stack(
            [primitive.gradient(points) for primitive in self.__primitives]
        )
        gradient = numpy.take_along_axis(
            gradients, closest[None, ..., None], axis=0
        )[0]
        return numpy.take_along_axis(distances, closest[None], axis=0)[0], gradient

    @classmethod
    def flat_ground(cls, height: float = 0.0) -> "SceneGeometry":
        return cls([Plane((0.0, 0.0, 1.0), height)])

    @classmethod
    def staircase(
        cls,
        steps: int = 3,
        rise: float = 0.1,
        run: float = 0.3,
        width: float = 1.2,
        start: float = -0.25,
    ) -> "SceneGeometry":
        """
        ground plane with a staircase of boxes ascending along ``-y`` from ``y = start``

        :param steps: number of steps
        :param rise: step height in meters
        :param run: step depth in meters
        :param width: stair width along ``x`` in meters
        :param start: ``y`` of the first riser
        :return: scene
        """

        primitives = [Plane((0.0, 0.0, 1.0), 0.0)]
        for step in range(steps):
            height = (step + 1) * rise
            primitives.append(
                Box(
                    center=(0.0, start - (step + 0.5) * run, height / 2),
                    half_extents=(width / 2, run / 2, height / 2),
                )
            )
        return cls(primitives)

    @classmethod
    def from_file(cls, filename: PathLike) -> "SceneGeometry":
        """
        :param filename: TOML scene file with a ``[[primitives]]`` table per primitive
        :return: scene
        """

        if not isinstance(filename, Path):
            filename = Path(filename)
        if not filename.exists():
            raise FileNotFoundError(f'scene file "{filename}" does not exist')
        with open(filename) as input_file:
            entries = toml.load(input_file).get("primitives", [])

        primitives = []
        for entry in entries:
            primitive_type = typepigeon.convert_value(entry["type"], PrimitiveType)
            if primitive_type == PrimitiveType.PLANE:
                primitives.append(Plane(tuple(entry["normal"]), entry["offset"]))
            elif primitive_type == PrimitiveType.BOX:
                primitives.append(Box(tuple(entry["center"]), tuple(entry["half_extents"])))
            else:
                primitives.append(
                    Heightfield(tuple(entry["origin"]), entry["spacing"], entry["heights"])
                )
        return cls(primitives)

    def to_file(self, filename: PathLike, overwrite: bool = False):
        if not isinstance(filename, Path):
            filename = Path(filename)
        if filename.exists() and not overwrite:
            raise FileExistsError(f'scene file "{filename}" already exists')

        entries = []
        for primitive in self.__primitives:
            if isinstance(primitive, Plane):
                entries.append(
                    {
                        "type": PrimitiveType.PLANE.value,
                        "normal": list(primitive.normal),
                        "offset": primitive.offset,
                    }
                )
            elif isinstance(primitive, Box):
                entries.append(
                    {
                        "type": PrimitiveType.BOX.value,
                        "center": list(primitive.center),
                        "half_extents": list(primitive.half_extents),
                    }
                )
            else:
                entries.append(
                    {
                        "type": PrimitiveType.HEIGHTFIELD.value,
                        "origin": list(primitive.origin),
                        "spacing": primitive.spacing,
                        "heights": [list(row) for row in primitive.heights],
                    }
                )
        with open(filename, "w") as output_file:
            toml.dump({"primitives": entries}, output_file)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({list(self.__primitives)!r})"


def analytic_sdf(scene: SceneGeometry, point: numpy.ndarray) -> Union[float, numpy.ndarray]:
    """
    exact signed distance of the scene (minimum over primitive distances)

    :param scene: scene geometry
    :param point: point(s) ``(..., 3)``
    :return: signed distance(s) in meters, negative inside

    >>> analytic_sdf(SceneGeometry.flat_ground(), [0, 0, 0.5])
    0.5
    """

    point = numpy.asarray(point, dtype=float)
    if not numpy.all(numpy.isfinite(point)):
        raise ValueError("query point is not finite")
    distance = scene.sdf(point)
    return float(distance) if distance.ndim == 0 else distance


def analytic_sdf_gradient(scene: SceneGeometry, point: numpy.ndarray) -> numpy.ndarray:
    """
    :param scene: scene geometry
    :param point: point(s) ``(..., 3)``
    :return: gradient(s) of the signed distance ``(..., 3)``
    """

    return scene.sdf_and_gradient(point)[1]
