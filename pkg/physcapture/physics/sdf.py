import logging
from os import PathLike
from pathlib import Path
from typing import Sequence
from typing import Tuple
from typing import Union
import warnings

import numpy

from physcapture.physics.scene import SceneGeometry

DEFAULT_RESOLUTION = 256

# nodes evaluated per batch while baking
BAKE_CHUNK = 1 << 20

HEADER_DTYPE = numpy.dtype([("resolution", "<u4", (3,)), ("origin", "<f8", (3,)), ("spacing", "<f8")])


class SdfGrid:
    """
    signed distance samples on a regular grid; node ``(i, j, k)`` sits at ``origin + spacing * (i, j, k)``
    """

    def __init__(self, origin: Sequence[float], spacing: float, values: numpy.ndarray):
        values = numpy.array(values, dtype=float)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError(f'grid needs at least 2 nodes per axis, not "{values.shape}"')
        if not spacing > 0:
            raise ValueError(f'grid spacing must be positive, not "{spacing}"')
        if not numpy.all(numpy.isfinite(values)):
            raise ValueError("grid values are not finite")

        self.__origin = numpy.array(origin, dtype=float)
        self.__spacing = float(spacing)
        self.__values = values
        self.__origin.setflags(write=False)
        self.__values.setflags(write=False)

    @property
    def origin(self) -> numpy.ndarray:
        return self.__origin

    @property
    def spacing(self) -> float:
        return self.__spacing

    @property
    def values(self) -> numpy.ndarray:
        return self.__values

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return tuple(self.__values.shape)

    @property
    def upper(self) -> numpy.ndarray:
        return self.__origin + self.__spacing * (numpy.array(self.resolution) - 1)

    def node_positions(self, indices: numpy.ndarray) -> numpy.ndarray:
        return self.__origin + self.__spacing * numpy.asarray(indices, dtype=float)

    def to_file(self, path: PathLike, overwrite: bool = False):
        """
        write the binary grid: little-endian header of 3 u32 resolution, 3 f64 origin, f64 spacing, followed by f32
        values with x varying fastest

        :param path: output file
        :param overwrite: overwrite existing file
        """

        if not isinstance(path, Path):
            path = Path(path)
        if path.exists() and not overwrite:
            logging.warning(f'skipping existing file "{path}"')
            return

        header = numpy.zeros(1, dtype=HEADER_DTYPE)
        header["resolution"] = self.resolution
        header["origin"] = self.__origin
        header["spacing"] = self.__spacing
        with open(path, "wb") as output_file:
            output_file.write(header.tobytes())
            output_file.write(
                self.__values.ravel(order="F").astype("<f4").tobytes()
            )

    @classmethod
    def from_file(cls, path: PathLike) -> "SdfGrid":
        if not isinstance(path, Path):
            path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f'SDF file "{path}" does not exist')

        content = path.read_bytes()
        header = numpy.frombuffer(content, dtype=HEADER_DTYPE, count=1)[0]
        resolution = tuple(int(value) for value in header["resolution"])
        values = numpy.frombuffer(
            content, dtype="<f4", count=int(numpy.prod(resolution)), offset=HEADER_DTYPE.itemsize
        )
        return cls(
            origin=header["origin"],
            spacing=float(header["spacing"]),
            values=values.reshape(resolution, order="F").astype(float),
        )

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(origin={self.__origin.tolist()!r}, spacing={self.__spacing!r}, resolution={self.resolution!r})"


def bake_sdf(
    scene: SceneGeometry,
    bounds: Tuple[Sequence[float], Sequence[float]],
    resolution: Union[int, Sequence[int]] = DEFAULT_RESOLUTION,
) -> SdfGrid:
    """
    sample the analytic scene distance at the nodes of a regular grid covering the bounds; the spacing is uniform, so
    axes shorter than the longest get proportionally fewer nodes

    :param scene: scene geometry
    :param bounds: lower and upper corners of the region of interest
    :param resolution: node count along the longest axis, or per axis
    :return: baked grid
    """

    lower, upper = (numpy.asarray(corner, dtype=float) for corner in bounds)
    extent = upper - lower
    if (
        lower.shape != (3,)
        or upper.shape != (3,)
        or not numpy.all(numpy.isfinite(extent))
        or numpy.any(extent <= 0)
    ):
        raise ValueError(f'degenerate SDF bounds "{lower.tolist()} - {upper.tolist()}"')

    resolution = numpy.broadcast_to(numpy.asarray(resolution, dtype=int), (3,))
    if numpy.any(resolution < 2):
        raise ValueError(f'SDF resolution must be at least 2, not "{resolution.tolist()}"')

    spacing = float(numpy.max(extent / (resolution - 1)))
    counts = numpy.minimum(
        numpy.ceil(extent / spacing - 1e-9).astype(int) + 1, resolution
    )
    counts = numpy.maximum(counts, 2)

    axes = [lower[axis] + spacing * numpy.arange(counts[axis]) for axis in range(3)]
    values = numpy.empty(tuple(counts))
    plane_size = counts[0] * counts[1]
    slab = max(1, BAKE_CHUNK // plane_size)
    x, y = numpy.meshgrid(axes[0], axes[1], indexing="ij")
    for start in range(0, counts[2], slab):
        z = axes[2][start : start + slab]
        points = numpy.stack(
            numpy.broadcast_arrays(x[..., None], y[..., None], z[None, None, :]),
            axis=-1,
        )
        values[:, :, start : start + slab] = scene.sdf(points)

    return SdfGrid(origin=lower, spacing=spacing, values=values)


def _trilinear(
    grid: SdfGrid, points: numpy.ndarray
) -> Tuple[numpy.ndarray, numpy.ndarray, numpy.ndarray]:
    points = numpy.asarray(points, dtype=float)
    limits = numpy.array(grid.resolution) - 1
    cells = (points - grid.origin) / grid.spacing
    out_of_bounds = numpy.any((cells < 0) | (cells > limits), axis=-1)
    cells = numpy.clip(cells, 0, limits)
    index = numpy.minimum(numpy.floor(cells).astype(int), limits - 1)
    fraction = cells - index

    values = grid.values
    i, j, k = index[..., 0], index[..., 1], index[..., 2]
    u, v, w = fraction[..., 0], fraction[..., 1], fraction[..., 2]

    c000 = values[i, j, k]
    c100 = values[i + 1, j, k]
    c010 = values[i, j + 1, k]
    c110 = values[i + 1, j + 1, k]
    c001 = values[i, j, k + 1]
    c101 = values[i + 1, j, k + 1]
    c011 = values[i, j + 1, k + 1]
    c111 = values[i + 1, j + 1, k + 1]

    c00 = c000 * (1 - u) + c100 * u
    c10 = c010 * (1 - u) + c110 * u
    c01 = c001 * (1 - u) + c101 * u
    c11 = c011 * (1 - u) + c111 * u
    c0 = c00 * (1 - v) + c10 * v
    c1 = c01 * (1 - v) + c11 * v
    distance = c0 * (1 - w) + c1 * w

    du = (
        ((c100 - c000) * (1 - v) + (c110 - c010) * v) * (1 - w)
        + ((c101 - c001) * (1 - v) + (c111 - c011) * v) * w
    )
    dv = (c10 - c00) * (1 - w) + (c11 - c01) * w
    dw = c1 - c0
    gradient = numpy.stack([du, dv, dw], axis=-1) / grid.spacing
    return distance, gradient, out_of_bounds


def sample_sdf(
    grid: SdfGrid, point: numpy.ndarray, warn: bool = False
) -> Tuple[Union[float, numpy.ndarray], Union[bool, numpy.ndarray]]:
    """
    trilinear interpolation of the 8 surrounding nodes; points outside of the grid are clamped to its boundary

    :param grid: baked grid
    :param point: point(s) ``(..., 3)``
    :param warn: warn when any point was clamped
    :return: signed distance(s) and out-of-bounds flag(s)
    """

    distance, _, out_of_bounds = _trilinear(grid, point)
    if warn and numpy.any(out_of_bounds):
        warnings.warn(
            f'"{int(numpy.sum(out_of_bounds))}" SDF queries outside of {grid!r} were clamped to its boundary'
        )
    if distance.ndim == 0:
        return float(distance), bool(out_of_bounds)
    return distance, out_of_bounds


def sample_sdf_gradient(grid: SdfGrid, point: numpy.ndarray) -> numpy.ndarray:
    """
    analytic derivative of the trilinear form

    :param grid: baked grid
    :param point: point(s) ``(..., 3)``
    :return: gradient(s) ``(..., 3)``
    """

    return _trilinear(grid, point)[1]


def sample_sdf_with_gradient(
    grid: SdfGrid, point: numpy.ndarray
) -> Tuple[numpy.ndarray, numpy.ndarray, numpy.ndarray]:
    """
    :param grid: baked grid
    :param point: point(s) ``(..., 3)``
    :return: signed distances, gradients and out-of-bounds flags
    """

    return _trilinear(grid, point)


def geman_mcclure(
    residual: Union[float, numpy.ndarray], scale: float = 0.1
) -> Union[float, numpy.ndarray]:
    """
    bounded robust cost ``r^2 c^2 / (r^2 + c^2)``

    :param residual: residual(s) in meters
    :param scale: scale ``c`` in meters
    :return: cost, bounded above by ``c^2``
    """

    if not scale > 0:
        raise ValueError(f'Geman-McClure scale must be positive, not "{scale}"')
    squared = numpy.square(residual)
    return squared * scale**2 / (squared + scale**2)


def geman_mcclure_derivative(
    residual: Union[float, numpy.ndarray], scale: float = 0.1
) -> Union[float, numpy.ndarray]:
    """
    :param residual: residual(s) in meters
    :param scale: scale ``c`` in meters
    :return: ``2 r c^4 / (r^2 + c^2)^2``
    """

    if not scale > 0:
        raise ValueError(f'Geman-McClure scale must be positive, not "{scale}"')
    return 2 * residual * scale**4 / (numpy.square(residual) + scale**2) ** 2
