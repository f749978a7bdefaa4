import logging
from os import PathLike
from pathlib import Path
from typing import Optional
from typing import Tuple

import numpy

from physcapture.character.skeleton import SkeletonScale
from physcapture.utilities import interpolate_pose
from physcapture.utilities import pose_difference

# tolerance on timestamps when querying the ends of a motion
TIME_TOLERANCE = 1e-9


class ReferenceMotion:
    """
    timestamped sequence of kinematic poses; velocities are forward differences under the pose-difference convention
    """

    def __init__(
        self,
        timestamps: numpy.ndarray,
        poses: numpy.ndarray,
        frame_rate: float = None,
        scale: SkeletonScale = None,
    ):
        """
        :param timestamps: frame times in seconds, strictly increasing
        :param poses: poses of shape ``(frames, dof)``
        :param frame_rate: nominal frame rate in Hz, derived from the timestamps when not given
        :param scale: skeleton scale the poses were estimated with

        >>> ReferenceMotion([0.0, 0.5], numpy.zeros((2, 57)))
        ReferenceMotion(frames=2, dof=57, frame_rate=2.0, duration=0.5)
        """

        timestamps = numpy.array(timestamps, dtype=float).ravel()
        poses = numpy.array(poses, dtype=float)
        if poses.ndim != 2 or len(poses) != len(timestamps):
            raise ValueError(
                f'expected one pose per timestamp, not "{poses.shape}" for "{len(timestamps)}" timestamps'
            )
        if len(timestamps) == 0:
            raise ValueError("motion needs at least one frame")
        if numpy.any(numpy.diff(timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not numpy.all(numpy.isfinite(poses)):
            raise ValueError("poses are not finite")

        if frame_rate is None:
            frame_rate = (
                (len(timestamps) - 1) / (timestamps[-1] - timestamps[0])
                if len(timestamps) > 1
                else 0.0
            )

        self.__timestamps = timestamps
        self.__poses = poses
        self.__frame_rate = float(frame_rate)
        self.__scale = scale if scale is not None else SkeletonScale()
        self.__velocities = None

        self.__timestamps.setflags(write=False)
        self.__poses.setflags(write=False)

    @property
    def timestamps(self) -> numpy.ndarray:
        return self.__timestamps

    @property
    def poses(self) -> numpy.ndarray:
        return self.__poses

    @property
    def frame_rate(self) -> float:
        return self.__frame_rate

    @property
    def scale(self) -> SkeletonScale:
        return self.__scale

    @property
    def dof(self) -> int:
        return self.__poses.shape[1]

    @property
    def duration(self) -> float:
        return float(self.__timestamps[-1] - self.__timestamps[0])

    @property
    def velocities(self) -> numpy.ndarray:
        """
        ``(pose_{t+1} - pose_t) / dt`` per frame; the last frame repeats the last interval
        """

        if self.__velocities is None:
            velocities = numpy.zeros(self.__poses.shape)
            if len(self) > 1:
                intervals = numpy.diff(self.__timestamps)[:, None]
                velocities[:-1] = (
                    pose_difference(self.__poses[1:], self.__poses[:-1]) / intervals
                )
                velocities[-1] = velocities[-2]
            velocities.setflags(write=False)
            self.__velocities = velocities
        return self.__velocities

    def interpolate(self, time: float) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """
        pose and velocity at an arbitrary time inside the motion

        :param time: query time in seconds
        :return: pose and velocity
        """

        start, end = self.__timestamps[0], self.__timestamps[-1]
        if not start - TIME_TOLERANCE <= time <= end + TIME_TOLERANCE:
            raise ValueError(
                f'time "{time}" outside of motion interval ("{start} - {end}")'
            )
        if len(self) == 1:
            return self.__poses[0].copy(), numpy.zeros(self.dof)

        index = int(numpy.searchsorted(self.__timestamps, time, side="right")) - 1
        index = min(max(index, 0), len(self) - 2)
        interval = self.__timestamps[index + 1] - self.__timestamps[index]
        fraction = min(max((time - self.__timestamps[index]) / interval, 0.0), 1.0)

        if fraction == 0.0:
            pose = self.__poses[index].copy()
        elif fraction == 1.0:
            pose = self.__poses[index + 1].copy()
        else:
            pose = interpolate_pose(
                self.__poses[index], self.__poses[index + 1], fraction
            )
        return pose, self.velocities[index].copy()

    def resample(self, frame_rate: float) -> "ReferenceMotion":
        """
        :param frame_rate: new frame rate in Hz
        :return: motion sampled at the new rate over the same interval
        """

        if frame_rate <= 0:
            raise ValueError(f'frame rate must be positive, not "{frame_rate}"')
        count = int(numpy.floor(self.duration * frame_rate + TIME_TOLERANCE)) + 1
        timestamps = self.__timestamps[0] + numpy.arange(count) / frame_rate
        poses = numpy.stack([self.interpolate(time)[0] for time in timestamps])
        return ReferenceMotion(timestamps, poses, frame_rate=frame_rate, scale=self.scale)

    def to_file(self, path: PathLike, overwrite: bool = False):
        """
        write the motion file: a header with frame rate and dof, then one line per frame with the timestamp and the
        pose in shortest round-trip decimal text

        :param path: output file
        :param overwrite: overwrite existing file
        """

        if not isinstance(path, Path):
            path = Path(path)
        if path.exists() and not overwrite:
            logging.warning(f'skipping existing file "{path}"')
            return
        scale = None if numpy.all(self.__scale.as_array() == 1) else self.__scale
        write_motion_file(path, self.__timestamps, self.__poses, self.__frame_rate, scale)

    @classmethod
    def from_file(cls, path: PathLike) -> "ReferenceMotion":
        """
        :param path: motion file
        :return: motion read from the file
        """

        timestamps, poses, frame_rate, scale = read_motion_file(path)
        return cls(timestamps, poses, frame_rate=frame_rate, scale=scale)

    def __len__(self) -> int:
        return len(self.__timestamps)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(frames={len(self)}, dof={self.dof}, frame_rate={self.frame_rate!r}, duration={self.duration!r})"


def interpolate_reference(
    motion: ReferenceMotion, time: float
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    :param motion: reference motion
    :param time: query time in seconds
    :return: interpolated pose and bracketing finite-difference velocity
    """

    return motion.interpolate(time)


def write_motion_file(
    path: PathLike,
    timestamps: numpy.ndarray,
    rows: numpy.ndarray,
    frame_rate: float,
    scale: SkeletonScale = None,
):
    """
    :param path: output file
    :param timestamps: one timestamp per row
    :param rows: values per row ``(frames, dof)``
    :param frame_rate: frame rate in Hz
    :param scale: skeleton scale, written as an optional ``scale`` header line of bone-group multipliers
    """

    rows = numpy.asarray(rows, dtype=float)
    with open(path, "w", encoding="ascii") as output_file:
        output_file.write(f"frame_rate {float(frame_rate)!r}\n")
        output_file.write(f"dof {rows.shape[1]}\n")
        if scale is not None:
            multipliers = " ".join(repr(float(value)) for value in scale.as_array())
            output_file.write(f"scale {multipliers}\n")
        for timestamp, row in zip(timestamps, rows):
            values = " ".join(repr(float(value)) for value in row)
            output_file.write(f"{float(timestamp)!r} {values}\n")


def read_motion_file(
    path: PathLike,
) -> Tuple[numpy.ndarray, numpy.ndarray, float, Optional[SkeletonScale]]:
    """
    :param path: motion file
    :return: timestamps, rows, frame rate and the skeleton scale when the file records one
    """

    if not isinstance(path, Path):
        path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'motion file "{path}" does not exist')

    header = {}
    timestamps = []
    rows = []
    with open(path, encoding="ascii") as input_file:
        for line in input_file:
            fields = line.split()
            if len(fields) == 0 or fields[0].startswith("#"):
                continue
            if fields[0] in ("frame_rate", "dof", "scale"):
                header[fields[0]] = fields[1:]
                continue
            timestamps.append(float(fields[0]))
            rows.append([float(value) for value in fields[1:]])

    if "frame_rate" not in header or "dof" not in header:
        raise ValueError(f'motion file "{path}" is missing its header')
    dof = int(header["dof"][0])
    if any(len(row) != dof for row in rows):
        raise ValueError(f'motion file "{path}" has rows of other than "{dof}" values')
    rows = numpy.array(rows, dtype=float).reshape(-1, dof)
    scale = None
    if "scale" in header:
        scale = SkeletonScale.from_array([float(value) for value in header["scale"]])
    return numpy.array(timestamps), rows, float(header["frame_rate"][0]), scale
