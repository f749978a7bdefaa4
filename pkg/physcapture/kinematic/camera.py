from dataclasses import dataclass
import logging
from os import PathLike
from pathlib import Path
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy
import pandas

from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import forward_kinematics
from physcapture.physics.scene import SceneGeometry

# depth below which a point counts as behind the camera
MINIMUM_DEPTH = 1e-6

# samples per ray of the visibility test
VISIBILITY_SAMPLES = 32


@dataclass(frozen=True)
class Camera:
    """
    pinhole camera; ``rotation`` and ``translation`` map world points into camera coordinates (``x`` right, ``y``
    down, ``z`` along the optical axis)
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: numpy.ndarray
    translation: numpy.ndarray

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f'focal lengths must be positive, not "{(self.fx, self.fy)}"')
        rotation = numpy.array(self.rotation, dtype=float).reshape(3, 3)
        if not numpy.allclose(rotation @ rotation.T, numpy.eye(3), atol=1e-8):
            raise ValueError("camera rotation is not orthonormal")
        translation = numpy.array(self.translation, dtype=float).reshape(3)
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def look_at(
        cls,
        position: Sequence[float] = (0.0, -4.0, 1.0),
        target: Sequence[float] = (0.0, 0.0, 1.0),
        up: Sequence[float] = (0.0, 0.0, 1.0),
        focal_length: float = 1000.0,
        principal_point: Tuple[float, float] = (640.0, 360.0),
    ) -> "Camera":
        """
        :param position: camera center in world coordinates
        :param target: point on the optical axis
        :param up: world direction appearing upwards in the image
        :param focal_length: focal length in pixels
        :param principal_point: principal point in pixels
        :return: camera

        >>> camera = Camera.look_at()
        >>> camera.project([0.0, 0.0, 1.0])[0].tolist()
        [640.0, 360.0]
        """

        position = numpy.asarray(position, dtype=float)
        forward = numpy.asarray(target, dtype=float) - position
        forward /= numpy.linalg.norm(forward)
        right = numpy.cross(forward, numpy.asarray(up, dtype=float))
        if not numpy.linalg.norm(right) > 0:
            raise ValueError(f'up direction "{up}" is parallel to the optical axis')
        right /= numpy.linalg.norm(right)
        down = numpy.cross(forward, right)
        rotation = numpy.stack([right, down, forward])
        return cls(
            fx=focal_length,
            fy=focal_length,
            cx=principal_point[0],
            cy=principal_point[1],
            rotation=rotation,
            translation=-rotation @ position,
        )

    @property
    def intrinsics(self) -> numpy.ndarray:
        return numpy.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def extrinsics(self) -> numpy.ndarray:
        return numpy.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @property
    def center(self) -> numpy.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: numpy.ndarray) -> numpy.ndarray:
        return numpy.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project(self, points: numpy.ndarray) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """
        :param points: world points ``(..., 3)``
        :return: pixels ``(..., 2)`` and whether each point lies in front of the camera
        """

        local = self.to_camera(points)
        depth = local[..., 2]
        in_front = depth > MINIMUM_DEPTH
        depth = numpy.where(in_front, depth, MINIMUM_DEPTH)
        pixels = numpy.stack(
            [
                self.fx * local[..., 0] / depth + self.cx,
                self.fy * local[..., 1] / depth + self.cy,
            ],
            axis=-1,
        )
        return pixels, in_front

    def projection_jacobian(self, points: numpy.ndarray) -> numpy.ndarray:
        """
        :param points: world points ``(..., 3)``
        :return: derivative of the pixels with respect to the world points ``(..., 2, 3)``
        """

        local = self.to_camera(points)
        depth = numpy.maximum(local[..., 2], MINIMUM_DEPTH)
        jacobian = numpy.zeros(local.shape[:-1] + (2, 3))
        jacobian[..., 0, 0] = self.fx / depth
        jacobian[..., 0, 2] = -self.fx * local[..., 0] / depth**2
        jacobian[..., 1, 1] = self.fy / depth
        jacobian[..., 1, 2] = -self.fy * local[..., 1] / depth**2
        return jacobian @ self.rotation

    def to_file(self, path: PathLike, overwrite: bool = False):
        """
        write the camera file: a ``K`` line with the 9 intrinsic matrix entries and an ``Rt`` line with the 12 entries
        of the 3x4 extrinsic matrix, both row-major

        :param path: output file
        :param overwrite: overwrite existing file
        """

        if not isinstance(path, Path):
            path = Path(path)
        if path.exists() and not overwrite:
            logging.warning(f'skipping existing file "{path}"')
            return
        with open(path, "w", encoding="ascii") as output_file:
            for label, matrix in (("K", self.intrinsics), ("Rt", self.extrinsics)):
                values = " ".join(repr(float(value)) for value in matrix.ravel())
                output_file.write(f"{label} {values}\n")

    @classmethod
    def from_file(cls, path: PathLike) -> "Camera":
        if not isinstance(path, Path):
            path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f'camera file "{path}" does not exist')

        entries = {}
        with open(path, encoding="ascii") as input_file:
            for line in input_file:
                fields = line.split()
                if len(fields) > 0 and not fields[0].startswith("#"):
                    entries[fields[0]] = numpy.array(fields[1:], dtype=float)
        if "K" not in entries or "Rt" not in entries:
            raise ValueError(f'camera file "{path}" needs both "K" and "Rt" entries')

        intrinsics = entries["K"].reshape(3, 3)
        extrinsics = entries["Rt"].reshape(3, 4)
        return cls(
            fx=intrinsics[0, 0],
            fy=intrinsics[1, 1],
            cx=intrinsics[0, 2],
            cy=intrinsics[1, 2],
            rotation=extrinsics[:, :3],
            translation=extrinsics[:, 3],
        )


def reproject(camera: Camera, point: numpy.ndarray) -> Tuple[numpy.ndarray, Union[bool, numpy.ndarray]]:
    """
    pinhole projection of world point(s)

    :param camera: camera
    :param point: world point(s) ``(..., 3)``
    :return: pixel(s) and in-front flag(s); points behind the camera are projected at the minimum depth
    """

    pixels, in_front = camera.project(point)
    if in_front.ndim == 0:
        return pixels, bool(in_front)
    return pixels, in_front


class ObservationSequence:
    """
    2D keypoints with confidences per frame, one keypoint per character joint
    """

    def __init__(
        self,
        keypoints: numpy.ndarray,
        confidences: numpy.ndarray,
        camera: Camera,
        frame_rate: float,
    ):
        keypoints = numpy.array(keypoints, dtype=float)
        confidences = numpy.array(confidences, dtype=float)
        if keypoints.ndim != 3 or keypoints.shape[-1] != 2:
            raise ValueError(f'keypoints must have shape (frames, keypoints, 2), not "{keypoints.shape}"')
        if confidences.shape != keypoints.shape[:-1]:
            raise ValueError(
                f'confidences "{confidences.shape}" do not match keypoints "{keypoints.shape}"'
            )
        if numpy.any((confidences < 0) | (confidences > 1)):
            raise ValueError("confidences must lie in [0, 1]")
        if not frame_rate > 0:
            raise ValueError(f'frame rate must be positive, not "{frame_rate}"')
        if len(keypoints) == 0:
            raise ValueError("observations need at least one frame")

        self.__keypoints = keypoints
        self.__confidences = confidences
        self.__camera = camera
        self.__frame_rate = float(frame_rate)
        self.__keypoints.setflags(write=False)
        self.__confidences.setflags(write=False)

    @property
    def keypoints(self) -> numpy.ndarray:
        return self.__keypoints

    @property
    def confidences(self) -> numpy.ndarray:
        return self.__confidences

    @property
    def camera(self) -> Camera:
        return self.__camera

    @property
    def frame_rate(self) -> float:
        return self.__frame_rate

    @property
    def keypoint_count(self) -> int:
        return self.__keypoints.shape[1]

    @property
    def timestamps(self) -> numpy.ndarray:
        return numpy.arange(len(self)) / self.__frame_rate

    def check_model(self, model: CharacterModel):
        if self.keypoint_count != model.body_count - 1:
            raise ValueError(
                f'"{self.keypoint_count}" keypoints do not match the "{model.body_count - 1}" joints of the character'
            )

    @property
    def data(self) -> pandas.DataFrame:
        frames, keypoints = numpy.meshgrid(
            numpy.arange(len(self)), numpy.arange(self.keypoint_count), indexing="ij"
        )
        return pandas.DataFrame(
            {
                "frame": frames.ravel(),
                "keypoint": keypoints.ravel(),
                "u": self.__keypoints[..., 0].ravel(),
                "v": self.__keypoints[..., 1].ravel(),
                "confidence": self.__confidences.ravel(),
            }
        )

    def to_file(self, path: PathLike, overwrite: bool = False):
        """
        write the observation table (``frame``, ``keypoint``, ``u``, ``v``, ``confidence``) after a
        ``# frame_rate=`` comment line

        :param path: output file
        :param overwrite: overwrite existing file
        """

        if not isinstance(path, Path):
            path = Path(path)
        if path.exists() and not overwrite:
            logging.warning(f'skipping existing file "{path}"')
            return
        with open(path, "w", encoding="ascii", newline="") as output_file:
            output_file.write(f"# frame_rate={self.__frame_rate!r}\n")
            self.data.to_csv(output_file, index=False, float_format="%.17g")

    @classmethod
    def from_file(cls, path: PathLike, camera: Union[Camera, PathLike]) -> "ObservationSequence":
        """
        :param path: observation file
        :param camera: camera, or path to a camera file
        :return: observations
        """

        if not isinstance(path, Path):
            path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f'observation file "{path}" does not exist')
        if not isinstance(camera, Camera):
            camera = Camera.from_file(camera)

        with open(path, encoding="ascii") as input_file:
            header = input_file.readline().strip()
        if not header.startswith("# frame_rate="):
            raise ValueError(f'observation file "{path}" is missing its frame rate')
        frame_rate = float(header.split("=", 1)[1])

        data = pandas.read_csv(path, comment="#").sort_values(["frame", "keypoint"])
        frames = data["frame"].nunique()
        keypoints = data["keypoint"].nunique()
        if len(data) != frames * keypoints:
            raise ValueError(f'observation file "{path}" does not hold every keypoint of every frame')
        return cls(
            keypoints=data[["u", "v"]].to_numpy().reshape(frames, keypoints, 2),
            confidences=data["confidence"].to_numpy().reshape(frames, keypoints),
            camera=camera,
            frame_rate=frame_rate,
        )

    def __len__(self) -> int:
        return len(self.__keypoints)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(frames={len(self)}, keypoints={self.keypoint_count}, frame_rate={self.__frame_rate!r})"


def occluded(camera: Camera, scene: SceneGeometry, points: numpy.ndarray, clearance: float = 0.05) -> numpy.ndarray:
    """
    ray test from the camera center towards each point, stopping ``clearance`` short of the point

    :param camera: camera
    :param scene: scene geometry
    :param points: world points ``(..., 3)``
    :param clearance: distance from the point where the test stops, in meters
    :return: whether scene geometry lies between the camera and each point
    """

    points = numpy.asarray(points, dtype=float)
    center = camera.center
    rays = points - center
    lengths = numpy.linalg.norm(rays, axis=-1, keepdims=True)
    fractions = numpy.linspace(0.0, 1.0, VISIBILITY_SAMPLES)
    stops = numpy.maximum(lengths - clearance, 0.0) / numpy.where(lengths > 0, lengths, 1.0)
    samples = center + (fractions * stops)[..., None] * rays[..., None, :]
    return numpy.any(scene.sdf(samples) < 0, axis=-1)


def synthesize_observations(
    model: CharacterModel,
    motion: ReferenceMotion,
    camera: Camera,
    scene: SceneGeometry = None,
    noise: float = 0.0,
    seed: int = 0,
) -> ObservationSequence:
    """
    project the joints of a motion into the camera; keypoints behind the camera or hidden by the scene get zero
    confidence, visible ones full confidence

    :param model: character model
    :param motion: motion to observe
    :param camera: camera
    :param scene: scene used for the visibility test, none to skip it
    :param noise: standard deviation of the Gaussian pixel noise
    :param seed: noise seed
    :return: observations at the motion frame rate
    """

    if noise < 0:
        raise ValueError(f'pixel noise must be non-negative, not "{noise}"')
    joints, _ = forward_kinematics(model, motion.poses)
    pixels, in_front = camera.project(joints)
    visible = in_front
    if scene is not None:
        visible = visible & ~occluded(camera, scene, joints)
    if noise > 0:
        pixels = pixels + numpy.random.default_rng(seed).normal(0.0, noise, pixels.shape)
    return ObservationSequence(
        keypoints=pixels,
        confidences=visible.astype(float),
        camera=camera,
        frame_rate=motion.frame_rate,
    )
