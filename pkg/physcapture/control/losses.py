"""
sample losses comparing simulated states against the reference motion and the 2D observations of the same frame

every loss accepts a batch of states ``(B, dof)`` against a single reference frame and returns ``(B,)`` values
"""

from dataclasses import dataclass
from typing import Mapping
from typing import NamedTuple
from typing import Tuple
from typing import Union

import numpy

from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import link_transforms
from physcapture.character.skeleton import link_velocities
from physcapture.character.skeleton import point_velocities
from physcapture.character.skeleton import TreeKinematics
from physcapture.kinematic.camera import Camera
from physcapture.utilities import as_batch
from physcapture.utilities import pose_difference

COMPONENTS = ("tra", "dyn", "ban", "reproj")

# returned for failed samples so they sort after every finite loss
FAILED_LOSS = numpy.inf


@dataclass
class LossWeights:
    tra: float = 1.0
    dyn: float = 1.0
    ban: float = 1.0
    reproj: float = 1.0

    def __post_init__(self):
        for name in COMPONENTS:
            if getattr(self, name) < 0:
                raise ValueError(f'loss weight "{name}" must be non-negative, not "{getattr(self, name)}"')

    def as_array(self) -> numpy.ndarray:
        return numpy.array([getattr(self, name) for name in COMPONENTS])


class TrackingFrame(NamedTuple):
    """reference pose and velocity of one frame, with optional observed keypoints"""

    pose: numpy.ndarray
    velocity: numpy.ndarray
    keypoints: numpy.ndarray = None
    confidences: numpy.ndarray = None
    camera: Camera = None


def _squeeze(values: numpy.ndarray, leading: tuple) -> Union[float, numpy.ndarray]:
    values = values.reshape(leading)
    return float(values) if values.ndim == 0 else values


def _com_kinematics(
    model: CharacterModel, kinematics: TreeKinematics, velocity: numpy.ndarray
) -> Tuple[numpy.ndarray, numpy.ndarray, numpy.ndarray]:
    angular, linear = link_velocities(model, kinematics, velocity)
    bodies = numpy.arange(model.body_count)
    centers = kinematics.points(bodies, model.centers)
    center_velocities = point_velocities(kinematics, angular, linear, bodies, centers)
    weights = model.masses[None, :, None] / model.total_mass
    return (weights * centers).sum(axis=1), (weights * center_velocities).sum(axis=1), linear


def loss_tra(
    model: CharacterModel, pose: numpy.ndarray, ref_pose: numpy.ndarray
) -> Union[float, numpy.ndarray]:
    """
    squared pose difference plus squared joint position error

    :param model: character model
    :param pose: simulated pose(s) ``(..., dof)``
    :param ref_pose: reference pose ``(dof,)``
    :return: loss per pose
    """

    pose, leading = as_batch(numpy.asarray(pose, dtype=float), model.dof)
    ref_pose = numpy.broadcast_to(numpy.asarray(ref_pose, dtype=float), pose.shape)
    joints = link_transforms(model, pose).origins[:, 1:]
    ref_joints = link_transforms(model, ref_pose).origins[:, 1:]
    value = (pose_difference(pose, ref_pose) ** 2).sum(axis=1) + (
        (joints - ref_joints) ** 2
    ).sum(axis=(1, 2))
    return _squeeze(value, leading)


def loss_dyn(
    model: CharacterModel,
    pose: numpy.ndarray,
    velocity: numpy.ndarray,
    ref_pose: numpy.ndarray,
    ref_velocity: numpy.ndarray,
) -> Union[float, numpy.ndarray]:
    """
    squared velocity difference plus squared joint linear velocity error

    :param model: character model
    :param pose: simulated pose(s) ``(..., dof)``
    :param velocity: simulated velocity(s) ``(..., dof)``
    :param ref_pose: reference pose ``(dof,)``
    :param ref_velocity: reference velocity ``(dof,)``
    :return: loss per state
    """

    pose, leading = as_batch(numpy.asarray(pose, dtype=float), model.dof)
    velocity, _ = as_batch(numpy.asarray(velocity, dtype=float), model.dof)
    ref_pose = numpy.broadcast_to(numpy.asarray(ref_pose, dtype=float), pose.shape)
    ref_velocity = numpy.broadcast_to(numpy.asarray(ref_velocity, dtype=float), pose.shape)

    _, linear = link_velocities(model, link_transforms(model, pose), velocity)
    _, ref_linear = link_velocities(model, link_transforms(model, ref_pose), ref_velocity)
    value = ((velocity - ref_velocity) ** 2).sum(axis=1) + (
        (linear[:, 1:] - ref_linear[:, 1:]) ** 2
    ).sum(axis=(1, 2))
    return _squeeze(value, leading)


def loss_ban(
    model: CharacterModel,
    pose: numpy.ndarray,
    velocity: numpy.ndarray,
    ref_pose: numpy.ndarray,
    ref_velocity: numpy.ndarray = None,
) -> Union[float, numpy.ndarray]:
    """
    balance loss: squared error of the ground-plane vectors from every end effector to the center of mass, plus
    squared center-of-mass velocity error

    :param model: character model
    :param pose: simulated pose(s) ``(..., dof)``
    :param velocity: simulated velocity(s) ``(..., dof)``
    :param ref_pose: reference pose ``(dof,)``
    :param ref_velocity: reference velocity ``(dof,)``, zero when not given
    :return: loss per state
    """

    pose, leading = as_batch(numpy.asarray(pose, dtype=float), model.dof)
    velocity, _ = as_batch(numpy.asarray(velocity, dtype=float), model.dof)
    ref_pose = numpy.broadcast_to(numpy.asarray(ref_pose, dtype=float), pose.shape)
    if ref_velocity is None:
        ref_velocity = numpy.zeros(model.dof)
    ref_velocity = numpy.broadcast_to(numpy.asarray(ref_velocity, dtype=float), pose.shape)

    planar = numpy.array([1.0, 1.0, 0.0])
    effectors = model.end_effector_joints + 1
    offsets = []
    com_velocities = []
    for poses, velocities in ((pose, velocity), (ref_pose, ref_velocity)):
        kinematics = link_transforms(model, poses)
        com, com_velocity, _ = _com_kinematics(model, kinematics, velocities)
        offsets.append((kinematics.origins[:, effectors] - com[:, None]) * planar)
        com_velocities.append(com_velocity)

    value = ((offsets[0] - offsets[1]) ** 2).sum(axis=(1, 2)) + (
        (com_velocities[0] - com_velocities[1]) ** 2
    ).sum(axis=1)
    return _squeeze(value, leading)


def loss_reproj(
    model: CharacterModel,
    pose: numpy.ndarray,
    keypoints: numpy.ndarray,
    confidences: numpy.ndarray,
    camera: Camera,
    return_flags: bool = False,
) -> Union[float, numpy.ndarray, Tuple[numpy.ndarray, numpy.ndarray]]:
    """
    confidence-weighted squared pixel error of the projected joints; joints behind the camera are dropped

    :param model: character model
    :param pose: simulated pose(s) ``(..., dof)``
    :param keypoints: observed keypoints ``(joints, 2)``
    :param confidences: keypoint confidences ``(joints,)``
    :param camera: camera
    :param return_flags: also return whether any joint was behind the camera
    :return: loss per pose, and the behind-camera flags when requested
    """

    pose, leading = as_batch(numpy.asarray(pose, dtype=float), model.dof)
    joints = link_transforms(model, pose).origins[:, 1:]
    pixels, in_front = camera.project(joints)
    weights = numpy.asarray(confidences, dtype=float) * in_front
    value = (weights * ((pixels - keypoints) ** 2).sum(axis=-1)).sum(axis=1)
    if return_flags:
        return _squeeze(value, leading), ~numpy.all(in_front, axis=1).reshape(leading)
    return _squeeze(value, leading)


def loss_total(
    components: Union[numpy.ndarray, Mapping[str, float]],
    weights: LossWeights = None,
    failed: numpy.ndarray = None,
) -> Union[float, numpy.ndarray]:
    """
    weighted sum of the ``tra``, ``dyn``, ``ban`` and ``reproj`` components; failed samples are infinite

    :param components: components ``(..., 4)`` or a mapping by name
    :param weights: component weights, one by default
    :param failed: failure flags ``(...)``
    :return: total loss

    >>> loss_total({"tra": 1, "dyn": 2, "ban": 3, "reproj": 4})
    10.0
    """

    if weights is None:
        weights = LossWeights()
    if isinstance(components, Mapping):
        components = numpy.array([components[name] for name in COMPONENTS], dtype=float)
    components = numpy.asarray(components, dtype=float)
    total = components @ weights.as_array()
    if failed is not None:
        total = numpy.where(failed, FAILED_LOSS, total)
    total = numpy.where(numpy.isfinite(total), total, FAILED_LOSS)
    return float(total) if numpy.ndim(total) == 0 else total


def detect_failure(
    pose: numpy.ndarray,
    diverged: Union[bool, numpy.ndarray] = False,
    loss: Union[float, numpy.ndarray] = 0.0,
    fall_height: float = 0.3,
) -> Union[bool, numpy.ndarray]:
    """
    :param pose: pose(s) ``(..., dof)``
    :param diverged: simulation divergence flag(s)
    :param loss: total loss(es)
    :param fall_height: root height below which the character has fallen, in meters
    :return: whether the state counts as failed
    """

    pose = numpy.asarray(pose, dtype=float)
    with numpy.errstate(invalid="ignore"):
        fallen = ~(pose[..., 2] >= fall_height)
    failed = (
        fallen
        | numpy.asarray(diverged, dtype=bool)
        | ~numpy.isfinite(loss)
        | ~numpy.all(numpy.isfinite(pose), axis=-1)
    )
    return bool(failed) if numpy.ndim(failed) == 0 else failed


def loss_components(
    model: CharacterModel,
    pose: numpy.ndarray,
    velocity: numpy.ndarray,
    reference: TrackingFrame,
) -> numpy.ndarray:
    """
    :param model: character model
    :param pose: simulated poses ``(B, dof)``
    :param velocity: simulated velocities ``(B, dof)``
    :param reference: reference frame the states should match
    :return: ``tra``, ``dyn``, ``ban`` and ``reproj`` per state ``(B, 4)``; ``reproj`` is zero without observations
    """

    pose, _ = as_batch(numpy.asarray(pose, dtype=float), model.dof)
    velocity, _ = as_batch(numpy.asarray(velocity, dtype=float), model.dof)
    components = numpy.zeros((len(pose), len(COMPONENTS)))
    with numpy.errstate(all="ignore"):
        components[:, 0] = loss_tra(model, pose, reference.pose)
        components[:, 1] = loss_dyn(model, pose, velocity, reference.pose, reference.velocity)
        components[:, 2] = loss_ban(model, pose, velocity, reference.pose, reference.velocity)
        if reference.keypoints is not None and reference.camera is not None:
            components[:, 3] = loss_reproj(
                model, pose, reference.keypoints, reference.confidences, reference.camera
            )
    return components


def evaluate_states(
    model: CharacterModel,
    pose: numpy.ndarray,
    velocity: numpy.ndarray,
    diverged: numpy.ndarray,
    reference: TrackingFrame,
    weights: LossWeights = None,
    fall_height: float = 0.3,
) -> Tuple[numpy.ndarray, numpy.ndarray, numpy.ndarray]:
    """
    :return: components ``(B, 4)``, totals ``(B,)`` with failed states infinite, and failure flags ``(B,)``
    """

    components = loss_components(model, pose, velocity, reference)
    totals = loss_total(components, weights)
    failed = detect_failure(pose, diverged, totals, fall_height)
    totals = numpy.where(failed, FAILED_LOSS, totals)
    return components, numpy.atleast_1d(totals), numpy.atleast_1d(failed)
