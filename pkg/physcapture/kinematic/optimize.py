"""
staged kinematic fit of the character to 2D keypoint observations

the variables are the per-frame root rotation and translation, the per-frame joint rotations and the bone group
multipliers; the objective is a weighted sum of the confidence-weighted reprojection error, pose and shape priors,
a second-difference smoothness term on the joint rotations and a robust foot-to-scene distance term
"""

from dataclasses import dataclass
from dataclasses import fields
import logging
from typing import Any
from typing import Dict
from typing import NamedTuple
from typing import Tuple
from typing import Union
import warnings

import numpy
import pandas

from physcapture.character.const import BONE_GROUPS
from physcapture.character.const import STAGE_WEIGHTS
from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import link_transforms
from physcapture.character.skeleton import point_jacobian
from physcapture.character.skeleton import scale_jacobian
from physcapture.character.skeleton import SkeletonScale
from physcapture.character.skeleton import tangent_to_coordinates
from physcapture.character.skeleton import TreeKinematics
from physcapture.kinematic.camera import ObservationSequence
from physcapture.physics.scene import SceneGeometry
from physcapture.physics.sdf import bake_sdf
from physcapture.physics.sdf import geman_mcclure
from physcapture.physics.sdf import geman_mcclure_derivative
from physcapture.physics.sdf import sample_sdf_with_gradient
from physcapture.physics.sdf import SdfGrid
from physcapture.utilities import ROOT_DOF

# multipliers are kept inside this range during the fit
SCALE_LIMITS = (0.5, 2.0)


@dataclass
class KinematicConfig:
    iterations: int = 300
    learning_rate: float = 0.01
    gm_scale: float = 0.1
    tolerance: float = 1e-6
    patience: int = 20
    interaction: bool = True
    estimate_scale: bool = True
    sdf_resolution: int = 256
    # margin around the motion when baking a scene on the fly, in meters
    sdf_padding: float = 1.0

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError(f'iterations must be at least 1, not "{self.iterations}"')
        if not self.learning_rate > 0:
            raise ValueError(f'learning rate must be positive, not "{self.learning_rate}"')
        if not self.gm_scale > 0:
            raise ValueError(f'Geman-McClure scale must be positive, not "{self.gm_scale}"')
        self.iterations = int(self.iterations)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "KinematicConfig":
        names = {field.name for field in fields(cls)}
        unknown = set(values) - names
        if len(unknown) > 0:
            raise ValueError(f'unknown kinematic settings "{sorted(unknown)}"')
        return cls(**values)


@dataclass
class OptVariables:
    root_rotation: numpy.ndarray
    translation: numpy.ndarray
    joints: numpy.ndarray
    scale: numpy.ndarray

    def __post_init__(self):
        self.root_rotation = numpy.array(self.root_rotation, dtype=float).reshape(-1, 3)
        self.translation = numpy.array(self.translation, dtype=float).reshape(-1, 3)
        self.joints = numpy.array(self.joints, dtype=float).reshape(len(self.root_rotation), -1)
        self.scale = numpy.array(self.scale, dtype=float).reshape(len(BONE_GROUPS))
        if len(self.translation) != len(self.root_rotation):
            raise ValueError(
                f'"{len(self.translation)}" translations for "{len(self.root_rotation)}" frames'
            )

    @property
    def frames(self) -> int:
        return len(self.root_rotation)

    @property
    def poses(self) -> numpy.ndarray:
        return numpy.concatenate([self.translation, self.root_rotation, self.joints], axis=1)

    @classmethod
    def from_poses(cls, poses: numpy.ndarray, scale: numpy.ndarray = None) -> "OptVariables":
        poses = numpy.asarray(poses, dtype=float)
        if scale is None:
            scale = numpy.ones(len(BONE_GROUPS))
        return cls(poses[:, 3:6], poses[:, :3], poses[:, ROOT_DOF:], scale)

    @classmethod
    def from_motion(cls, motion: ReferenceMotion) -> "OptVariables":
        return cls.from_poses(motion.poses, motion.scale.as_array())

    def as_vector(self) -> numpy.ndarray:
        return numpy.concatenate([self.poses.ravel(), self.scale])

    @classmethod
    def from_vector(cls, vector: numpy.ndarray, frames: int) -> "OptVariables":
        vector = numpy.asarray(vector, dtype=float)
        groups = len(BONE_GROUPS)
        return cls.from_poses(vector[:-groups].reshape(frames, -1), vector[-groups:])

    @classmethod
    def zeros_like(cls, other: "OptVariables") -> "OptVariables":
        return cls.from_vector(numpy.zeros(other.as_vector().shape), other.frames)


class KinematicFit(NamedTuple):
    motion: ReferenceMotion
    variables: OptVariables
    stages: pandas.DataFrame
    converged: bool


def scaled_offsets(model: CharacterModel, scale: numpy.ndarray) -> numpy.ndarray:
    """
    :param model: character model
    :param scale: multiplier per bone group
    :return: joint offsets ``(bodies, 3)`` for the given multipliers
    """

    groups = model.bone_groups
    multipliers = numpy.where(groups >= 0, numpy.asarray(scale)[numpy.maximum(groups, 0)], 1.0)
    return model.unit_offsets * multipliers[:, None]


def _pose_gradient(
    model: CharacterModel,
    poses: numpy.ndarray,
    kinematics: TreeKinematics,
    links: numpy.ndarray,
    points: numpy.ndarray,
    point_gradients: numpy.ndarray,
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    jacobian = tangent_to_coordinates(
        model, poses, point_jacobian(model, kinematics, links, points)
    )
    pose_gradient = numpy.einsum("tpc,tpcd->td", point_gradients, jacobian)
    scale_gradient = numpy.einsum(
        "tpc,tpcg->g", point_gradients, scale_jacobian(model, kinematics, links)
    )
    return pose_gradient, scale_gradient


def _as_gradient(frames: int, pose_gradient: numpy.ndarray, scale_gradient: numpy.ndarray) -> OptVariables:
    return OptVariables.from_poses(pose_gradient.reshape(frames, -1), scale_gradient)


def loss_data(
    variables: OptVariables,
    observations: ObservationSequence,
    model: CharacterModel = None,
    gradient: bool = False,
) -> Union[float, Tuple[float, OptVariables]]:
    """
    confidence-weighted squared reprojection error of the joints, summed over frames and keypoints

    :param variables: optimization variables
    :param observations: 2D keypoints
    :param model: unit-scale character model
    :param gradient: also return the gradient
    :return: loss in squared pixels, and its gradient when requested
    """

    if model is None:
        model = build_character()
    observations.check_model(model)
    if len(observations) != variables.frames:
        raise ValueError(
            f'"{len(observations)}" observed frames for "{variables.frames}" optimized frames'
        )

    poses = variables.poses
    kinematics = link_transforms(model, poses, scaled_offsets(model, variables.scale))
    points = kinematics.origins[:, 1:]
    camera = observations.camera
    pixels, _ = camera.project(points)
    residual = pixels - observations.keypoints
    weights = observations.confidences
    value = float((weights * (residual**2).sum(axis=-1)).sum())
    if not gradient:
        return value

    pixel_gradients = 2 * weights[..., None] * residual
    point_gradients = (pixel_gradients[..., None, :] @ camera.projection_jacobian(points))[..., 0, :]
    links = numpy.arange(1, model.body_count)
    return value, _as_gradient(
        variables.frames,
        *_pose_gradient(model, poses, kinematics, links, points, point_gradients),
    )


def prior_terms(variables: OptVariables) -> Dict[str, float]:
    """
    :param variables: optimization variables
    :return: ``shape`` (squared deviation of the multipliers from one), ``latent`` (squared joint rotations) and
        ``kinetic`` (squared second differences of the joint rotations, zero for fewer than 3 frames)
    """

    joints = variables.joints
    second = joints[2:] - 2 * joints[1:-1] + joints[:-2]
    return {
        "shape": float(((variables.scale - 1) ** 2).sum()),
        "latent": float((joints**2).sum()),
        "kinetic": float((second**2).sum()) if len(joints) >= 3 else 0.0,
    }


def loss_prior(
    variables: OptVariables,
    weights: Dict[str, float] = None,
    gradient: bool = False,
) -> Union[float, Tuple[float, OptVariables]]:
    """
    weighted sum of the prior terms

    :param variables: optimization variables
    :param weights: ``shape``, ``latent`` and ``kinetic`` weights, defaulting to one
    :param gradient: also return the gradient
    :return: loss, and its gradient when requested

    >>> variables = OptVariables.from_poses(numpy.zeros((4, 57)))
    >>> loss_prior(variables)
    0.0
    """

    if weights is None:
        weights = {}
    shape_weight = weights.get("shape", 1.0)
    latent_weight = weights.get("latent", 1.0)
    kinetic_weight = weights.get("kinetic", 1.0)

    terms = prior_terms(variables)
    value = (
        shape_weight * terms["shape"]
        + latent_weight * terms["latent"]
        + kinetic_weight * terms["kinetic"]
    )
    if not gradient:
        return value

    joints = variables.joints
    joint_gradient = 2 * latent_weight * joints
    if len(joints) >= 3:
        second = joints[2:] - 2 * joints[1:-1] + joints[:-2]
        kinetic = 2 * kinetic_weight * second
        joint_gradient[2:] += kinetic
        joint_gradient[1:-1] -= 2 * kinetic
        joint_gradient[:-2] += kinetic

    result = OptVariables.zeros_like(variables)
    result.joints = joint_gradient
    result.scale = 2 * shape_weight * (variables.scale - 1)
    return value, result


def foot_keypoints(
    model: CharacterModel, variables: OptVariables
) -> Tuple[numpy.ndarray, TreeKinematics]:
    """
    :param model: unit-scale character model
    :param variables: optimization variables
    :return: world foot keypoints ``(frames, points, 3)`` and the tree kinematics
    """

    kinematics = link_transforms(
        model, variables.poses, scaled_offsets(model, variables.scale)
    )
    return kinematics.points(model.foot_keypoint_links, model.foot_keypoints), kinematics


def loss_scene(
    variables: OptVariables,
    grid: SdfGrid,
    model: CharacterModel = None,
    gm_scale: float = 0.1,
    gradient: bool = False,
) -> Union[float, Tuple[float, OptVariables]]:
    """
    Geman-McClure cost of the signed distance at the foot keypoints, summed over frames and keypoints

    :param variables: optimization variables
    :param grid: baked scene distance field
    :param model: unit-scale character model
    :param gm_scale: robustifier scale in meters
    :param gradient: also return the gradient
    :return: loss in squared meters, and its gradient when requested
    """

    if model is None:
        model = build_character()
    points, kinematics = foot_keypoints(model, variables)
    distances, gradients, _ = sample_sdf_with_gradient(grid, points)
    value = float(geman_mcclure(distances, gm_scale).sum())
    if not gradient:
        return value

    point_gradients = geman_mcclure_derivative(distances, gm_scale)[..., None] * gradients
    return value, _as_gradient(
        variables.frames,
        *_pose_gradient(
            model,
            variables.poses,
            kinematics,
            model.foot_keypoint_links,
            points,
            point_gradients,
        ),
    )


def stage_objective(
    variables: OptVariables,
    observations: ObservationSequence,
    grid: SdfGrid,
    weights: Dict[str, float],
    model: CharacterModel = None,
    gm_scale: float = 0.1,
) -> Tuple[float, OptVariables]:
    """
    :param variables: optimization variables
    :param observations: 2D keypoints
    :param grid: baked scene distance field
    :param weights: ``data``, ``latent``, ``shape``, ``kinetic`` and ``interaction`` weights
    :param model: unit-scale character model
    :param gm_scale: robustifier scale in meters
    :return: weighted loss and its gradient
    """

    if model is None:
        model = build_character()
    data, data_gradient = loss_data(variables, observations, model, gradient=True)
    prior, gradient = loss_prior(variables, weights, gradient=True)
    value = weights["data"] * data + prior
    vector = gradient.as_vector() + weights["data"] * data_gradient.as_vector()
    if weights.get("interaction", 0.0) > 0:
        scene, scene_gradient = loss_scene(variables, grid, model, gm_scale, gradient=True)
        value += weights["interaction"] * scene
        vector += weights["interaction"] * scene_gradient.as_vector()
    return value, OptVariables.from_vector(vector, variables.frames)


def initial_variables(
    model: CharacterModel, observations: ObservationSequence
) -> OptVariables:
    """
    rest pose at the origin for every frame, unit multipliers

    :param model: unit-scale character model
    :param observations: 2D keypoints
    :return: variables
    """

    poses = numpy.tile(model.rest_pose(), (len(observations), 1))
    return OptVariables.from_poses(poses)


def _bake_around(
    scene: SceneGeometry, variables: OptVariables, config: KinematicConfig
) -> SdfGrid:
    translations = variables.translation
    lower = translations.min(axis=0) - config.sdf_padding
    upper = translations.max(axis=0) + config.sdf_padding
    lower[2] = min(lower[2], -0.5)
    upper[2] = max(upper[2], 2.0)
    logging.info(f'baking scene distance field at resolution "{config.sdf_resolution}"')
    return bake_sdf(scene, (lower, upper), config.sdf_resolution)


def _adam_stage(
    objective,
    start: numpy.ndarray,
    config: KinematicConfig,
    trainable: numpy.ndarray,
) -> Tuple[numpy.ndarray, float, int, bool, list]:
    beta1, beta2, epsilon = 0.9, 0.999, 1e-8
    vector = start.copy()
    first = numpy.zeros(vector.shape)
    second = numpy.zeros(vector.shape)
    best_value, gradient = objective(vector)
    best = vector.copy()
    trace = [best_value]
    stalled = 0
    converged = False
    iteration = 0
    groups = len(BONE_GROUPS)

    for iteration in range(1, config.iterations + 1):
        gradient = numpy.where(trainable & numpy.isfinite(gradient), gradient, 0.0)
        first = beta1 * first + (1 - beta1) * gradient
        second = beta2 * second + (1 - beta2) * gradient**2
        corrected = first / (1 - beta1**iteration)
        scaled = numpy.sqrt(second / (1 - beta2**iteration)) + epsilon
        vector = vector - config.learning_rate * corrected / scaled
        vector[-groups:] = numpy.clip(vector[-groups:], *SCALE_LIMITS)

        value, gradient = objective(vector)
        if numpy.isfinite(value) and value < best_value:
            improvement = (best_value - value) / max(abs(best_value), 1e-12)
            best_value = value
            best = vector.copy()
            stalled = stalled + 1 if improvement < config.tolerance else 0
        else:
            stalled += 1
        trace.append(best_value)
        if stalled >= config.patience:
            converged = True
            break

    return best, best_value, iteration, converged, trace


def fit_reference(
    observations: ObservationSequence,
    scene: Union[SdfGrid, SceneGeometry],
    init: Union[ReferenceMotion, OptVariables] = None,
    model: CharacterModel = None,
    config: KinematicConfig = None,
) -> KinematicFit:
    """
    run the four weighted stages from coarse to fine, each continuing from the best iterate of the previous one

    :param observations: 2D keypoints
    :param scene: baked distance field, or scene geometry baked around the initial root trajectory
    :param init: initial motion or variables, defaults to the rest pose at the origin
    :param model: unit-scale character model
    :param config: optimizer settings
    :return: fitted motion, variables, per-stage report and whether every stage converged
    """

    if model is None:
        model = build_character()
    if config is None:
        config = KinematicConfig()
    observations.check_model(model)

    if init is None:
        variables = initial_variables(model, observations)
    elif isinstance(init, ReferenceMotion):
        variables = OptVariables.from_motion(init)
    else:
        variables = init
    if variables.frames != len(observations):
        raise ValueError(
            f'initial motion has "{variables.frames}" frames for "{len(observations)}" observed frames'
        )

    grid = scene if isinstance(scene, SdfGrid) else _bake_around(scene, variables, config)
    frames = variables.frames
    vector = variables.as_vector()
    trainable = numpy.ones(vector.shape, dtype=bool)
    if not config.estimate_scale:
        trainable[-len(BONE_GROUPS):] = False

    records = []
    converged = True
    for stage, row in STAGE_WEIGHTS.iterrows():
        weights = row.to_dict()
        if not config.interaction:
            weights["interaction"] = 0.0

        def objective(values: numpy.ndarray) -> Tuple[float, numpy.ndarray]:
            value, gradient = stage_objective(
                OptVariables.from_vector(values, frames),
                observations,
                grid,
                weights,
                model,
                config.gm_scale,
            )
            return value, gradient.as_vector()

        logging.info(f'kinematic stage "{stage}" started')
        vector, value, iterations, stage_converged, trace = _adam_stage(
            objective, vector, config, trainable
        )
        if not stage_converged:
            warnings.warn(
                f'kinematic stage "{stage}" did not converge within "{config.iterations}" iterations; keeping the best iterate'
            )
        converged = converged and stage_converged
        logging.info(
            f'kinematic stage "{stage}" finished after "{iterations}" iterations with loss "{value:.6g}"'
        )
        records.append(
            {
                "stage": stage,
                "iterations": iterations,
                "loss": value,
                "initial_loss": trace[0],
                "converged": stage_converged,
            }
        )

    variables = OptVariables.from_vector(vector, frames)
    motion = ReferenceMotion(
        observations.timestamps,
        variables.poses,
        frame_rate=observations.frame_rate,
        scale=SkeletonScale.from_array(variables.scale),
    )
    return KinematicFit(
        motion=motion,
        variables=variables,
        stages=pandas.DataFrame.from_records(records).set_index("stage"),
        converged=converged,
    )


def optimize_reference(
    observations: ObservationSequence,
    scene: Union[SdfGrid, SceneGeometry],
    init: Union[ReferenceMotion, OptVariables] = None,
    model: CharacterModel = None,
    config: KinematicConfig = None,
    interaction: bool = None,
) -> ReferenceMotion:
    """
    estimate the reference motion from 2D observations in a known scene

    :param observations: 2D keypoints
    :param scene: baked distance field or scene geometry
    :param init: initial motion or variables
    :param model: unit-scale character model
    :param config: optimizer settings
    :param interaction: override of ``config.interaction``; false zeroes the foot-to-scene weight
    :return: reference motion with the estimated skeleton scale
    """

    if config is None:
        config = KinematicConfig()
    if interaction is not None:
        config = KinematicConfig(**{**config.__dict__, "interaction": interaction})
    return fit_reference(observations, scene, init, model, config).motion
