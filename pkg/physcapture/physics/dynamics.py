"""
reduced-coordinate rigid-body dynamics of a floating-base character with spherical and fixed joints

spatial vectors are 6-vectors ``[angular; linear]`` expressed in link coordinates at the link origin; the root spatial
velocity is ``[omega_root; R_root^T v_root]``, which maps onto the velocity coordinates
``[v_root (world), omega_root (root frame), joint rates]`` through a block permutation and rotation
"""

from typing import NamedTuple
from typing import Tuple
from typing import Union

import numpy

from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import CharacterState
from physcapture.character.skeleton import link_transforms
from physcapture.character.skeleton import TreeKinematics
from physcapture.utilities import as_batch
from physcapture.utilities import skew

STANDARD_GRAVITY = 9.81


class SpatialTree(NamedTuple):
    """tree kinematics together with the parent-to-child spatial transforms"""

    kinematics: TreeKinematics
    transforms: numpy.ndarray

    @property
    def batch_size(self) -> int:
        return self.kinematics.batch_size


def spatial_tree(model: CharacterModel, pose: numpy.ndarray) -> SpatialTree:
    """
    :param model: character model
    :param pose: poses ``(B, dof)``
    :return: kinematics and motion transforms ``X`` of shape ``(B, bodies, 6, 6)`` mapping parent to child coordinates
    """

    kinematics = link_transforms(model, pose)
    batch_size = kinematics.batch_size
    transposed = numpy.swapaxes(kinematics.local_rotations, -1, -2)
    transforms = numpy.zeros((batch_size, model.body_count, 6, 6))
    transforms[..., :3, :3] = transposed
    transforms[..., 3:, 3:] = transposed
    transforms[..., 3:, :3] = -transposed @ skew(kinematics.offsets)
    return SpatialTree(kinematics, transforms)


def motion_cross(velocity: numpy.ndarray, motion: numpy.ndarray) -> numpy.ndarray:
    """spatial cross product ``v x m`` of motion vectors"""

    angular, linear = velocity[..., :3], velocity[..., 3:]
    return numpy.concatenate(
        [
            numpy.cross(angular, motion[..., :3]),
            numpy.cross(angular, motion[..., 3:]) + numpy.cross(linear, motion[..., :3]),
        ],
        axis=-1,
    )


def force_cross(velocity: numpy.ndarray, force: numpy.ndarray) -> numpy.ndarray:
    """spatial cross product ``v x* f`` of a motion and a force vector"""

    angular, linear = velocity[..., :3], velocity[..., 3:]
    return numpy.concatenate(
        [
            numpy.cross(angular, force[..., :3]) + numpy.cross(linear, force[..., 3:]),
            numpy.cross(angular, force[..., 3:]),
        ],
        axis=-1,
    )


def _apply(matrices: numpy.ndarray, vectors: numpy.ndarray) -> numpy.ndarray:
    return (matrices @ vectors[..., None])[..., 0]


def _apply_transposed(matrices: numpy.ndarray, vectors: numpy.ndarray) -> numpy.ndarray:
    return (numpy.swapaxes(matrices, -1, -2) @ vectors[..., None])[..., 0]


def root_velocity_map(kinematics: TreeKinematics) -> numpy.ndarray:
    """
    :param kinematics: tree kinematics of the batch
    :return: ``(B, 6, 6)`` map from root velocity coordinates to the root spatial velocity
    """

    batch_size = kinematics.batch_size
    mapping = numpy.zeros((batch_size, 6, 6))
    mapping[:, :3, 3:] = numpy.eye(3)
    mapping[:, 3:, :3] = numpy.swapaxes(kinematics.rotations[:, 0], -1, -2)
    return mapping


def spatial_velocities(
    model: CharacterModel, tree: SpatialTree, velocity: numpy.ndarray
) -> numpy.ndarray:
    """
    :param model: character model
    :param tree: spatial tree of the batch
    :param velocity: velocities ``(B, dof)``
    :return: link spatial velocities ``(B, bodies, 6)`` in link coordinates
    """

    rotations = tree.kinematics.rotations
    velocities = numpy.empty((tree.batch_size, model.body_count, 6))
    velocities[:, 0, :3] = velocity[:, 3:6]
    velocities[:, 0, 3:] = _apply_transposed(rotations[:, 0], velocity[:, :3])
    for body in range(1, model.body_count):
        velocities[:, body] = _apply(
            tree.transforms[:, body], velocities[:, model.parents[body]]
        )
        if model.movable[body]:
            column = model.dof_index[body]
            velocities[:, body, :3] += velocity[:, column : column + 3]
    return velocities


def _gravity_acceleration(tree: SpatialTree, gravity: float) -> numpy.ndarray:
    acceleration = numpy.zeros((tree.batch_size, 6))
    acceleration[:, 3:] = _apply_transposed(
        tree.kinematics.rotations[:, 0], numpy.array([0.0, 0.0, -gravity])
    )
    return acceleration


def inverse_dynamics(
    model: CharacterModel,
    tree: SpatialTree,
    velocity: numpy.ndarray,
    acceleration: numpy.ndarray,
    gravity: float = STANDARD_GRAVITY,
    external_forces: numpy.ndarray = None,
) -> numpy.ndarray:
    """
    recursive Newton-Euler computation of the generalized forces producing the given accelerations

    :param model: character model
    :param tree: spatial tree of the batch
    :param velocity: velocities ``(B, dof)``
    :param acceleration: accelerations ``(B, dof)``
    :param gravity: gravitational acceleration along ``-z``
    :param external_forces: spatial forces on the links ``(B, bodies, 6)`` in link coordinates
    :return: generalized forces ``(B, dof)``
    """

    batch_size = tree.batch_size
    rotations = tree.kinematics.rotations
    velocities = spatial_velocities(model, tree, velocity)

    accelerations = numpy.empty((batch_size, model.body_count, 6))
    root_linear = _apply_transposed(rotations[:, 0], velocity[:, :3])
    accelerations[:, 0, :3] = acceleration[:, 3:6]
    accelerations[:, 0, 3:] = _apply_transposed(
        rotations[:, 0], acceleration[:, :3]
    ) - numpy.cross(velocity[:, 3:6], root_linear)
    accelerations[:, 0] -= _gravity_acceleration(tree, gravity)

    for body in range(1, model.body_count):
        accelerations[:, body] = _apply(
            tree.transforms[:, body], accelerations[:, model.parents[body]]
        )
        if model.movable[body]:
            column = model.dof_index[body]
            joint_motion = numpy.zeros((batch_size, 6))
            joint_motion[:, :3] = velocity[:, column : column + 3]
            accelerations[:, body, :3] += acceleration[:, column : column + 3]
            accelerations[:, body] += motion_cross(velocities[:, body], joint_motion)

    inertias = model.spatial_inertias[None]
    momenta = _apply(inertias, velocities)
    forces = _apply(inertias, accelerations) + force_cross(velocities, momenta)
    if external_forces is not None:
        forces = forces - external_forces

    generalized = numpy.zeros((batch_size, model.dof))
    for body in range(model.body_count - 1, 0, -1):
        if model.movable[body]:
            column = model.dof_index[body]
            generalized[:, column : column + 3] = forces[:, body, :3]
        forces[:, model.parents[body]] += _apply_transposed(
            tree.transforms[:, body], forces[:, body]
        )

    generalized[:, 0:3] = _apply(rotations[:, 0], forces[:, 0, 3:])
    generalized[:, 3:6] = forces[:, 0, :3]
    return generalized


def composite_mass_matrix(model: CharacterModel, tree: SpatialTree) -> numpy.ndarray:
    """
    composite-rigid-body computation of the joint-space inertia matrix in velocity coordinates

    :param model: character model
    :param tree: spatial tree of the batch
    :return: mass matrices ``(B, dof, dof)``
    """

    batch_size = tree.batch_size
    transforms = tree.transforms
    composite = numpy.broadcast_to(
        model.spatial_inertias, (batch_size,) + model.spatial_inertias.shape
    ).copy()
    for body in range(model.body_count - 1, 0, -1):
        transform = transforms[:, body]
        composite[:, model.parents[body]] += (
            numpy.swapaxes(transform, -1, -2) @ composite[:, body] @ transform
        )

    joint_subspace = numpy.zeros((6, 3))
    joint_subspace[:3, :3] = numpy.eye(3)
    root_map = root_velocity_map(tree.kinematics)

    def subspace(body: int) -> numpy.ndarray:
        return root_map if body == 0 else joint_subspace

    def columns(body: int) -> slice:
        start = model.dof_index[body]
        return slice(start, start + (6 if body == 0 else 3))

    matrix = numpy.zeros((batch_size, model.dof, model.dof))
    for body in [0] + model.movable_bodies.tolist():
        own = columns(body)
        force = composite[:, body] @ subspace(body)
        matrix[:, own, own] = numpy.swapaxes(subspace(body), -1, -2) @ force
        ancestor = body
        while model.parents[ancestor] >= 0:
            force = numpy.swapaxes(transforms[:, ancestor], -1, -2) @ force
            ancestor = model.parents[ancestor]
            if ancestor == 0 or model.movable[ancestor]:
                block = numpy.swapaxes(subspace(ancestor), -1, -2) @ force
                matrix[:, columns(ancestor), own] = block
                matrix[:, own, columns(ancestor)] = numpy.swapaxes(block, -1, -2)
    return matrix


def mass_matrix(model: CharacterModel, pose: numpy.ndarray) -> numpy.ndarray:
    """
    symmetric positive-definite joint-space inertia matrix

    :param model: character model
    :param pose: pose(s) ``(..., dof)``
    :return: matrix ``(..., dof, dof)``
    """

    pose, leading = as_batch(pose, model.dof)
    matrix = composite_mass_matrix(model, spatial_tree(model, pose))
    return matrix.reshape(leading + matrix.shape[1:])


def bias_forces(
    model: CharacterModel,
    pose: numpy.ndarray,
    velocity: numpy.ndarray,
    gravity: float = STANDARD_GRAVITY,
    external_forces: numpy.ndarray = None,
) -> numpy.ndarray:
    """
    Coriolis, centrifugal and gravity forces ``h(q, qdot)`` minus the generalized external forces

    :param model: character model
    :param pose: pose(s) ``(..., dof)``
    :param velocity: velocity(s) ``(..., dof)``
    :param gravity: gravitational acceleration along ``-z``
    :param external_forces: spatial forces on the links ``(..., bodies, 6)``
    :return: generalized forces ``(..., dof)``
    """

    pose, leading = as_batch(pose, model.dof)
    velocity, _ = as_batch(velocity, model.dof)
    if external_forces is not None:
        external_forces = numpy.asarray(external_forces, dtype=float).reshape(
            (-1, model.body_count, 6)
        )
    tree = spatial_tree(model, pose)
    forces = inverse_dynamics(
        model, tree, velocity, numpy.zeros(velocity.shape), gravity, external_forces
    )
    return forces.reshape(leading + (model.dof,))


def articulated_body_accelerations(
    model: CharacterModel,
    tree: SpatialTree,
    velocity: numpy.ndarray,
    torques: numpy.ndarray,
    gravity: float = STANDARD_GRAVITY,
    external_forces: numpy.ndarray = None,
    check_finite: bool = True,
) -> numpy.ndarray:
    """
    articulated-body recursion for the accelerations of a floating (or pinned) base tree

    :param model: character model
    :param tree: spatial tree of the batch
    :param velocity: velocities ``(B, dof)``
    :param torques: generalized forces ``(B, dof)``
    :param gravity: gravitational acceleration along ``-z``
    :param external_forces: spatial forces on the links ``(B, bodies, 6)`` in link coordinates
    :param check_finite: raise on non-finite accelerations instead of returning them
    :return: accelerations ``(B, dof)``
    """

    batch_size = tree.batch_size
    rotations = tree.kinematics.rotations
    transforms = tree.transforms
    velocities = spatial_velocities(model, tree, velocity)

    products = numpy.zeros((batch_size, model.body_count, 6))
    for body in model.movable_bodies:
        column = model.dof_index[body]
        joint_motion = numpy.zeros((batch_size, 6))
        joint_motion[:, :3] = velocity[:, column : column + 3]
        products[:, body] = motion_cross(velocities[:, body], joint_motion)

    inertias = numpy.broadcast_to(
        model.spatial_inertias, (batch_size,) + model.spatial_inertias.shape
    ).copy()
    biases = force_cross(velocities, _apply(inertias, velocities))
    if external_forces is not None:
        biases = biases - external_forces

    projected = {}
    for body in range(model.body_count - 1, 0, -1):
        inertia = inertias[:, body]
        if model.movable[body]:
            column = model.dof_index[body]
            coupling = inertia[:, :, :3]
            inverse = numpy.linalg.inv(inertia[:, :3, :3])
            residual = torques[:, column : column + 3] - biases[:, body, :3]
            inertia = inertia - coupling @ inverse @ numpy.swapaxes(coupling, -1, -2)
            bias = (
                biases[:, body]
                + _apply(inertia, products[:, body])
                + _apply(coupling @ inverse, residual)
            )
            projected[body] = (coupling, inverse, residual)
        else:
            bias = biases[:, body] + _apply(inertia, products[:, body])
        transform = transforms[:, body]
        parent = model.parents[body]
        inertias[:, parent] += numpy.swapaxes(transform, -1, -2) @ inertia @ transform
        biases[:, parent] += _apply_transposed(transform, bias)

    gravity_acceleration = _gravity_acceleration(tree, gravity)
    accelerations = numpy.empty((batch_size, model.body_count, 6))
    result = numpy.zeros((batch_size, model.dof))
    if model.fixed_base:
        accelerations[:, 0] = -gravity_acceleration
    else:
        root_force = numpy.concatenate(
            [torques[:, 3:6], _apply_transposed(rotations[:, 0], torques[:, :3])], axis=-1
        )
        accelerations[:, 0] = numpy.linalg.solve(
            inertias[:, 0], (root_force - biases[:, 0])[..., None]
        )[..., 0]
        absolute = accelerations[:, 0] + gravity_acceleration
        root_linear = _apply_transposed(rotations[:, 0], velocity[:, :3])
        result[:, 3:6] = absolute[:, :3]
        result[:, 0:3] = _apply(
            rotations[:, 0], absolute[:, 3:] + numpy.cross(velocity[:, 3:6], root_linear)
        )

    for body in range(1, model.body_count):
        accelerations[:, body] = (
            _apply(transforms[:, body], accelerations[:, model.parents[body]])
            + products[:, body]
        )
        if model.movable[body]:
            coupling, inverse, residual = projected[body]
            column = model.dof_index[body]
            joint_acceleration = _apply(
                inverse, residual - _apply_transposed(coupling, accelerations[:, body])
            )
            result[:, column : column + 3] = joint_acceleration
            accelerations[:, body, :3] += joint_acceleration

    if check_finite and not numpy.all(numpy.isfinite(result)):
        raise numpy.linalg.LinAlgError("non-finite accelerations from articulated-body recursion")
    return result


def _state_arrays(
    model: CharacterModel,
    state: Union[CharacterState, Tuple[numpy.ndarray, numpy.ndarray]],
) -> Tuple[numpy.ndarray, numpy.ndarray, tuple]:
    if isinstance(state, CharacterState):
        pose, velocity = state.q, state.qdot
    else:
        pose, velocity = state
    pose, leading = as_batch(pose, model.dof)
    velocity, _ = as_batch(velocity, model.dof)
    return pose, velocity, leading


def _check_root_torques(model: CharacterModel, torques: numpy.ndarray):
    if not model.fixed_base and numpy.any(torques[:, :6] != 0):
        raise ValueError("root coordinates are unactuated; torques must be zero there")


def forward_dynamics(
    model: CharacterModel,
    state: Union[CharacterState, Tuple[numpy.ndarray, numpy.ndarray]],
    torques: numpy.ndarray,
    external_contacts: numpy.ndarray = None,
    gravity: float = STANDARD_GRAVITY,
) -> numpy.ndarray:
    """
    accelerations solving ``M qddot = tau - h + J^T f`` by the articulated-body recursion

    :param model: character model
    :param state: state, or pose and velocity arrays ``(..., dof)``
    :param torques: generalized forces ``(..., dof)``, zero on the root coordinates
    :param external_contacts: spatial contact forces on the links ``(..., bodies, 6)`` in link coordinates
    :param gravity: gravitational acceleration along ``-z``
    :return: accelerations ``(..., dof)``
    """

    pose, velocity, leading = _state_arrays(model, state)
    torques, _ = as_batch(torques, model.dof)
    torques = numpy.broadcast_to(torques, pose.shape)
    _check_root_torques(model, torques)
    if external_contacts is not None:
        external_contacts = numpy.broadcast_to(
            numpy.asarray(external_contacts, dtype=float).reshape((-1, model.body_count, 6)),
            (len(pose), model.body_count, 6),
        )
    tree = spatial_tree(model, pose)
    accelerations = articulated_body_accelerations(
        model, tree, velocity, torques, gravity, external_contacts
    )
    return accelerations.reshape(leading + (model.dof,))


def forward_dynamics_dense(
    model: CharacterModel,
    state: Union[CharacterState, Tuple[numpy.ndarray, numpy.ndarray]],
    torques: numpy.ndarray,
    external_contacts: numpy.ndarray = None,
    gravity: float = STANDARD_GRAVITY,
) -> numpy.ndarray:
    """
    dense solve ``M^-1 (tau - h)`` with the composite-rigid-body mass matrix and Newton-Euler bias forces

    :param model: character model
    :param state: state, or pose and velocity arrays ``(..., dof)``
    :param torques: generalized forces ``(..., dof)``
    :param external_contacts: spatial contact forces on the links ``(..., bodies, 6)``
    :param gravity: gravitational acceleration along ``-z``
    :return: accelerations ``(..., dof)``
    """

    pose, velocity, leading = _state_arrays(model, state)
    torques, _ = as_batch(torques, model.dof)
    torques = numpy.broadcast_to(torques, pose.shape)
    if external_contacts is not None:
        external_contacts = numpy.broadcast_to(
            numpy.asarray(external_contacts, dtype=float).reshape((-1, model.body_count, 6)),
            (len(pose), model.body_count, 6),
        )
    tree = spatial_tree(model, pose)
    matrix = composite_mass_matrix(model, tree)
    bias = inverse_dynamics(
        model, tree, velocity, numpy.zeros(velocity.shape), gravity, external_contacts
    )
    free = slice(6 if model.fixed_base else 0, model.dof)
    accelerations = numpy.zeros(pose.shape)
    accelerations[:, free] = numpy.linalg.solve(
        matrix[:, free, free], (torques - bias)[:, free, None]
    )[..., 0]
    return accelerations.reshape(leading + (model.dof,))


def point_forces_to_spatial(
    model: CharacterModel,
    kinematics: TreeKinematics,
    links: numpy.ndarray,
    points: numpy.ndarray,
    forces: numpy.ndarray,
) -> numpy.ndarray:
    """
    accumulate world forces applied at world points into link spatial forces

    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param links: body index per point ``(P,)``
    :param points: world application points ``(B, P, 3)``
    :param forces: world forces ``(B, P, 3)``
    :return: spatial forces ``(B, bodies, 6)`` in link coordinates
    """

    links = numpy.asarray(links)
    rotations = kinematics.rotations[:, links]
    lever = _apply_transposed(rotations, points - kinematics.origins[:, links])
    local_force = _apply_transposed(rotations, forces)
    spatial = numpy.concatenate([numpy.cross(lever, local_force), local_force], axis=-1)

    result = numpy.zeros((kinematics.batch_size, model.body_count, 6))
    for index, link in enumerate(links):
        result[:, link] += spatial[:, index]
    return result


def kinetic_energy(
    model: CharacterModel, pose: numpy.ndarray, velocity: numpy.ndarray
) -> numpy.ndarray:
    """
    :param model: character model
    :param pose: pose(s) ``(..., dof)``
    :param velocity: velocity(s) ``(..., dof)``
    :return: ``0.5 qdot^T M qdot``
    """

    pose, leading = as_batch(pose, model.dof)
    velocity, _ = as_batch(velocity, model.dof)
    matrix = composite_mass_matrix(model, spatial_tree(model, pose))
    energy = 0.5 * (velocity[:, None, :] @ matrix @ velocity[:, :, None])[:, 0, 0]
    return energy.reshape(leading)
