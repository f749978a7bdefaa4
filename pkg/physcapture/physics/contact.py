"""
contact detection against the scene and a projected sequential-impulse (Gauss-Seidel) solver at the velocity level

every link carries sphere-swept contact candidates (see ``Geometry.contact_candidates``); a candidate is active when
its signed distance to the scene is below the speculative margin, and each active contact contributes one normal row,
two tangential friction rows and two rolling-resistance rows
"""

from dataclasses import dataclass
from typing import List
from typing import NamedTuple
from typing import Tuple

import numpy

from physcapture.character.skeleton import angular_jacobian
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import point_jacobian
from physcapture.character.skeleton import TreeKinematics
from physcapture.physics.scene import SceneGeometry

ROWS_PER_CONTACT = 5


@dataclass(frozen=True)
class ContactPoint:
    position: numpy.ndarray
    normal: numpy.ndarray
    penetration_depth: float
    link_index: int

    def __post_init__(self):
        normal = numpy.asarray(self.normal, dtype=float)
        length = numpy.linalg.norm(normal)
        if not length > 0:
            raise ValueError(f'contact normal "{normal.tolist()}" has zero length')
        if self.penetration_depth < 0:
            raise ValueError(
                f'penetration depth must be non-negative, not "{self.penetration_depth}"'
            )
        object.__setattr__(self, "position", numpy.asarray(self.position, dtype=float))
        object.__setattr__(self, "normal", normal / length)


class ContactSet(NamedTuple):
    """
    active contacts of a batch, compacted to the largest count ``K`` of any world; unused slots have ``active`` false
    """

    links: numpy.ndarray
    points: numpy.ndarray
    normals: numpy.ndarray
    distances: numpy.ndarray
    radii: numpy.ndarray
    active: numpy.ndarray

    @property
    def count(self) -> int:
        return self.active.shape[1]

    def contact_points(self, index: int = 0) -> List[ContactPoint]:
        """
        :param index: world index in the batch
        :return: touching contacts (non-positive distance) of one world
        """

        touching = numpy.flatnonzero(self.active[index] & (self.distances[index] <= 0))
        return [
            ContactPoint(
                position=self.points[index, contact],
                normal=self.normals[index, contact],
                penetration_depth=float(-self.distances[index, contact]),
                link_index=int(self.links[index, contact]),
            )
            for contact in touching
        ]


class ContactImpulses(NamedTuple):
    """accumulated impulses per contact slot, in N s (rolling in N m s)"""

    normal: numpy.ndarray
    tangent: numpy.ndarray
    rolling: numpy.ndarray


def tangent_basis(normals: numpy.ndarray) -> numpy.ndarray:
    """
    :param normals: unit normals ``(..., 3)``
    :return: orthonormal tangents ``(..., 2, 3)``
    """

    helper = numpy.where(
        numpy.abs(normals[..., :1]) < 0.9,
        numpy.array([1.0, 0.0, 0.0]),
        numpy.array([0.0, 1.0, 0.0]),
    )
    first = numpy.cross(normals, helper)
    first /= numpy.linalg.norm(first, axis=-1, keepdims=True)
    second = numpy.cross(normals, first)
    return numpy.stack([first, second], axis=-2)


def detect_contacts(
    model: CharacterModel,
    kinematics: TreeKinematics,
    scene: SceneGeometry,
    margin: float = 0.0,
) -> ContactSet:
    """
    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param scene: scene geometry
    :param margin: speculative distance below which a candidate becomes a contact
    :return: compacted contact set
    """

    batch_size = kinematics.batch_size
    centers = kinematics.points(model.contact_links, model.contact_centers)
    distances, gradients = scene.sdf_and_gradient(centers)
    radii = numpy.broadcast_to(model.contact_radii, distances.shape)
    distances = distances - radii
    lengths = numpy.linalg.norm(gradients, axis=-1, keepdims=True)
    normals = numpy.where(
        lengths > 0, gradients / numpy.where(lengths > 0, lengths, 1.0), [0.0, 0.0, 1.0]
    )
    active = distances < margin

    count = int(active.sum(axis=1).max()) if batch_size > 0 else 0
    order = numpy.argsort(~active, axis=1, kind="stable")[:, :count]
    links = numpy.broadcast_to(model.contact_links, active.shape)

    def take(values: numpy.ndarray) -> numpy.ndarray:
        if values.ndim == 3:
            return numpy.take_along_axis(values, order[..., None], axis=1)
        return numpy.take_along_axis(values, order, axis=1)

    taken_centers = take(centers)
    taken_normals = take(normals)
    taken_radii = take(radii)
    return ContactSet(
        links=take(links),
        points=taken_centers - taken_normals * taken_radii[..., None],
        normals=taken_normals,
        distances=take(distances),
        radii=taken_radii,
        active=take(active),
    )


def contact_jacobian(
    model: CharacterModel, kinematics: TreeKinematics, contacts: ContactSet
) -> numpy.ndarray:
    """
    rows ``[normal, tangent 1, tangent 2, rolling 1, rolling 2]`` per contact; inactive slots are zero

    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param contacts: contact set
    :return: Jacobian ``(B, 5 K, dof)``
    """

    batch_size = kinematics.batch_size
    linear = point_jacobian(model, kinematics, contacts.links, contacts.points)
    angular = angular_jacobian(model, kinematics, contacts.links)
    tangents = tangent_basis(contacts.normals)

    rows = numpy.empty((batch_size, contacts.count, ROWS_PER_CONTACT, model.dof))
    rows[:, :, 0] = (contacts.normals[..., None, :] @ linear)[..., 0, :]
    rows[:, :, 1:3] = tangents @ linear
    rows[:, :, 3:5] = tangents @ angular
    rows *= contacts.active[..., None, None]
    if model.fixed_base:
        rows[..., :6] = 0.0
    return rows.reshape(batch_size, -1, model.dof)


def solve_contacts(
    model: CharacterModel,
    kinematics: TreeKinematics,
    matrix: numpy.ndarray,
    velocity: numpy.ndarray,
    contacts: ContactSet,
    timestep: float,
    iterations: int = 10,
    friction: float = 0.9,
    rolling_friction: float = 0.3,
    restitution: float = 0.0,
    baumgarte: float = 0.2,
    slop: float = 0.001,
    initial_velocity: numpy.ndarray = None,
) -> Tuple[numpy.ndarray, ContactImpulses]:
    """
    projected Gauss-Seidel sweeps over the contact rows of the Delassus operator ``A = J M^-1 J^T``

    normal impulses are clamped to be non-negative, the tangential impulse pair is projected onto the Coulomb disc
    ``mu lambda_n`` and the rolling pair onto ``mu_r r lambda_n`` for a candidate of radius ``r``; the normal rows
    target a velocity that closes the speculative gap within one step and removes penetration beyond the slop with a
    Baumgarte factor

    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param matrix: mass matrices ``(B, dof, dof)``
    :param velocity: unconstrained velocities ``(B, dof)``
    :param contacts: contact set
    :param timestep: substep length in seconds
    :param iterations: Gauss-Seidel sweeps
    :param friction: Coulomb coefficient
    :param rolling_friction: rolling resistance coefficient
    :param restitution: restitution coefficient
    :param baumgarte: positional error correction factor
    :param slop: tolerated penetration in meters
    :param initial_velocity: velocities before the substep, for restitution
    :return: constrained velocities and the accumulated impulses
    """

    batch_size, count = contacts.active.shape
    impulses = ContactImpulses(
        normal=numpy.zeros((batch_size, count)),
        tangent=numpy.zeros((batch_size, count, 2)),
        rolling=numpy.zeros((batch_size, count, 2)),
    )
    if count == 0:
        return velocity, impulses

    jacobian = contact_jacobian(model, kinematics, contacts)
    transposed = numpy.swapaxes(jacobian, -1, -2)
    response = numpy.zeros(transposed.shape)
    free = slice(6 if model.fixed_base else 0, model.dof)
    response[:, free] = numpy.linalg.solve(matrix[:, free, free], transposed[:, free])
    delassus = jacobian @ response
    diagonal = numpy.diagonal(delassus, axis1=-2, axis2=-1)
    diagonal = numpy.where(diagonal > 1e-12, diagonal, numpy.inf)

    current = (jacobian @ velocity[..., None])[..., 0]
    distances = contacts.distances
    target = numpy.where(
        distances > 0,
        -distances / timestep,
        baumgarte * numpy.maximum(-distances - slop, 0.0) / timestep,
    )
    if restitution > 0 and initial_velocity is not None:
        approach = (jacobian[:, ::ROWS_PER_CONTACT] @ initial_velocity[..., None])[..., 0]
        target = numpy.maximum(target, -restitution * numpy.minimum(approach, 0.0))

    accumulated = numpy.zeros(current.shape)
    rolling_radii = rolling_friction * contacts.radii

    def apply(row: int, change: numpy.ndarray):
        accumulated[:, row] += change
        current[:] += delassus[:, :, row] * change[:, None]

    for _ in range(iterations):
        for contact in range(count):
            row = ROWS_PER_CONTACT * contact
            normal = numpy.maximum(
                accumulated[:, row] + (target[:, contact] - current[:, row]) / diagonal[:, row],
                0.0,
            )
            apply(row, normal - accumulated[:, row])

            for first, limit in (
                (row + 1, friction * normal),
                (row + 3, rolling_radii[:, contact] * normal),
            ):
                pair = slice(first, first + 2)
                proposal = accumulated[:, pair] - current[:, pair] / diagonal[:, pair]
                magnitude = numpy.linalg.norm(proposal, axis=-1)
                factor = numpy.where(
                    magnitude > limit, limit / numpy.where(magnitude > 0, magnitude, 1.0), 1.0
                )
                proposal = proposal * factor[:, None]
                for offset in range(2):
                    apply(first + offset, proposal[:, offset] - accumulated[:, first + offset])

    constrained = velocity + (response @ accumulated[..., None])[..., 0]
    accumulated = accumulated.reshape(batch_size, count, ROWS_PER_CONTACT)
    return constrained, ContactImpulses(
        normal=accumulated[..., 0],
        tangent=accumulated[..., 1:3],
        rolling=accumulated[..., 3:5],
    )
