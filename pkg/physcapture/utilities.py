from typing import Iterable
from typing import Tuple

import numpy
from scipy.spatial.transform import Rotation

ROOT_DOF = 6


def skew(vectors: numpy.ndarray) -> numpy.ndarray:
    """
    cross-product matrices of the given 3-vectors

    :param vectors: array of shape ``(..., 3)``
    :return: array of shape ``(..., 3, 3)``
    """

    vectors = numpy.asarray(vectors, dtype=float)
    matrices = numpy.zeros(vectors.shape + (3,), dtype=float)
    matrices[..., 0, 1] = -vectors[..., 2]
    matrices[..., 0, 2] = vectors[..., 1]
    matrices[..., 1, 0] = vectors[..., 2]
    matrices[..., 1, 2] = -vectors[..., 0]
    matrices[..., 2, 0] = -vectors[..., 1]
    matrices[..., 2, 1] = vectors[..., 0]
    return matrices


def rotation_matrices(rotation_vectors: numpy.ndarray) -> numpy.ndarray:
    """
    exponential map from axis-angle vectors to rotation matrices

    :param rotation_vectors: array of shape ``(..., 3)``
    :return: array of shape ``(..., 3, 3)``

    >>> rotation_matrices([0, 0, 0])
    array([[1., 0., 0.],
           [0., 1., 0.],
           [0., 0., 1.]])
    """

    # scipy rejects read-only buffers
    rotation_vectors = numpy.array(rotation_vectors, dtype=float)
    shape = rotation_vectors.shape[:-1]
    flat = rotation_vectors.reshape(-1, 3)
    if len(flat) == 0:
        return numpy.zeros(shape + (3, 3))
    return Rotation.from_rotvec(flat).as_matrix().reshape(shape + (3, 3))


def rotation_vectors(matrices: numpy.ndarray) -> numpy.ndarray:
    """
    logarithmic map from rotation matrices to axis-angle vectors with angle in ``[0, pi]``

    :param matrices: array of shape ``(..., 3, 3)``
    :return: array of shape ``(..., 3)``
    """

    matrices = numpy.array(matrices, dtype=float)
    shape = matrices.shape[:-2]
    flat = matrices.reshape(-1, 3, 3)
    if len(flat) == 0:
        return numpy.zeros(shape + (3,))
    return Rotation.from_matrix(flat).as_rotvec().reshape(shape + (3,))


def right_jacobian(rotation_vectors: numpy.ndarray) -> numpy.ndarray:
    """
    right Jacobian of the rotation group, mapping a change of axis-angle coordinates to the body-frame rotation increment,
    ``R(theta + d) ~ R(theta) exp(J_r(theta) d)``

    :param rotation_vectors: array of shape ``(..., 3)``
    :return: array of shape ``(..., 3, 3)``
    """

    rotation_vectors = numpy.asarray(rotation_vectors, dtype=float)
    angles = numpy.linalg.norm(rotation_vectors, axis=-1)[..., None, None]
    small = angles < 1e-6
    safe = numpy.where(small, 1.0, angles)
    first = numpy.where(
        small, 0.5 - angles**2 / 24, (1 - numpy.cos(safe)) / safe**2
    )
    second = numpy.where(
        small, 1 / 6 - angles**2 / 120, (safe - numpy.sin(safe)) / safe**3
    )
    cross = skew(rotation_vectors)
    identity = numpy.broadcast_to(numpy.eye(3), cross.shape)
    return identity - first * cross + second * (cross @ cross)


def relative_rotation_vectors(a: numpy.ndarray, b: numpy.ndarray) -> numpy.ndarray:
    """
    axis-angle of ``R_b^-1 R_a`` for each pair of axis-angle blocks

    :param a: array of shape ``(..., 3)``
    :param b: array of shape ``(..., 3)``
    :return: array of shape ``(..., 3)``
    """

    a_matrices = rotation_matrices(a)
    b_matrices = rotation_matrices(b)
    return rotation_vectors(numpy.swapaxes(b_matrices, -1, -2) @ a_matrices)


def pose_difference(a: numpy.ndarray, b: numpy.ndarray) -> numpy.ndarray:
    """
    tangent-space difference ``a - b`` of two pose vectors laid out as
    ``[translation (3), rotation (3), joint rotations (3 each)]``;
    the translation part is subtracted componentwise and each rotation part is the axis-angle of ``R_b^-1 R_a``

    :param a: pose vector(s) of shape ``(..., 6 + 3k)``
    :param b: pose vector(s) of the same shape
    :return: tangent vector(s) of the same shape

    >>> pose_difference(numpy.zeros(9), numpy.zeros(9))
    array([0., 0., 0., 0., 0., 0., 0., 0., 0.])
    """

    a = numpy.asarray(a, dtype=float)
    b = numpy.asarray(b, dtype=float)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f'pose dimensions differ ("{a.shape[-1]}" != "{b.shape[-1]}")'
        )
    a, b = numpy.broadcast_arrays(a, b)

    difference = numpy.empty(a.shape, dtype=float)
    difference[..., :3] = a[..., :3] - b[..., :3]
    difference[..., 3:] = rotation_difference(a[..., 3:], b[..., 3:])
    return difference


def rotation_difference(a: numpy.ndarray, b: numpy.ndarray) -> numpy.ndarray:
    """
    blockwise relative rotation of two vectors made only of axis-angle blocks (for instance target poses)

    :param a: array of shape ``(..., 3k)``
    :param b: array of shape ``(..., 3k)``
    :return: array of shape ``(..., 3k)``
    """

    a = numpy.asarray(a, dtype=float)
    b = numpy.asarray(b, dtype=float)
    if a.shape[-1] % 3 != 0:
        raise ValueError(f'rotation vector length "{a.shape[-1]}" is not a multiple of 3')
    a, b = numpy.broadcast_arrays(a, b)
    blocks = a.shape[:-1] + (a.shape[-1] // 3, 3)
    return relative_rotation_vectors(a.reshape(blocks), b.reshape(blocks)).reshape(
        a.shape
    )


def interpolate_pose(a: numpy.ndarray, b: numpy.ndarray, fraction: float) -> numpy.ndarray:
    """
    interpolate between two pose vectors; translation linearly and every rotation block along the geodesic
    ``R_a exp(s log(R_a^-1 R_b))``

    :param a: pose at ``fraction = 0``
    :param b: pose at ``fraction = 1``
    :param fraction: interpolation parameter in ``[0, 1]``
    :return: interpolated pose
    """

    a = numpy.asarray(a, dtype=float)
    b = numpy.asarray(b, dtype=float)
    return integrate_pose(a, fraction * pose_difference(b, a))


def integrate_pose(pose: numpy.ndarray, tangent: numpy.ndarray) -> numpy.ndarray:
    """
    retract a tangent step onto a pose; translation is added and each rotation block is right-multiplied by
    ``exp(step)``

    :param pose: pose vector(s) of shape ``(..., 6 + 3k)``
    :param tangent: tangent vector(s) of the same shape
    :return: updated pose vector(s)
    """

    pose = numpy.asarray(pose, dtype=float)
    tangent = numpy.asarray(tangent, dtype=float)
    pose, tangent = numpy.broadcast_arrays(pose, tangent)

    blocks = pose.shape[:-1] + ((pose.shape[-1] - 3) // 3, 3)
    rotations = rotation_matrices(pose[..., 3:].reshape(blocks)) @ rotation_matrices(
        tangent[..., 3:].reshape(blocks)
    )

    updated = numpy.empty(pose.shape, dtype=float)
    updated[..., :3] = pose[..., :3] + tangent[..., :3]
    updated[..., 3:] = rotation_vectors(rotations).reshape(pose.shape[:-1] + (-1,))
    return updated


def as_batch(values: numpy.ndarray, width: int = None) -> Tuple[numpy.ndarray, tuple]:
    """
    flatten leading dimensions into a single batch dimension

    :param values: array of shape ``(..., width)``
    :param width: expected trailing dimension
    :return: array of shape ``(batch, width)`` and the original leading shape
    """

    values = numpy.asarray(values, dtype=float)
    if width is not None and values.shape[-1] != width:
        raise ValueError(
            f'expected trailing dimension "{width}", not "{values.shape[-1]}"'
        )
    leading = values.shape[:-1]
    return values.reshape((-1, values.shape[-1])), leading


def sample_generator(seed: int, *keys: Iterable[int]) -> numpy.random.Generator:
    """
    independent random generator derived from a base seed and integer keys (for instance frame and sample index),
    so that draws do not depend on evaluation order or thread count

    :param seed: base seed
    :param keys: integer keys
    :return: random generator
    """

    return numpy.random.default_rng([int(seed)] + [int(key) for key in keys])
