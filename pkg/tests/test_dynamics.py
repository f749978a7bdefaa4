import numpy
import pytest

from physcapture.character import build_character
from physcapture.character import CharacterModel
from physcapture.character import CharacterState
from physcapture.character import forward_kinematics
from physcapture.character import Geometry
from physcapture.character import JointSpec
from physcapture.character.skeleton import link_transforms
from physcapture.physics import forward_dynamics
from physcapture.physics import mass_matrix
from physcapture.physics import SimWorld
from physcapture.physics import step
from physcapture.physics.dynamics import bias_forces
from physcapture.physics.dynamics import forward_dynamics_dense
from physcapture.physics.dynamics import kinetic_energy
from physcapture.physics.dynamics import point_forces_to_spatial
from physcapture.utilities import integrate_pose
from physcapture.utilities import rotation_matrices


@pytest.fixture(scope="module")
def character() -> CharacterModel:
    return build_character()


def random_state(model: CharacterModel, seed: int):
    rng = numpy.random.default_rng(seed)
    pose = rng.normal(scale=0.4, size=model.dof)
    pose[2] += 1.0
    velocity = rng.normal(scale=0.5, size=model.dof)
    return pose, velocity


def box_model() -> CharacterModel:
    root = JointSpec(
        "box",
        "free",
        Geometry("box", (0.2, 0.3, 0.1)),
        mass=2.0,
        inertia=((0.02, 0, 0), (0, 0.01, 0), (0, 0, 0.025)),
    )
    tag = JointSpec(
        "tag", "fixed", Geometry("sphere", (0.01,)), mass=1.0, local_offset=(0.0, 0.0, 0.05)
    )
    return CharacterModel.from_joints([tag], root)


def test_mass_matrix_box():
    model = box_model()
    pose = numpy.zeros(model.dof)
    pose[3:6] = [0.3, -0.2, 0.7]

    matrix = mass_matrix(model, pose)

    assert model.dof == 6
    assert numpy.allclose(matrix[:3, :3], 3.0 * numpy.eye(3))


def test_mass_matrix_character(character):
    pose, _ = random_state(character, 0)

    matrix = mass_matrix(character, pose)

    assert matrix.shape == (57, 57)
    assert numpy.abs(matrix - matrix.T).max() < 1e-10
    numpy.linalg.cholesky(matrix)
    assert numpy.allclose(matrix[:3, :3], character.total_mass * numpy.eye(3))


def test_kinetic_energy(character):
    pose = character.rest_pose()
    velocity = numpy.zeros(57)
    velocity[:3] = [1.0, -2.0, 0.5]

    assert numpy.isclose(
        kinetic_energy(character, pose, velocity), 0.5 * character.total_mass * 5.25
    )


def test_free_fall(character):
    pose = character.rest_pose(height=2.0)

    acceleration = forward_dynamics(
        character, CharacterState(pose, numpy.zeros(57)), numpy.zeros(57)
    )

    assert numpy.allclose(acceleration[:3], [0, 0, -9.81])
    assert numpy.allclose(acceleration[3:], 0, atol=1e-10)


def test_forward_dynamics_dense(character):
    rng = numpy.random.default_rng(1)
    for seed in range(3):
        pose, velocity = random_state(character, seed)
        torques = numpy.zeros(57)
        torques[6:] = rng.normal(scale=20.0, size=51)

        recursive = forward_dynamics(character, (pose, velocity), torques)
        dense = forward_dynamics_dense(character, (pose, velocity), torques)

        assert numpy.linalg.norm(recursive - dense) <= 1e-8 * numpy.linalg.norm(dense)


def test_forward_dynamics_batch(character):
    poses, velocities = zip(*(random_state(character, seed) for seed in range(4)))
    poses = numpy.stack(poses)
    velocities = numpy.stack(velocities)

    batched = forward_dynamics(character, (poses, velocities), numpy.zeros(57))

    assert batched.shape == (4, 57)
    assert numpy.allclose(
        batched[2], forward_dynamics(character, (poses[2], velocities[2]), numpy.zeros(57))
    )


def test_external_forces(character):
    pose, velocity = random_state(character, 2)
    kinematics = link_transforms(character, pose)
    body = character.names.index("left_ankle")
    point = kinematics.origins[:, [body]]
    force = numpy.array([[[0.0, 0.0, 200.0]]])

    spatial = point_forces_to_spatial(character, kinematics, [body], point, force)

    pushed = forward_dynamics(character, (pose, velocity), numpy.zeros(57), spatial)
    dense = forward_dynamics_dense(character, (pose, velocity), numpy.zeros(57), spatial)
    free = forward_dynamics(character, (pose, velocity), numpy.zeros(57))

    assert numpy.allclose(pushed, dense, atol=1e-8)
    # the center of mass feels the full push
    momentum_rate = (mass_matrix(character, pose) @ (pushed - free))[:3]
    assert numpy.allclose(momentum_rate, [0, 0, 200.0])


def test_momentum_conservation(character):
    pose, velocity = random_state(character, 3)
    step = 1e-5

    def momenta(q: numpy.ndarray, qdot: numpy.ndarray):
        generalized = mass_matrix(character, q) @ qdot
        linear = generalized[:3]
        angular = rotation_matrices(q[3:6]) @ generalized[3:6] + numpy.cross(q[:3], linear)
        return linear, angular

    acceleration = forward_dynamics(character, (pose, velocity), numpy.zeros(57), gravity=0.0)
    forward = momenta(integrate_pose(pose, step * velocity), velocity + step * acceleration)
    backward = momenta(integrate_pose(pose, -step * velocity), velocity - step * acceleration)

    for after, before in zip(forward, backward):
        assert numpy.allclose((after - before) / (2 * step), 0, atol=1e-4)


def test_bias_forces(character):
    pose = character.rest_pose(height=2.0)

    gravity = bias_forces(character, pose, numpy.zeros(57))

    assert numpy.allclose(gravity[:3], [0, 0, character.total_mass * 9.81])


def test_root_torques_rejected(character):
    torques = numpy.zeros(57)
    torques[2] = 1.0

    with pytest.raises(ValueError):
        forward_dynamics(character, (character.rest_pose(), numpy.zeros(57)), torques)


@pytest.mark.slow
def test_forward_dynamics_oracle(character):
    rng = numpy.random.default_rng(7)
    poses, velocities = zip(*(random_state(character, seed) for seed in range(1000)))
    torques = numpy.zeros((1000, 57))
    torques[:, 6:] = rng.normal(scale=20.0, size=(1000, 51))

    recursive = forward_dynamics(character, (numpy.stack(poses), numpy.stack(velocities)), torques)
    dense = forward_dynamics_dense(
        character, (numpy.stack(poses), numpy.stack(velocities)), torques
    )

    errors = numpy.linalg.norm(recursive - dense, axis=-1)
    assert numpy.all(errors <= 1e-8 * numpy.linalg.norm(dense, axis=-1))


def mechanical_energy(model: CharacterModel, world: SimWorld) -> float:
    _, center = forward_kinematics(model, world.pose[0])
    potential = model.total_mass * 9.81 * center[2]
    return float(kinetic_energy(model, world.pose[0], world.velocity[0])) + potential


@pytest.mark.slow
def test_energy_without_contact(character):
    pose = character.rest_pose(height=50.0)
    velocity = numpy.zeros(57)
    velocity[:6] = [0.2, -0.1, 0.0, 0.1, 0.05, -0.1]
    velocity[6:] = numpy.random.default_rng(3).normal(scale=0.1, size=51)
    world = SimWorld(character, pose, velocity)
    initial = mechanical_energy(character, world)

    for _ in range(240):
        world = step(world, numpy.zeros(57))
        # no contact within reach of the fall
        assert len(world.contacts()) == 0
        assert mechanical_energy(character, world) - initial <= 1e-3 * world.time + 1e-9
