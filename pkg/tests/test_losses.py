import numpy
import pytest

from physcapture.character import build_character
from physcapture.character import CharacterModel
from physcapture.character import forward_kinematics
from physcapture.control import detect_failure
from physcapture.control import loss_ban
from physcapture.control import loss_dyn
from physcapture.control import loss_reproj
from physcapture.control import loss_total
from physcapture.control import loss_tra
from physcapture.control import LossWeights
from physcapture.control import TrackingFrame
from physcapture.control.losses import evaluate_states
from physcapture.control.losses import FAILED_LOSS
from physcapture.kinematic import Camera
from physcapture.utilities import integrate_pose


@pytest.fixture(scope="module")
def character() -> CharacterModel:
    return build_character()


def random_pose(model: CharacterModel, seed: int) -> numpy.ndarray:
    pose = model.rest_pose()
    pose[3:] += numpy.random.default_rng(seed).normal(scale=0.2, size=model.dof - 3)
    return pose


def test_loss_tra_identity(character):
    pose = random_pose(character, 0)

    assert loss_tra(character, pose, pose) == 0


def test_loss_tra_single_joint(character):
    angle = 0.3
    reference = character.rest_pose()
    pose = reference.copy()
    pose[character.dof_index[character.names.index("left_knee")]] = angle

    # only the ankle moves, on a circle of the shank length
    expected = angle**2 + (2 * 0.4 * numpy.sin(angle / 2)) ** 2

    assert numpy.isclose(loss_tra(character, pose, reference), expected)


def test_loss_tra_symmetric(character):
    first = random_pose(character, 1)
    second = random_pose(character, 2)

    assert numpy.isclose(loss_tra(character, first, second), loss_tra(character, second, first))


def test_loss_tra_batch(character):
    poses = numpy.stack([random_pose(character, seed) for seed in range(3)])
    reference = random_pose(character, 3)

    batched = loss_tra(character, poses, reference)

    assert batched.shape == (3,)
    assert numpy.isclose(batched[1], loss_tra(character, poses[1], reference))


def test_loss_dyn_matching(character):
    pose = random_pose(character, 4)
    velocity = numpy.random.default_rng(4).normal(size=57)

    assert loss_dyn(character, pose, velocity, pose, velocity) == 0


def test_loss_dyn_falling(character):
    pose = character.rest_pose()
    velocity = numpy.zeros(57)
    velocity[2] = -1.0

    assert numpy.isclose(loss_dyn(character, pose, velocity, pose, numpy.zeros(57)), 1 + 19)


def test_loss_dyn_joint_velocities(character):
    pose = random_pose(character, 5)
    velocity = numpy.random.default_rng(5).normal(scale=0.5, size=57)
    step = 1e-5

    ahead, _ = forward_kinematics(character, integrate_pose(pose, step * velocity))
    behind, _ = forward_kinematics(character, integrate_pose(pose, -step * velocity))
    joint_velocities = (ahead - behind) / (2 * step)
    expected = (velocity**2).sum() + (joint_velocities**2).sum()

    value = loss_dyn(character, pose, velocity, pose, numpy.zeros(57))

    assert abs(value - expected) <= 1e-4 * expected


def test_loss_ban_identity(character):
    pose = random_pose(character, 6)

    assert loss_ban(character, pose, numpy.zeros(57), pose) == 0


def test_loss_ban_translation(character):
    reference = random_pose(character, 7)
    shifted = reference.copy()
    shifted[:2] += [0.4, -0.3]
    raised = reference.copy()
    raised[2] += 0.25

    assert numpy.isclose(loss_ban(character, shifted, numpy.zeros(57), reference), 0, atol=1e-20)
    assert numpy.isclose(loss_ban(character, raised, numpy.zeros(57), reference), 0, atol=1e-20)


def test_loss_ban_com_velocity(character):
    pose = character.rest_pose()
    velocity = numpy.zeros(57)
    velocity[:3] = [0.3, 0.0, -0.4]

    assert numpy.isclose(loss_ban(character, pose, velocity, pose), 0.25)


def test_loss_reproj(character):
    pose = random_pose(character, 8)
    camera = Camera.look_at()
    joints, _ = forward_kinematics(character, pose)
    keypoints, _ = camera.project(joints)

    assert numpy.isclose(loss_reproj(character, pose, keypoints, numpy.ones(19), camera), 0, atol=1e-16)
    assert loss_reproj(character, pose, keypoints + 30.0, numpy.zeros(19), camera) == 0
    assert numpy.isclose(
        loss_reproj(character, pose, keypoints + [3.0, 4.0], numpy.ones(19), camera), 25 * 19
    )


def test_loss_reproj_behind(character):
    pose = character.rest_pose()
    # camera looking away from the character
    camera = Camera.look_at(position=(0.0, -4.0, 1.0), target=(0.0, -8.0, 1.0))

    value, behind = loss_reproj(
        character, pose, numpy.zeros((19, 2)), numpy.ones(19), camera, return_flags=True
    )

    assert value == 0
    assert behind


def test_loss_total():
    assert loss_total({"tra": 1, "dyn": 2, "ban": 3, "reproj": 4}) == 10
    assert loss_total([1, 2, 3, 4], LossWeights(0, 0, 0, 0)) == 0
    assert loss_total([1, 2, 3, 4], failed=True) == FAILED_LOSS
    assert loss_total([1, numpy.nan, 3, 4]) == FAILED_LOSS

    with pytest.raises(ValueError):
        LossWeights(tra=-1.0)


def test_loss_total_scaling():
    components = numpy.random.default_rng(9).uniform(size=(50, 4))
    weights = LossWeights(0.5, 2.0, 1.0, 0.1)
    scaled = LossWeights(*(7.5 * weights.as_array()))

    assert numpy.argmin(loss_total(components, weights)) == numpy.argmin(
        loss_total(components, scaled)
    )


def test_detect_failure(character):
    pose = character.rest_pose()
    fallen = pose.copy()
    fallen[2] = 0.1

    assert not detect_failure(pose)
    assert detect_failure(fallen)
    assert detect_failure(pose, diverged=True)
    assert detect_failure(pose, loss=numpy.inf)
    assert detect_failure(numpy.stack([pose, fallen])).tolist() == [False, True]


def test_evaluate_states(character):
    pose = character.rest_pose()
    fallen = pose.copy()
    fallen[2] = 0.1
    reference = TrackingFrame(pose, numpy.zeros(57))

    components, totals, failed = evaluate_states(
        character,
        numpy.stack([pose, fallen]),
        numpy.zeros((2, 57)),
        numpy.array([False, False]),
        reference,
    )

    assert components.shape == (2, 4)
    assert numpy.all(components[:, 3] == 0)
    assert totals[0] == 0
    assert totals[1] == FAILED_LOSS
    assert failed.tolist() == [False, True]
