import numpy
import pytest

from physcapture.character import build_character
from physcapture.character import CharacterModel
from physcapture.character import ReferenceMotion
from physcapture.evaluation import corrupt_motion
from physcapture.evaluation import synthesize_task
from physcapture.evaluation import SyntheticTask
from physcapture.evaluation import TaskName
from physcapture.evaluation.tasks import simulate_task
from physcapture.evaluation.tasks import target_column
from physcapture.physics import SceneGeometry
from tests import check_reference_directory
from tests import output_directory


@pytest.fixture(scope="module")
def character() -> CharacterModel:
    return build_character()


def test_synthetic_task():
    squat = SyntheticTask("squat")
    walk = SyntheticTask(TaskName.WALK_IN_PLACE, duration=3.0)

    assert squat.name == TaskName.SQUAT
    assert squat.amplitude == 0.4
    assert squat.period == 2.0
    assert squat.frames == 61
    assert walk.period == 1.0
    assert isinstance(SyntheticTask("stair-step").scene(), SceneGeometry)

    with pytest.raises(ValueError):
        SyntheticTask("cartwheel")

    with pytest.raises(ValueError):
        SyntheticTask("stand", duration=0.0)

    with pytest.raises(ValueError):
        SyntheticTask("stand", observation_noise=-1.0)


def test_target_column(character):
    columns = [target_column(character, "left_knee", axis) for axis in range(3)]

    assert columns[1] == columns[0] + 1
    assert 0 <= columns[0] < character.target_dof

    with pytest.raises(ValueError):
        target_column(character, "left_wrist")


def test_program_squat(character):
    task = SyntheticTask("squat", duration=2.0)

    settling, settling_share = task.program(character, -0.1)
    deepest, share = task.program(character, 1.0)

    assert numpy.all(settling == 0)
    assert settling_share == 0.5
    assert share == 0.5
    for side in ("left", "right"):
        assert numpy.isclose(deepest[target_column(character, f"{side}_hip")], -0.4)
        assert numpy.isclose(deepest[target_column(character, f"{side}_knee")], 0.8)
        assert numpy.isclose(deepest[target_column(character, f"{side}_ankle")], -0.4)


def test_program_walk(character):
    task = SyntheticTask("walk-in-place")

    target, share = task.program(character, 0.25)

    assert numpy.isclose(target[target_column(character, "left_hip")], -0.3)
    assert target[target_column(character, "right_hip")] == 0
    assert share > 0.99


def test_program_lift_leg(character):
    task = SyntheticTask("lift-leg", duration=2.0)

    holding, share = task.program(character, 1.2)

    assert numpy.isclose(holding[target_column(character, "left_hip")], -0.5)
    assert numpy.isclose(holding[target_column(character, "left_knee")], 1.0)
    # the lifted foot is free
    assert holding[target_column(character, "left_ankle")] == 0
    assert share == 1.0


def test_simulate_stand(character):
    task = SyntheticTask("stand", duration=0.2, settle=0.25)

    first = simulate_task(task, model=character)
    second = simulate_task(task, model=character)

    assert len(first) == task.frames == 7
    assert first.frame_rate == 30.0
    assert first.timestamps[0] == 0
    assert numpy.all(first.poses[:, 2] > task.fall_height)
    assert numpy.array_equal(first.poses, second.poses)


def test_simulate_invalid_rate(character):
    with pytest.raises(ValueError):
        simulate_task(SyntheticTask("stand", duration=0.2, frame_rate=7.0), model=character)


def test_synthesize_task_seed(character):
    task = SyntheticTask("stand", duration=0.2, settle=0.25, observation_noise=2.0)

    motion, observations = synthesize_task(task, seed=0, model=character)
    same_motion, other_observations = synthesize_task(task, seed=1, model=character)

    assert len(observations) == len(motion)
    assert observations.frame_rate == motion.frame_rate
    assert numpy.array_equal(motion.poses, same_motion.poses)
    assert not numpy.array_equal(observations.keypoints, other_observations.keypoints)


def test_synthesize_task_files(character):
    output = output_directory("test_synthesize_task_files")
    first = output / "first"
    second = output / "second"
    task = SyntheticTask("stand", duration=0.1, settle=0.25, observation_noise=1.0)

    for directory in (first, second):
        directory.mkdir(exist_ok=True)
        motion, observations = synthesize_task(task, seed=4, model=character)
        motion.to_file(directory / "ground_truth.motion", overwrite=True)
        observations.to_file(directory / "observations.csv", overwrite=True)

    check_reference_directory(first, second)


def test_corrupt_motion(character):
    poses = numpy.tile(character.rest_pose(), (200, 1))
    motion = ReferenceMotion(numpy.arange(200) / 30, poses, frame_rate=30.0)

    clean = corrupt_motion(motion, noise=0.0, translation_noise=0.0)
    noisy = corrupt_motion(motion, noise=0.05, translation_noise=0.01, seed=3)

    assert numpy.array_equal(clean.poses, motion.poses)
    assert numpy.array_equal(noisy.poses, corrupt_motion(motion, 0.05, 0.01, seed=3).poses)
    assert 0.04 < numpy.std(noisy.poses[:, 3:] - poses[:, 3:]) < 0.06
    assert 0.008 < numpy.std(noisy.poses[:, :3] - poses[:, :3]) < 0.012
    assert noisy.frame_rate == 30.0

    with pytest.raises(ValueError):
        corrupt_motion(motion, noise=-0.1)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["squat", "walk-in-place", "lift-leg"])
def test_simulate_tasks(character, name):
    task = SyntheticTask(name, duration=2.0)

    motion = simulate_task(task, model=character)

    assert len(motion) == 61
    assert numpy.all(motion.poses[:, 2] > task.fall_height)
    knees = motion.poses[:, character.dof_index[character.joint_index("left_knee") + 1]]
    assert knees.max() > 0.1
