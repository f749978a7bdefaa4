import numpy
import pytest

from physcapture.character import build_character
from physcapture.character import CharacterModel
from physcapture.character import ReferenceMotion
from physcapture.character.const import BONE_GROUPS
from physcapture.evaluation.experiments import evaluate_motion
from physcapture.evaluation.tasks import synthesize_task
from physcapture.evaluation.tasks import SyntheticTask
from physcapture.kinematic import Camera
from physcapture.kinematic import fit_reference
from physcapture.kinematic import KinematicConfig
from physcapture.kinematic import loss_data
from physcapture.kinematic import loss_prior
from physcapture.kinematic import loss_scene
from physcapture.kinematic import ObservationSequence
from physcapture.kinematic import optimize_reference
from physcapture.kinematic import OptVariables
from physcapture.kinematic import synthesize_observations
from physcapture.kinematic.optimize import foot_keypoints
from physcapture.kinematic.optimize import prior_terms
from physcapture.physics import bake_sdf
from physcapture.physics import SceneGeometry

GROUND_BOUNDS = ([-1.0, -1.0, -0.5], [1.0, 1.0, 1.0])


@pytest.fixture(scope="module")
def character() -> CharacterModel:
    return build_character()


@pytest.fixture(scope="module")
def ground():
    return bake_sdf(SceneGeometry.flat_ground(), GROUND_BOUNDS, 32)


def perturbed_poses(model: CharacterModel, frames: int, seed: int, scale: float = 0.1) -> numpy.ndarray:
    rng = numpy.random.default_rng(seed)
    poses = numpy.tile(model.rest_pose(), (frames, 1))
    poses[:, 3:] += rng.normal(scale=scale, size=poses[:, 3:].shape)
    return poses


def observe(model: CharacterModel, poses: numpy.ndarray) -> ObservationSequence:
    motion = ReferenceMotion(numpy.arange(len(poses)) / 30, poses, frame_rate=30.0)
    return synthesize_observations(model, motion, Camera.look_at())


def numerical_gradient(function, vector: numpy.ndarray, step: float = 1e-6) -> numpy.ndarray:
    gradient = numpy.zeros(vector.shape)
    for index in range(len(vector)):
        offset = numpy.zeros(vector.shape)
        offset[index] = step
        gradient[index] = (function(vector + offset) - function(vector - offset)) / (2 * step)
    return gradient


def test_opt_variables():
    poses = numpy.random.default_rng(0).normal(size=(3, 57))

    variables = OptVariables.from_poses(poses)

    assert variables.frames == 3
    assert numpy.array_equal(variables.poses, poses)
    assert numpy.array_equal(variables.scale, numpy.ones(len(BONE_GROUPS)))
    assert numpy.array_equal(
        OptVariables.from_vector(variables.as_vector(), 3).poses, poses
    )
    assert numpy.all(OptVariables.zeros_like(variables).as_vector() == 0)

    with pytest.raises(ValueError):
        OptVariables(numpy.zeros((3, 3)), numpy.zeros((2, 3)), numpy.zeros((3, 51)), numpy.ones(len(BONE_GROUPS)))


def test_kinematic_config():
    config = KinematicConfig.from_dict({"iterations": 50, "interaction": False})

    assert config.iterations == 50
    assert not config.interaction

    with pytest.raises(ValueError):
        KinematicConfig.from_dict({"steps": 10})

    with pytest.raises(ValueError):
        KinematicConfig(learning_rate=0.0)


def test_loss_data_consistent(character):
    poses = perturbed_poses(character, 3, 1)
    observations = observe(character, poses)

    assert numpy.isclose(loss_data(OptVariables.from_poses(poses), observations, character), 0, atol=1e-12)


def test_loss_data_zero_confidence(character):
    poses = perturbed_poses(character, 2, 2)
    observations = observe(character, poses)
    blind = ObservationSequence(
        observations.keypoints + 50.0,
        numpy.zeros(observations.confidences.shape),
        observations.camera,
        observations.frame_rate,
    )

    assert loss_data(OptVariables.from_poses(poses), blind, character) == 0


def test_loss_data_offset(character):
    poses = perturbed_poses(character, 1, 3)
    observations = observe(character, poses)
    keypoints = numpy.array(observations.keypoints)
    keypoints[0, 4, 0] += 10.0
    confidences = numpy.zeros(observations.confidences.shape)
    confidences[0, 4] = 0.5
    offset = ObservationSequence(keypoints, confidences, observations.camera, 30.0)

    assert numpy.isclose(loss_data(OptVariables.from_poses(poses), offset, character), 50.0)


def test_loss_data_gradient(character):
    observations = observe(character, perturbed_poses(character, 1, 4))
    variables = OptVariables.from_poses(perturbed_poses(character, 1, 5))
    variables.scale = numpy.random.default_rng(6).uniform(0.9, 1.1, len(BONE_GROUPS))

    _, gradient = loss_data(variables, observations, character, gradient=True)
    numerical = numerical_gradient(
        lambda vector: loss_data(OptVariables.from_vector(vector, 1), observations, character),
        variables.as_vector(),
    )

    assert numpy.linalg.norm(gradient.as_vector() - numerical) <= 1e-4 * numpy.linalg.norm(numerical)


def test_loss_data_mismatch(character):
    observations = observe(character, perturbed_poses(character, 2, 7))

    with pytest.raises(ValueError):
        loss_data(OptVariables.from_poses(perturbed_poses(character, 3, 7)), observations, character)


def test_loss_prior_rest(character):
    variables = OptVariables.from_poses(numpy.tile(character.rest_pose(), (5, 1)))

    assert loss_prior(variables) == 0


def test_loss_prior_constant():
    joints = numpy.random.default_rng(8).normal(scale=0.2, size=51)
    poses = numpy.zeros((6, 57))
    poses[:, 6:] = joints

    terms = prior_terms(OptVariables.from_poses(poses))

    assert terms["kinetic"] == 0
    assert terms["shape"] == 0
    assert numpy.isclose(terms["latent"], 6 * (joints**2).sum())


def test_loss_prior_ramp():
    poses = numpy.zeros((5, 57))
    poses[:, 6:] = numpy.linspace(0.0, 0.4, 5)[:, None] * numpy.linspace(-1.0, 1.0, 51)

    terms = prior_terms(OptVariables.from_poses(poses))

    assert numpy.isclose(terms["kinetic"], 0, atol=1e-20)
    assert prior_terms(OptVariables.from_poses(poses[:2]))["kinetic"] == 0


def test_loss_prior_gradient():
    variables = OptVariables.from_poses(numpy.random.default_rng(9).normal(scale=0.3, size=(4, 57)))
    variables.scale = numpy.linspace(0.8, 1.2, len(BONE_GROUPS))
    weights = {"shape": 3.0, "latent": 0.5, "kinetic": 2.0}

    _, gradient = loss_prior(variables, weights, gradient=True)
    numerical = numerical_gradient(
        lambda vector: loss_prior(OptVariables.from_vector(vector, 4), weights),
        variables.as_vector(),
    )

    assert numpy.allclose(gradient.as_vector(), numerical, atol=1e-6)


def grounded_variables(model: CharacterModel, hover: float) -> OptVariables:
    variables = OptVariables.from_poses(numpy.tile(model.rest_pose(), (2, 1)))
    points, _ = foot_keypoints(model, variables)
    variables.translation[:, 2] -= points[..., 2].min() - hover
    return variables


def test_loss_scene_grounded(character, ground):
    variables = grounded_variables(character, 0.0)

    points, _ = foot_keypoints(character, variables)

    assert points.shape == (2, 8, 3)
    assert numpy.allclose(points[..., 2], 0, atol=1e-9)
    assert loss_scene(variables, ground, character) < 1e-12


def test_loss_scene_hover(character, ground):
    variables = grounded_variables(character, 0.05)

    assert numpy.isclose(loss_scene(variables, ground, character, gm_scale=0.1), 2 * 8 * 0.002)


def test_loss_scene_gradient(character, ground):
    variables = grounded_variables(character, 0.03)
    variables.joints += numpy.random.default_rng(10).normal(scale=0.05, size=variables.joints.shape)

    _, gradient = loss_scene(variables, ground, character, gradient=True)
    numerical = numerical_gradient(
        lambda vector: loss_scene(OptVariables.from_vector(vector, 2), ground, character),
        variables.as_vector(),
    )

    assert numpy.linalg.norm(gradient.as_vector() - numerical) <= 1e-3 * numpy.linalg.norm(numerical)


def test_fit_reference_improves(character, ground):
    truth = perturbed_poses(character, 3, 11, scale=0.05)
    observations = observe(character, truth)
    config = KinematicConfig(iterations=15)

    fit = fit_reference(observations, ground, model=character, config=config)

    assert list(fit.stages.index) == [1, 2, 3, 4]
    assert numpy.all(fit.stages["loss"] <= fit.stages["initial_loss"])
    assert len(fit.motion) == 3
    assert numpy.all(fit.variables.scale >= 0.5)


def test_fit_reference_deterministic(character, ground):
    observations = observe(character, perturbed_poses(character, 2, 12, scale=0.05))
    config = KinematicConfig(iterations=10)

    first = optimize_reference(observations, ground, model=character, config=config)
    second = optimize_reference(observations, ground, model=character, config=config)

    assert numpy.array_equal(first.poses, second.poses)
    assert first.scale == second.scale


def test_fit_reference_mismatch(character, ground):
    observations = observe(character, perturbed_poses(character, 2, 13))
    init = ReferenceMotion([0.0, 1 / 30, 2 / 30], perturbed_poses(character, 3, 13))

    with pytest.raises(ValueError):
        fit_reference(observations, ground, init=init, model=character)


@pytest.mark.slow
def test_optimize_reference_accuracy(character):
    ground_truth, observations = synthesize_task(SyntheticTask("squat", duration=1.0), model=character)

    motion = optimize_reference(observations, SceneGeometry.flat_ground(), model=character)

    assert evaluate_motion(motion, ground_truth).mpjpe < 30.0


@pytest.mark.slow
def test_optimize_reference_interaction(character):
    task = SyntheticTask("walk-in-place", duration=1.0, observation_noise=2.0)
    ground_truth, observations = synthesize_task(task, model=character)
    scene = SceneGeometry.flat_ground()

    with_scene = optimize_reference(observations, scene, model=character, interaction=True)
    without_scene = optimize_reference(observations, scene, model=character, interaction=False)

    assert (
        evaluate_motion(with_scene, ground_truth).e_fz
        <= evaluate_motion(without_scene, ground_truth).e_fz + 5.0
    )
