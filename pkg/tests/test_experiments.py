import numpy
import pytest

from physcapture.character import build_character
from physcapture.character import CharacterModel
from physcapture.character import ReferenceMotion
from physcapture.character.skeleton import link_transforms
from physcapture.control import capture_motion
from physcapture.control import CmaConfig
from physcapture.control import SamplerConfig
from physcapture.evaluation import corrupt_motion
from physcapture.evaluation import evaluate_capture
from physcapture.evaluation import evaluate_motion
from physcapture.evaluation import run_success_experiment
from physcapture.evaluation import synthesize_task
from physcapture.evaluation import SyntheticTask
from physcapture.evaluation.experiments import capture_succeeded
from physcapture.evaluation.experiments import ground_truth_joints
from physcapture.evaluation.experiments import REPORT_COLUMNS
from physcapture.evaluation.experiments import success_report
from physcapture.evaluation.tasks import simulate_task
from physcapture.physics import detect_contacts
from physcapture.prior import DistributionEncoder
from physcapture.prior import DistributionPrior
from physcapture.prior import generate_training_data
from physcapture.prior import pretrain_kl
from physcapture.prior import TrainConfig


@pytest.fixture(scope="module")
def character() -> CharacterModel:
    return build_character()


def standing(model: CharacterModel, frames: int) -> ReferenceMotion:
    return ReferenceMotion(
        numpy.arange(frames) / 30, numpy.tile(model.rest_pose(), (frames, 1)), frame_rate=30.0
    )


def small_config(**kwargs) -> SamplerConfig:
    values = {"samples": 8, "keep": 2, "mode": "gaussian-fixed", "progress": False}
    values.update(kwargs)
    return SamplerConfig(**values)


def test_ground_truth_joints(character):
    motion = standing(character, 4)

    joints = ground_truth_joints(motion, numpy.array([0.0, 0.05, 0.1]), character)

    assert joints.shape == (3, 19, 3)
    assert numpy.allclose(joints[0], joints[2])


def test_evaluate_motion_identity(character):
    poses = numpy.tile(character.rest_pose(), (4, 1))
    poses[:, 6:] += numpy.random.default_rng(0).normal(scale=0.1, size=(4, 51))
    motion = ReferenceMotion(numpy.arange(4) / 30, poses, frame_rate=30.0)

    report = evaluate_motion(motion, motion, character)

    assert report.mpjpe == 0
    assert report.e_fz == 0
    assert report.pa_mpjpe < 1e-6


def test_evaluate_capture(character):
    motion = standing(character, 4)
    result = capture_motion(motion, config=small_config(), model=character)

    report = evaluate_capture(result, motion)

    assert report.success_rate == 1.0
    assert report.mpjpe < 50.0
    assert capture_succeeded(result)


def test_evaluate_failed_capture(character):
    motion = standing(character, 4)
    result = capture_motion(
        motion, config=small_config(fall_height=5.0, max_attempts=1), model=character
    )

    assert not capture_succeeded(result)
    with pytest.raises(ValueError):
        evaluate_capture(result, motion)


def test_success_report():
    report = success_report({"neural-prior": [True, True, False, True], "uniform-baseline": [], "delta": [False]})

    assert list(report.columns) == REPORT_COLUMNS
    assert report["mode"].tolist() == ["neural-prior", "delta"]
    assert report["successes"].tolist() == [3, 0]
    assert report["rate"].tolist() == [0.75, 0.0]
    assert numpy.all(report["lower"] <= report["rate"])
    assert numpy.all(report["rate"] <= report["upper"])


def test_success_experiment_empty():
    report = run_success_experiment(trials=0)

    assert list(report.columns) == REPORT_COLUMNS
    assert len(report) == 0

    with pytest.raises(ValueError):
        run_success_experiment(trials=-1)


def test_success_experiment():
    task = SyntheticTask("stand", duration=0.1, settle=0.25)

    report = run_success_experiment(
        task,
        modes=["delta", "gaussian-fixed"],
        trials=2,
        sampler_config=small_config(),
        reference_noise=0.01,
        progress=False,
    )

    assert report["mode"].tolist() == ["delta", "gaussian-fixed"]
    assert report["trials"].tolist() == [2, 2]
    assert numpy.all((report["rate"] >= 0) & (report["rate"] <= 1))


@pytest.mark.slow
def test_success_experiment_threads():
    task = SyntheticTask("stand", duration=0.1, settle=0.25)
    arguments = dict(
        modes=["gaussian-fixed"], trials=3, sampler_config=small_config(), progress=False
    )

    serial = run_success_experiment(task, threads=1, **arguments)
    threaded = run_success_experiment(task, threads=3, **arguments)

    assert serial.equals(threaded)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["stand", "squat"])
def test_capture_quality(character, name):
    task = SyntheticTask(name, duration=1.0)
    ground_truth, observations = synthesize_task(task, model=character)
    reference = corrupt_motion(ground_truth, noise=0.03, translation_noise=0.005, seed=2)

    result = capture_motion(
        reference,
        observations,
        scene=task.scene(),
        config=small_config(samples=200, keep=10),
        model=character,
    )

    assert capture_succeeded(result)
    report = evaluate_capture(result, ground_truth)
    assert report.e_fz < 25.0
    assert report.e_s < evaluate_motion(reference, ground_truth, character).e_s

    contacts = detect_contacts(character, link_transforms(character, result.poses), task.scene())
    assert numpy.all(contacts.distances[contacts.active] >= -0.005)


@pytest.mark.slow
def test_lift_leg_mode_ordering(character):
    task = SyntheticTask("lift-leg", duration=1.0)
    motion = simulate_task(task, model=character)
    config = TrainConfig(learning_rate=1e-3, batch_size=16, pretrain_epochs=150, pairs=60, progress=False)
    dataset = generate_training_data(
        [motion],
        cma_config=CmaConfig(population=8, generations=8),
        rng=numpy.random.default_rng(30),
        config=config,
        model=character,
    )
    encoder = DistributionEncoder(width=64, layers=4, rng=numpy.random.default_rng(31))
    encoder, _ = pretrain_kl(encoder, dataset, config, numpy.random.default_rng(32))

    report = run_success_experiment(
        task,
        trials=3,
        prior=DistributionPrior(encoder),
        sampler_config=SamplerConfig(samples=100, keep=10, progress=False),
        cma_config=CmaConfig(population=6, generations=10),
        progress=False,
    )

    rates = dict(zip(report["mode"], report["rate"]))
    assert report["mode"].tolist() == ["neural-prior", "cma-baseline", "uniform-baseline"]
    assert rates["neural-prior"] >= rates["cma-baseline"] >= rates["uniform-baseline"]
    assert numpy.all(report["lower"] <= report["rate"])
    assert numpy.all(report["rate"] <= report["upper"])
