import numpy
import pandas
import pytest

from physcapture.evaluation import compute_metrics
from physcapture.evaluation import foot_z_error
from physcapture.evaluation import MetricsReport
from physcapture.evaluation import mpjpe
from physcapture.evaluation import pa_mpjpe
from physcapture.evaluation import smoothness_error
from physcapture.evaluation import wilson_interval
from physcapture.evaluation.metrics import FOOT_INDICES
from physcapture.evaluation.metrics import procrustes_align
from physcapture.evaluation.metrics import ROOT_JOINTS
from physcapture.utilities import rotation_matrices
from tests import output_directory

JOINTS = 19


def random_joints(frames: int, seed: int) -> numpy.ndarray:
    return numpy.random.default_rng(seed).normal(scale=0.4, size=(frames, JOINTS, 3))


def test_identical():
    joints = random_joints(4, 0)

    report = compute_metrics(joints, joints)

    assert report.mpjpe == 0
    assert report.pa_mpjpe < 1e-9
    assert report.e_s == 0
    assert report.sigma_s == 0
    assert report.e_fz == 0
    assert numpy.isnan(report.success_rate)


def test_mpjpe_single_joint():
    truth = random_joints(3, 1)
    predicted = truth.copy()
    joint = next(index for index in range(JOINTS) if index not in ROOT_JOINTS)
    predicted[:, joint, 0] += 0.01

    assert numpy.isclose(mpjpe(predicted, truth), 10.0 / JOINTS)


def test_mpjpe_root_aligned():
    truth = random_joints(3, 2)
    shifted = truth + [0.5, -0.2, 0.1]

    assert numpy.isclose(mpjpe(shifted, truth), 0, atol=1e-9)
    assert numpy.isclose(mpjpe(shifted, truth, root=None), 1000 * numpy.linalg.norm([0.5, -0.2, 0.1]))

    with pytest.raises(ValueError):
        mpjpe(truth, truth[:, :-1])


def test_procrustes():
    truth = random_joints(2, 3)
    rotation = rotation_matrices(numpy.array([0.3, -0.5, 1.1]))
    predicted = 1.1 * truth @ rotation + [0.3, 0.2, -0.4]

    aligned, failed = procrustes_align(predicted, truth)

    assert not numpy.any(failed)
    assert numpy.allclose(aligned, truth, atol=1e-9)
    assert pa_mpjpe(predicted, truth) < 1e-6


def test_procrustes_degenerate():
    truth = random_joints(2, 4)
    predicted = truth.copy()
    predicted[1] = 0.5

    value, failed = pa_mpjpe(predicted, truth, return_flags=True)

    assert failed.tolist() == [False, True]
    assert numpy.isfinite(value)


def test_pa_mpjpe_bound():
    truth = random_joints(5, 5)
    predicted = truth + numpy.random.default_rng(6).normal(scale=0.02, size=truth.shape)

    assert pa_mpjpe(predicted, truth) <= mpjpe(predicted, truth)


def test_smoothness_jitter():
    truth = numpy.tile(random_joints(1, 7), (6, 1, 1))
    predicted = truth.copy()
    predicted[1::2, 5, 0] += 0.002

    e_s, sigma_s = smoothness_error(predicted, truth)

    assert numpy.isclose(e_s, 2.0 / JOINTS)
    assert numpy.isclose(sigma_s, 0, atol=1e-12)

    with pytest.raises(ValueError):
        smoothness_error(truth[:1], truth[:1])


def test_foot_z_error():
    truth = random_joints(3, 8)
    floating = truth.copy()
    floating[:, list(FOOT_INDICES), 2] += 0.02
    other = truth.copy()
    other[:, 0, 2] += 0.5

    assert numpy.isclose(foot_z_error(floating, truth), 20.0)
    assert foot_z_error(other, truth) == 0


def test_wilson_interval():
    lower, upper = wilson_interval(8, 10)

    assert wilson_interval(0, 0) == (0.0, 1.0)
    assert lower < 0.8 < upper
    assert numpy.isclose(lower, 0.4902, atol=1e-3)
    assert numpy.isclose(upper, 0.9433, atol=1e-3)
    assert numpy.isclose(wilson_interval(0, 10)[0], 0.0, atol=1e-12)
    assert numpy.isclose(wilson_interval(10, 10)[1], 1.0)

    with pytest.raises(ValueError):
        wilson_interval(11, 10)


def test_metrics_report():
    output = output_directory("test_metrics_report")
    report = MetricsReport(12.0, 8.5, 1.25, 0.5, 3.0, success_rate=0.75)

    report.to_file(output / "metrics.csv", overwrite=True)
    table = pandas.read_csv(output / "metrics.csv")

    assert list(table.columns) == ["mpjpe", "pa_mpjpe", "e_s", "sigma_s", "e_fz", "success_rate"]
    assert table.iloc[0]["mpjpe"] == 12.0
    assert "75.0 %" in report.summary()
    assert "success" not in MetricsReport(1.0, 1.0, 1.0, 0.0, 1.0).summary()

    with pytest.raises(ValueError):
        MetricsReport(-1.0, 0.0, 0.0, 0.0, 0.0)
