"""
motion metrics against ground truth; positions are in meters and every error is reported in millimeters
"""

from dataclasses import asdict
from dataclasses import dataclass
import logging
from os import PathLike
from pathlib import Path
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy
import pandas
from scipy import stats

from physcapture.character.const import FOOT_JOINTS
from physcapture.character.const import JOINT_NAMES
from physcapture.character.const import PELVIS_JOINTS

MILLIMETERS = 1000.0

ROOT_JOINTS = tuple(JOINT_NAMES.index(name) for name in PELVIS_JOINTS)
FOOT_INDICES = tuple(JOINT_NAMES.index(name) for name in FOOT_JOINTS)

# alignment of a frame fails when its centered joints have less spread than this, in meters
DEGENERATE_SPREAD = 1e-9


def _check_shapes(predicted: numpy.ndarray, ground_truth: numpy.ndarray) -> Tuple[numpy.ndarray, numpy.ndarray]:
    predicted = numpy.asarray(predicted, dtype=float)
    ground_truth = numpy.asarray(ground_truth, dtype=float)
    if predicted.shape != ground_truth.shape:
        raise ValueError(
            f'prediction "{predicted.shape}" and ground truth "{ground_truth.shape}" differ in shape'
        )
    if predicted.ndim == 2:
        predicted = predicted[None]
        ground_truth = ground_truth[None]
    if predicted.ndim != 3 or predicted.shape[-1] != 3:
        raise ValueError(f'expected joints of shape (frames, joints, 3), not "{predicted.shape}"')
    return predicted, ground_truth


def mpjpe(
    predicted: numpy.ndarray,
    ground_truth: numpy.ndarray,
    root: Sequence[int] = ROOT_JOINTS,
) -> float:
    """
    mean per-joint position error after aligning the root (the midpoint of the ``root`` joints) of every frame

    :param predicted: joint positions ``(frames, joints, 3)``
    :param ground_truth: joint positions of the same shape
    :param root: joints whose mean is the root, ``None`` to skip the alignment
    :return: error in millimeters
    """

    predicted, ground_truth = _check_shapes(predicted, ground_truth)
    if root is not None:
        root = list(root)
        predicted = predicted - predicted[:, root].mean(axis=1, keepdims=True)
        ground_truth = ground_truth - ground_truth[:, root].mean(axis=1, keepdims=True)
    return float(numpy.linalg.norm(predicted - ground_truth, axis=-1).mean() * MILLIMETERS)


def procrustes_align(
    predicted: numpy.ndarray, ground_truth: numpy.ndarray
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    per-frame similarity transform (rotation, scale and translation) of the prediction onto the ground truth

    :param predicted: joint positions ``(frames, joints, 3)``
    :param ground_truth: joint positions of the same shape
    :return: aligned prediction and the frames whose alignment failed (left unaligned)
    """

    predicted, ground_truth = _check_shapes(predicted, ground_truth)
    predicted_mean = predicted.mean(axis=1, keepdims=True)
    truth_mean = ground_truth.mean(axis=1, keepdims=True)
    predicted_centered = predicted - predicted_mean
    truth_centered = ground_truth - truth_mean

    predicted_norm = numpy.sqrt((predicted_centered**2).sum(axis=(1, 2)))
    truth_norm = numpy.sqrt((truth_centered**2).sum(axis=(1, 2)))
    failed = (predicted_norm < DEGENERATE_SPREAD) | (truth_norm < DEGENERATE_SPREAD)
    if predicted.shape[1] < 3:
        failed[:] = True

    safe_predicted = numpy.where(failed, 1.0, predicted_norm)[:, None, None]
    safe_truth = numpy.where(failed, 1.0, truth_norm)[:, None, None]
    covariance = numpy.swapaxes(truth_centered / safe_truth, 1, 2) @ (predicted_centered / safe_predicted)
    u, singular, vt = numpy.linalg.svd(covariance)
    v = numpy.swapaxes(vt, 1, 2)
    rotation = v @ numpy.swapaxes(u, 1, 2)

    # no reflections
    sign = numpy.sign(numpy.linalg.det(rotation))
    sign = numpy.where(sign == 0, 1.0, sign)
    v[:, :, -1] *= sign[:, None]
    singular[:, -1] *= sign
    rotation = v @ numpy.swapaxes(u, 1, 2)

    scale = singular.sum(axis=1) * truth_norm / numpy.where(failed, 1.0, predicted_norm)
    aligned = (
        scale[:, None, None] * (predicted_centered @ rotation) + truth_mean
    )
    aligned = numpy.where(failed[:, None, None], predicted, aligned)
    if numpy.any(failed):
        logging.debug(f'alignment failed for "{int(failed.sum())}" frames')
    return aligned, failed


def pa_mpjpe(
    predicted: numpy.ndarray,
    ground_truth: numpy.ndarray,
    return_flags: bool = False,
) -> Union[float, Tuple[float, numpy.ndarray]]:
    """
    mean per-joint position error after per-frame Procrustes alignment

    :param predicted: joint positions ``(frames, joints, 3)``
    :param ground_truth: joint positions of the same shape
    :param return_flags: also return the frames whose alignment failed
    :return: error in millimeters
    """

    predicted, ground_truth = _check_shapes(predicted, ground_truth)
    aligned, failed = procrustes_align(predicted, ground_truth)
    value = float(numpy.linalg.norm(aligned - ground_truth, axis=-1).mean() * MILLIMETERS)
    if return_flags:
        return value, failed
    return value


def smoothness_error(
    predicted: numpy.ndarray, ground_truth: numpy.ndarray
) -> Tuple[float, float]:
    """
    difference of joint speed magnitudes (distance travelled per frame) between prediction and ground truth

    :param predicted: joint positions ``(frames, joints, 3)``
    :param ground_truth: joint positions of the same shape
    :return: mean and standard deviation over frame pairs of the per-pair mean absolute difference, in mm per frame
    """

    predicted, ground_truth = _check_shapes(predicted, ground_truth)
    if len(predicted) < 2:
        raise ValueError(f'smoothness needs at least 2 frames, not "{len(predicted)}"')
    predicted_speed = numpy.linalg.norm(numpy.diff(predicted, axis=0), axis=-1)
    truth_speed = numpy.linalg.norm(numpy.diff(ground_truth, axis=0), axis=-1)
    per_pair = numpy.abs(predicted_speed - truth_speed).mean(axis=1) * MILLIMETERS
    return float(per_pair.mean()), float(per_pair.std())


def foot_z_error(
    predicted: numpy.ndarray,
    ground_truth: numpy.ndarray,
    feet: Sequence[int] = FOOT_INDICES,
) -> float:
    """
    :param predicted: joint positions ``(frames, joints, 3)``
    :param ground_truth: joint positions of the same shape
    :param feet: foot joint indices
    :return: mean absolute height difference of the feet, in millimeters
    """

    predicted, ground_truth = _check_shapes(predicted, ground_truth)
    feet = list(feet)
    return float(
        numpy.abs(predicted[:, feet, 2] - ground_truth[:, feet, 2]).mean() * MILLIMETERS
    )


def wilson_interval(
    successes: int, trials: int, confidence: float = 0.95
) -> Tuple[float, float]:
    """
    Wilson score interval of a success rate; no trials gives the uninformative interval

    :param successes: successful trials
    :param trials: trials
    :param confidence: confidence level
    :return: lower and upper bound

    >>> wilson_interval(0, 0)
    (0.0, 1.0)
    """

    if trials == 0:
        return 0.0, 1.0
    if not 0 <= successes <= trials:
        raise ValueError(f'successes "{successes}" outside of [0, {trials}]')
    z = stats.norm.ppf(0.5 + confidence / 2)
    rate = successes / trials
    denominator = 1 + z**2 / trials
    center = (rate + z**2 / (2 * trials)) / denominator
    half_width = z * numpy.sqrt(rate * (1 - rate) / trials + z**2 / (4 * trials**2)) / denominator
    return float(max(0.0, center - half_width)), float(min(1.0, center + half_width))


@dataclass
class MetricsReport:
    mpjpe: float
    pa_mpjpe: float
    e_s: float
    sigma_s: float
    e_fz: float
    success_rate: float = numpy.nan

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f'metric "{name}" must be non-negative, not "{value}"')

    def to_frame(self) -> pandas.DataFrame:
        return pandas.DataFrame([asdict(self)])

    def to_file(self, path: PathLike, overwrite: bool = False):
        if not isinstance(path, Path):
            path = Path(path)
        if path.exists() and not overwrite:
            logging.warning(f'skipping existing file "{path}"')
            return
        self.to_frame().to_csv(path, index=False)

    def summary(self) -> str:
        lines = [
            f"MPJPE     {self.mpjpe:10.3f} mm",
            f"PA-MPJPE  {self.pa_mpjpe:10.3f} mm",
            f"e_S       {self.e_s:10.3f} mm/frame (sigma {self.sigma_s:.3f})",
            f"e_fz      {self.e_fz:10.3f} mm",
        ]
        if not numpy.isnan(self.success_rate):
            lines.append(f"success   {100 * self.success_rate:10.1f} %")
        return "\n".join(lines)


def compute_metrics(
    predicted: numpy.ndarray,
    ground_truth: numpy.ndarray,
    success_rate: float = numpy.nan,
) -> MetricsReport:
    """
    :param predicted: joint positions ``(frames, joints, 3)``
    :param ground_truth: joint positions of the same shape
    :param success_rate: success rate to report alongside
    :return: every metric of the prediction
    """

    e_s, sigma_s = smoothness_error(predicted, ground_truth)
    return MetricsReport(
        mpjpe=mpjpe(predicted, ground_truth),
        pa_mpjpe=pa_mpjpe(predicted, ground_truth),
        e_s=e_s,
        sigma_s=sigma_s,
        e_fz=foot_z_error(predicted, ground_truth),
        success_rate=success_rate,
    )
