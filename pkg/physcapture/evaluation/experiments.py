"""
metric evaluation of captures and the success-rate experiment
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
import logging
from typing import List
from typing import Sequence

import numpy
import pandas
from tqdm import tqdm
import typepigeon

from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import forward_kinematics
from physcapture.control.cmaes import CmaConfig
from physcapture.control.losses import detect_failure
from physcapture.control.sampling import build_provider
from physcapture.control.sampling import capture_motion
from physcapture.control.sampling import CaptureResult
from physcapture.control.sampling import SamplerConfig
from physcapture.control.sampling import SamplingMode
from physcapture.evaluation.metrics import compute_metrics
from physcapture.evaluation.metrics import MetricsReport
from physcapture.evaluation.metrics import wilson_interval
from physcapture.evaluation.tasks import corrupt_motion
from physcapture.evaluation.tasks import synthesize_task
from physcapture.evaluation.tasks import SyntheticTask
from physcapture.evaluation.tasks import TaskName
from physcapture.physics.world import SimConfig

REPORT_COLUMNS = ["mode", "trials", "successes", "rate", "lower", "upper"]

DEFAULT_MODES = (
    SamplingMode.NEURAL_PRIOR,
    SamplingMode.CMA_BASELINE,
    SamplingMode.UNIFORM_BASELINE,
)


def ground_truth_joints(
    ground_truth: ReferenceMotion,
    timestamps: numpy.ndarray,
    model: CharacterModel = None,
) -> numpy.ndarray:
    """
    :param ground_truth: ground-truth motion
    :param timestamps: times to evaluate at, within the motion
    :param model: character of the ground truth, defaults to the built character at the motion scale
    :return: joint positions ``(frames, joints, 3)``
    """

    if model is None:
        model = build_character(ground_truth.scale)
    poses = numpy.stack([ground_truth.interpolate(time)[0] for time in timestamps])
    return forward_kinematics(model, poses)[0]


def evaluate_motion(
    predicted: ReferenceMotion,
    ground_truth: ReferenceMotion,
    model: CharacterModel = None,
    success_rate: float = numpy.nan,
) -> MetricsReport:
    """
    metrics of a motion against the ground truth at the predicted frame times

    :param predicted: predicted motion
    :param ground_truth: ground-truth motion
    :param model: character of the prediction, defaults to the built character at the prediction scale
    :param success_rate: success rate to report alongside
    :return: metrics report
    """

    if model is None:
        model = build_character(predicted.scale)
    joints = forward_kinematics(model, predicted.poses)[0]
    truth = ground_truth_joints(ground_truth, predicted.timestamps)
    return compute_metrics(joints, truth, success_rate)


def evaluate_capture(result: CaptureResult, ground_truth: ReferenceMotion) -> MetricsReport:
    """
    :param result: capture result
    :param ground_truth: ground-truth motion
    :return: metrics of the captured trajectory, with success rate 1 or 0
    """

    if len(result) < 2:
        raise ValueError("capture has fewer than two frames to evaluate")
    truth = ground_truth_joints(ground_truth, result.timestamps)
    return compute_metrics(result.joints, truth, float(result.success))


def capture_succeeded(result: CaptureResult, fall_height: float = 0.3) -> bool:
    """
    :return: whether the capture reached the last frame without a failed state on its trajectory
    """

    if not result.success:
        return False
    return not bool(numpy.any(detect_failure(result.poses, fall_height=fall_height)))


def success_report(outcomes: dict) -> pandas.DataFrame:
    """
    :param outcomes: success flags per mode
    :return: success count, rate and Wilson interval per mode
    """

    rows = []
    for mode, flags in outcomes.items():
        trials = len(flags)
        if trials == 0:
            continue
        successes = int(numpy.sum(flags))
        lower, upper = wilson_interval(successes, trials)
        rows.append([mode, trials, successes, successes / trials, lower, upper])
    return pandas.DataFrame(rows, columns=REPORT_COLUMNS)


def run_success_experiment(
    task: SyntheticTask = TaskName.LIFT_LEG,
    modes: Sequence[SamplingMode] = DEFAULT_MODES,
    trials: int = 30,
    seed: int = 0,
    prior=None,
    sampler_config: SamplerConfig = None,
    cma_config: CmaConfig = None,
    sim_config: SimConfig = None,
    reference_noise: float = 0.02,
    threads: int = 1,
    progress: bool = True,
) -> pandas.DataFrame:
    """
    capture the same task ``trials`` times per sampling mode; trial ``i`` tracks the ground truth corrupted with seed
    ``seed + i`` and samples with that seed, so every mode sees the same references

    :param task: task or task name
    :param modes: sampling modes to compare
    :param trials: captures per mode
    :param seed: base seed
    :param prior: trained distribution prior, required by the neural-prior mode
    :param sampler_config: sampler settings shared by every mode
    :param cma_config: settings of the CMA baseline
    :param sim_config: simulator settings
    :param reference_noise: noise of the references in radians
    :param threads: trials run concurrently
    :param progress: show a progress bar
    :return: success count, rate and Wilson interval per mode; empty without trials
    """

    if trials < 0:
        raise ValueError(f'trials must be non-negative, not "{trials}"')
    modes = [typepigeon.convert_value(mode, SamplingMode) for mode in modes]
    if trials == 0 or len(modes) == 0:
        return pandas.DataFrame(columns=REPORT_COLUMNS)
    if not isinstance(task, SyntheticTask):
        task = SyntheticTask(task)
    if sampler_config is None:
        sampler_config = SamplerConfig()

    model = build_character()
    ground_truth, observations = synthesize_task(task, seed=seed, model=model, sim_config=sim_config)
    references = [
        corrupt_motion(ground_truth, noise=reference_noise, seed=seed + trial)
        for trial in range(trials)
    ]

    outcomes = {}
    for mode in modes:
        config = replace(sampler_config, mode=mode, progress=False)
        provider = build_provider(config, prior=prior, cma_config=cma_config)

        def trial_outcome(trial: int) -> bool:
            result = capture_motion(
                references[trial],
                observations,
                scene=task.scene(),
                provider=provider,
                config=replace(config, seed=seed + trial),
                model=model,
                sim_config=sim_config,
            )
            return capture_succeeded(result, config.fall_height)

        bar = tqdm(total=trials, desc=f"{mode.value} trials", disable=not progress)
        flags: List[bool] = []
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                for flag in executor.map(trial_outcome, range(trials)):
                    flags.append(flag)
                    bar.update()
        else:
            for trial in range(trials):
                flags.append(trial_outcome(trial))
                bar.update()
        bar.close()

        outcomes[mode.value] = flags
        logging.info(f'mode "{mode.value}" succeeded in "{sum(flags)}" of "{trials}" trials')

    return success_report(outcomes)
