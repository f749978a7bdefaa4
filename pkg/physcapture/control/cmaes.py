"""
separable (diagonal covariance) CMA-ES with weighted recombination and bounded resampling
"""

from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
import logging
from os import PathLike
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import NamedTuple

import numpy
import pandas

from physcapture.character.const import JOINT_ROTATION_BOUNDS
from physcapture.control.losses import evaluate_states
from physcapture.control.losses import LossWeights
from physcapture.control.losses import TrackingFrame
from physcapture.physics.world import rollout_batch
from physcapture.physics.world import SimWorld
from physcapture.utilities import ROOT_DOF

BOUNDS_COLUMNS = ["min_x", "max_x", "min_y", "max_y", "min_z", "max_z"]


def joint_rotation_bounds(table: pandas.DataFrame = None) -> numpy.ndarray:
    """
    :param table: bounds per joint with columns ``min_x`` ... ``max_z``, defaults to the shipped table
    :return: lower and upper bound per target-pose coordinate ``(3 * joints, 2)``
    """

    if table is None:
        table = JOINT_ROTATION_BOUNDS
    values = table[BOUNDS_COLUMNS].to_numpy(dtype=float)
    return values.reshape(-1, 3, 2).reshape(-1, 2)


def read_bounds_file(path: PathLike) -> pandas.DataFrame:
    """
    :param path: CSV file with a ``joint`` column and ``min_x``, ``max_x``, ``min_y``, ``max_y``, ``min_z``,
        ``max_z`` in radians
    :return: bounds table indexed by joint
    """

    if not isinstance(path, Path):
        path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'bounds file "{path}" does not exist')
    table = pandas.read_csv(path).set_index("joint")
    missing = set(BOUNDS_COLUMNS) - set(table.columns)
    if len(missing) > 0:
        raise ValueError(f'bounds file "{path}" is missing columns "{sorted(missing)}"')
    return table[BOUNDS_COLUMNS]


def write_bounds_file(path: PathLike, table: pandas.DataFrame = None, overwrite: bool = False):
    if not isinstance(path, Path):
        path = Path(path)
    if path.exists() and not overwrite:
        logging.warning(f'skipping existing file "{path}"')
        return
    if table is None:
        table = JOINT_ROTATION_BOUNDS
    table[BOUNDS_COLUMNS].to_csv(path, index_label="joint")


@dataclass
class CmaConfig:
    population: int = 6
    generations: int = 30
    max_resample: int = 100
    dimension: int = 51
    initial_sigma: float = 0.1
    # ``None`` for an unbounded search
    bounds: numpy.ndarray = field(default_factory=joint_rotation_bounds)

    def __post_init__(self):
        if int(self.population) < 2:
            raise ValueError(f'population must be at least 2, not "{self.population}"')
        if int(self.generations) < 0:
            raise ValueError(f'generations must be non-negative, not "{self.generations}"')
        if int(self.max_resample) < 1:
            raise ValueError(f'resampling budget must be at least 1, not "{self.max_resample}"')
        if not self.initial_sigma > 0:
            raise ValueError(f'initial sigma must be positive, not "{self.initial_sigma}"')
        self.population = int(self.population)
        self.generations = int(self.generations)
        self.max_resample = int(self.max_resample)
        self.dimension = int(self.dimension)
        if self.bounds is not None:
            bounds = numpy.asarray(self.bounds, dtype=float)
            if bounds.shape != (self.dimension, 2):
                raise ValueError(
                    f'expected bounds of shape "{(self.dimension, 2)}", not "{bounds.shape}"'
                )
            if numpy.any(bounds[:, 0] > bounds[:, 1]):
                raise ValueError("lower bounds exceed upper bounds")
            self.bounds = bounds

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "CmaConfig":
        names = {field.name for field in fields(cls)} | {"bounds_file"}
        unknown = set(values) - names
        if len(unknown) > 0:
            raise ValueError(f'unknown CMA settings "{sorted(unknown)}"')
        values = dict(values)
        if "bounds_file" in values:
            values["bounds"] = joint_rotation_bounds(read_bounds_file(values.pop("bounds_file")))
        return cls(**values)


@dataclass
class PoseDistribution:
    """diagonal Gaussian over target poses"""

    mean: numpy.ndarray
    sigma: numpy.ndarray

    def __post_init__(self):
        self.mean = numpy.array(self.mean, dtype=float)
        self.sigma = numpy.broadcast_to(numpy.array(self.sigma, dtype=float), self.mean.shape).copy()
        if numpy.any(~(self.sigma > 0)):
            raise ValueError("distribution sigma must be positive")
        if not numpy.all(numpy.isfinite(self.mean)):
            raise ValueError("distribution mean is not finite")

    @property
    def dimension(self) -> int:
        return self.mean.shape[-1]


class ResampleResult(NamedTuple):
    samples: numpy.ndarray
    draws: numpy.ndarray
    accepted: numpy.ndarray


def _within(samples: numpy.ndarray, bounds: numpy.ndarray) -> numpy.ndarray:
    free = bounds[:, 0] < bounds[:, 1]
    inside = (samples >= bounds[:, 0]) & (samples <= bounds[:, 1])
    return numpy.all(inside | ~free, axis=-1)


def _clamp(samples: numpy.ndarray, bounds: numpy.ndarray) -> numpy.ndarray:
    return numpy.clip(samples, bounds[:, 0], bounds[:, 1])


def resample_bounded_batch(
    distribution: PoseDistribution,
    bounds: numpy.ndarray,
    rng: numpy.random.Generator,
    count: int,
    max_resample: int = 100,
) -> ResampleResult:
    """
    draw whole vectors from the diagonal Gaussian, redrawing rejected vectors up to ``max_resample`` times, then
    clamping; coordinates with equal lower and upper bound are pinned to it

    :param distribution: search distribution
    :param bounds: lower and upper bound per coordinate ``(n, 2)``, or ``None``
    :param rng: random generator
    :param count: number of samples
    :param max_resample: draws per sample before falling back to clamping
    :return: samples ``(count, n)``, draws per sample and whether the last draw was accepted
    """

    shape = (count, distribution.dimension)
    samples = distribution.mean + distribution.sigma * rng.standard_normal(shape)
    draws = numpy.ones(count, dtype=int)
    if bounds is None:
        return ResampleResult(samples, draws, numpy.ones(count, dtype=bool))

    bounds = numpy.asarray(bounds, dtype=float)
    accepted = _within(samples, bounds)
    for _ in range(max_resample - 1):
        rejected = numpy.flatnonzero(~accepted)
        if len(rejected) == 0:
            break
        samples[rejected] = distribution.mean + distribution.sigma * rng.standard_normal(
            (len(rejected), distribution.dimension)
        )
        draws[rejected] += 1
        accepted[rejected] = _within(samples[rejected], bounds)
    return ResampleResult(_clamp(samples, bounds), draws, accepted)


def resample_bounded(
    distribution: PoseDistribution,
    bounds: numpy.ndarray,
    rng: numpy.random.Generator,
    max_resample: int = 100,
) -> numpy.ndarray:
    """
    :param distribution: search distribution
    :param bounds: lower and upper bound per coordinate ``(n, 2)``
    :param rng: random generator
    :param max_resample: draws before falling back to clamping
    :return: one sample inside the bounds
    """

    return resample_bounded_batch(distribution, bounds, rng, 1, max_resample).samples[0]


class CmaResult(NamedTuple):
    distribution: PoseDistribution
    best_sample: numpy.ndarray
    best_value: float
    # best-so-far objective value after every generation
    trace: numpy.ndarray


def cma_optimize(
    objective: Callable[[numpy.ndarray], numpy.ndarray],
    init: PoseDistribution,
    config: CmaConfig = None,
    rng: numpy.random.Generator = None,
    vectorized: bool = True,
) -> CmaResult:
    """
    minimize with separable CMA-ES: log-rank recombination weights over the best half, cumulative step-size
    adaptation and rank-one plus rank-mu updates of the diagonal covariance

    :param objective: objective of a population ``(lambda, n)`` returning ``(lambda,)`` values, or of a single
        vector when ``vectorized`` is false; non-finite values rank last
    :param init: initial mean and per-coordinate step sizes
    :param config: population, generations and bounds
    :param rng: random generator
    :param vectorized: whether the objective takes a whole population
    :return: final distribution, best sample and best-so-far trace
    """

    if config is None:
        config = CmaConfig(dimension=init.dimension, bounds=None)
    if rng is None:
        rng = numpy.random.default_rng()
    dimension = init.dimension
    if dimension != config.dimension:
        raise ValueError(
            f'distribution dimension "{dimension}" does not match configured dimension "{config.dimension}"'
        )
    bounds = config.bounds

    population = config.population
    parents = int(numpy.ceil(population / 2))
    weights = numpy.log(parents + 0.5) - numpy.log(numpy.arange(1, parents + 1))
    weights /= weights.sum()
    effective = 1 / (weights**2).sum()

    cumulation_sigma = (effective + 2) / (dimension + effective + 5)
    damping = (
        1
        + 2 * max(0.0, numpy.sqrt((effective - 1) / (dimension + 1)) - 1)
        + cumulation_sigma
    )
    cumulation = (4 + effective / dimension) / (dimension + 4 + 2 * effective / dimension)
    rank_one = 2 / ((dimension + 1.3) ** 2 + effective)
    rank_mu = min(
        1 - rank_one,
        2 * (effective - 2 + 1 / effective) / ((dimension + 2) ** 2 + effective),
    )
    # diagonal learning rates scale with (n + 2) / 3
    separable = (dimension + 2) / 3
    rank_one = min(1.0, rank_one * separable)
    rank_mu = min(1 - rank_one, rank_mu * separable)
    expected_norm = numpy.sqrt(dimension) * (
        1 - 1 / (4 * dimension) + 1 / (21 * dimension**2)
    )

    mean = init.mean.copy()
    if bounds is not None:
        mean = _clamp(mean, bounds)
    step = float(numpy.max(init.sigma))
    variances = (init.sigma / step) ** 2
    path_sigma = numpy.zeros(dimension)
    path = numpy.zeros(dimension)

    best_sample = mean.copy()
    best_value = numpy.inf
    trace = []

    def evaluate(samples: numpy.ndarray) -> numpy.ndarray:
        if vectorized:
            values = numpy.asarray(objective(samples), dtype=float).reshape(len(samples))
        else:
            values = numpy.array([objective(sample) for sample in samples], dtype=float)
        return numpy.where(numpy.isfinite(values), values, numpy.inf)

    for generation in range(config.generations):
        deviations = numpy.sqrt(variances)
        search = PoseDistribution(mean, step * deviations)
        samples = resample_bounded_batch(
            search, bounds, rng, population, config.max_resample
        ).samples
        steps = (samples - mean) / step

        values = evaluate(samples)
        order = numpy.argsort(values, kind="stable")
        if values[order[0]] < best_value:
            best_value = float(values[order[0]])
            best_sample = samples[order[0]].copy()
        trace.append(best_value)

        selected = steps[order[:parents]]
        weighted = weights @ selected
        mean = mean + step * weighted

        path_sigma = (1 - cumulation_sigma) * path_sigma + numpy.sqrt(
            cumulation_sigma * (2 - cumulation_sigma) * effective
        ) * (weighted / deviations)
        norm = numpy.linalg.norm(path_sigma)
        heaviside = norm / numpy.sqrt(
            1 - (1 - cumulation_sigma) ** (2 * (generation + 1))
        ) < (1.4 + 2 / (dimension + 1)) * expected_norm
        path = (1 - cumulation) * path + heaviside * numpy.sqrt(
            cumulation * (2 - cumulation) * effective
        ) * weighted

        variances = (
            (1 - rank_one - rank_mu) * variances
            + rank_one
            * (path**2 + (1 - heaviside) * cumulation * (2 - cumulation) * variances)
            + rank_mu * (weights @ selected**2)
        )
        variances = numpy.maximum(variances, 1e-300)
        step *= numpy.exp((cumulation_sigma / damping) * (norm / expected_norm - 1))
        if bounds is not None:
            mean = _clamp(mean, bounds)

    sigma = numpy.maximum(step * numpy.sqrt(variances), numpy.finfo(float).tiny)
    return CmaResult(
        distribution=PoseDistribution(mean, sigma),
        best_sample=best_sample,
        best_value=best_value,
        trace=numpy.array(trace),
    )


def cma_track_frame(
    world: SimWorld,
    ref_pose: numpy.ndarray,
    config: CmaConfig = None,
    rng: numpy.random.Generator = None,
    reference: TrackingFrame = None,
    weights: LossWeights = None,
    fall_height: float = 0.3,
) -> CmaResult:
    """
    search the target pose whose rollout from the world best tracks the next reference frame

    :param world: single world at the start of the frame
    :param ref_pose: reference pose at the end of the rollout
    :param config: CMA settings; the dimension is the target-pose dimension
    :param rng: random generator
    :param reference: reference frame with velocity and observations, defaults to ``ref_pose`` at rest
    :param weights: loss weights
    :param fall_height: root height below which a sample fails
    :return: CMA result over target poses; diverged or fallen samples rank last
    """

    model = world.model
    if config is None:
        config = CmaConfig(dimension=model.target_dof)
    if world.batch_size != 1:
        raise ValueError(f'CMA tracking starts from a single world, not "{world.batch_size}"')
    ref_pose = numpy.asarray(ref_pose, dtype=float)
    if reference is None:
        reference = TrackingFrame(ref_pose, numpy.zeros(model.dof))

    def objective(targets: numpy.ndarray) -> numpy.ndarray:
        end = rollout_batch(world, targets)
        _, totals, _ = evaluate_states(
            model, end.pose, end.velocity, end.diverged, reference, weights, fall_height
        )
        return totals

    mean = ref_pose[ROOT_DOF:]
    if config.bounds is not None:
        mean = _clamp(mean, config.bounds)
    init = PoseDistribution(mean, numpy.full(model.target_dof, config.initial_sigma))
    return cma_optimize(objective, init, config, rng)


def write_distributions(
    path: PathLike, distributions: List[PoseDistribution], overwrite: bool = False
):
    """
    :param path: CSV output with ``frame``, ``coordinate``, ``mean`` and ``sigma`` columns
    :param distributions: one distribution per frame
    :param overwrite: whether to replace an existing file
    """

    if not isinstance(path, Path):
        path = Path(path)
    if path.exists() and not overwrite:
        logging.warning(f'skipping existing file "{path}"')
        return

    frames = numpy.repeat(numpy.arange(len(distributions)), [d.dimension for d in distributions])
    table = pandas.DataFrame(
        {
            "frame": frames,
            "coordinate": numpy.concatenate([numpy.arange(d.dimension) for d in distributions]),
            "mean": numpy.concatenate([d.mean for d in distributions]),
            "sigma": numpy.concatenate([d.sigma for d in distributions]),
        }
    )
    table.to_csv(path, index=False, float_format="%.17g")
