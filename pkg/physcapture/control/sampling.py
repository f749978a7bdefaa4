"""
sampling-based motion control: every frame draws target poses around the reference from a provider distribution,
simulates them from the saved start states and keeps the lowest-loss results as the next start states
"""

from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from enum import Enum
import logging
from os import PathLike
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Tuple

import numpy
import pandas
from tqdm import tqdm
import typepigeon
import xarray

from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import forward_kinematics
from physcapture.control.cmaes import cma_track_frame
from physcapture.control.cmaes import CmaConfig
from physcapture.control.cmaes import joint_rotation_bounds
from physcapture.control.losses import COMPONENTS
from physcapture.control.losses import evaluate_states
from physcapture.control.losses import LossWeights
from physcapture.control.losses import TrackingFrame
from physcapture.kinematic.camera import ObservationSequence
from physcapture.physics.scene import SceneGeometry
from physcapture.physics.world import rollout_batch
from physcapture.physics.world import rollout_target
from physcapture.physics.world import SimConfig
from physcapture.physics.world import SimWorld
from physcapture.utilities import ROOT_DOF
from physcapture.utilities import sample_generator

# tolerance between the sampling interval and the simulated control interval, in seconds
INTERVAL_TOLERANCE = 1e-9


class SamplingMode(Enum):
    NEURAL_PRIOR = "neural-prior"
    CMA_BASELINE = "cma-baseline"
    UNIFORM_BASELINE = "uniform-baseline"
    GAUSSIAN_FIXED = "gaussian-fixed"
    DELTA = "delta"


class FrameFailureError(RuntimeError):
    """every sample of a frame failed"""

    def __init__(self, frame: int, samples: int):
        super().__init__(f'all "{samples}" samples of frame "{frame}" failed')
        self.frame = frame


@dataclass
class SamplerConfig:
    samples: int = 1000
    keep: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    fall_height: float = 0.3
    mode: SamplingMode = SamplingMode.NEURAL_PRIOR
    max_attempts: int = 1
    seed: int = 0
    frame_rate: float = 30.0
    progress: bool = True
    # half width of the uniform baseline around the reference, in radians
    uniform_width: float = 0.1
    # standard deviation of the fixed Gaussian baseline, in radians
    gaussian_sigma: float = 0.05

    def __post_init__(self):
        self.mode = typepigeon.convert_value(self.mode, SamplingMode)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.samples = int(self.samples)
        self.keep = int(self.keep)
        if not self.samples >= self.keep >= 1:
            raise ValueError(
                f'expected samples >= saved samples >= 1, not "{self.samples}" and "{self.keep}"'
            )
        if self.samples % self.keep != 0:
            raise ValueError(
                f'samples "{self.samples}" must split evenly over "{self.keep}" saved samples'
            )
        if int(self.max_attempts) < 1:
            raise ValueError(f'attempts must be at least 1, not "{self.max_attempts}"')
        if not self.frame_rate > 0:
            raise ValueError(f'frame rate must be positive, not "{self.frame_rate}"')
        if self.uniform_width < 0 or self.gaussian_sigma < 0:
            raise ValueError("baseline widths must be non-negative")
        self.max_attempts = int(self.max_attempts)

    @property
    def samples_per_state(self) -> int:
        return self.samples // self.keep

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SamplerConfig":
        names = {field.name for field in fields(cls)}
        unknown = set(values) - names
        if len(unknown) > 0:
            raise ValueError(f'unknown sampler settings "{sorted(unknown)}"')
        return cls(**values)


class SampleProvider:
    """
    source of target-pose distributions for the saved start states of a frame; targets are drawn with one generator
    per sample derived from ``(seed, frame, sample index)``
    """

    def __init__(self, bounds: numpy.ndarray = None):
        self.bounds = None if bounds is None else numpy.asarray(bounds, dtype=float)

    def distributions(
        self, world: SimWorld, reference: TrackingFrame, frame: int, seed: int
    ) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """
        :param world: saved start states ``(K,)``
        :param reference: reference frame at the end of the sampling interval
        :param frame: frame index
        :param seed: capture seed
        :return: mean and standard deviation of the target pose per start state, each ``(K, 3 * movable)``
        """

        raise NotImplementedError

    def draw(self, mean: numpy.ndarray, sigma: numpy.ndarray, rng: numpy.random.Generator) -> numpy.ndarray:
        return mean + sigma * rng.standard_normal(mean.shape)

    def sample(
        self,
        world: SimWorld,
        reference: TrackingFrame,
        frame: int,
        per_state: int,
        seed: int,
    ) -> numpy.ndarray:
        """
        :return: target poses ``(K * per_state, 3 * movable)``, grouped by start state
        """

        means, sigmas = self.distributions(world, reference, frame, seed)
        targets = numpy.empty((len(means) * per_state, means.shape[1]))
        for index in range(len(targets)):
            state = index // per_state
            targets[index] = self.draw(
                means[state], sigmas[state], sample_generator(seed, frame, index)
            )
        if self.bounds is not None:
            targets = numpy.clip(targets, self.bounds[:, 0], self.bounds[:, 1])
        return targets

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}()"


def _reference_targets(world: SimWorld, reference: TrackingFrame) -> numpy.ndarray:
    return numpy.broadcast_to(
        numpy.asarray(reference.pose, dtype=float)[ROOT_DOF:],
        (world.batch_size, world.model.target_dof),
    ).copy()


class DeltaProvider(SampleProvider):
    """every sample is the reference joint pose"""

    def distributions(self, world, reference, frame, seed):
        means = _reference_targets(world, reference)
        return means, numpy.zeros(means.shape)


class GaussianFixedProvider(SampleProvider):
    def __init__(self, sigma: float = 0.05, bounds: numpy.ndarray = None):
        super().__init__(bounds)
        self.sigma = float(sigma)

    def distributions(self, world, reference, frame, seed):
        means = _reference_targets(world, reference)
        return means, numpy.full(means.shape, self.sigma)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(sigma={self.sigma!r})"


class UniformProvider(SampleProvider):
    """uniform box of half width ``width`` around the reference joint pose"""

    def __init__(self, width: float = 0.1, bounds: numpy.ndarray = None):
        super().__init__(bounds)
        self.width = float(width)

    def distributions(self, world, reference, frame, seed):
        means = _reference_targets(world, reference)
        return means, numpy.full(means.shape, self.width)

    def draw(self, mean, sigma, rng):
        return mean + rng.uniform(-1.0, 1.0, mean.shape) * sigma

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(width={self.width!r})"


class NeuralPriorProvider(SampleProvider):
    """
    learned correction distribution; ``prior.correction(pose, velocity, ref_pose)`` returns the mean and standard
    deviation of the correction added to the reference joint pose
    """

    def __init__(self, prior, bounds: numpy.ndarray = None):
        super().__init__(bounds)
        self.prior = prior

    def distributions(self, world, reference, frame, seed):
        ref_pose = numpy.broadcast_to(
            numpy.asarray(reference.pose, dtype=float), world.pose.shape
        )
        mean, sigma = self.prior.correction(world.pose, world.velocity, ref_pose)
        return _reference_targets(world, reference) + mean, sigma

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.prior!r})"


class CmaProvider(SampleProvider):
    """
    distribution found by CMA-ES from the best saved state, shared by every start state of the frame
    """

    def __init__(
        self,
        config: CmaConfig = None,
        weights: LossWeights = None,
        fall_height: float = 0.3,
        bounds: numpy.ndarray = None,
    ):
        super().__init__(bounds)
        self.config = config
        self.weights = weights
        self.fall_height = fall_height

    def distributions(self, world, reference, frame, seed):
        # generator keys of a different length than the per-sample keys
        rng = sample_generator(seed, frame, 0, 0)
        result = cma_track_frame(
            world.select([0]),
            reference.pose,
            self.config,
            rng,
            reference,
            self.weights,
            self.fall_height,
        )
        distribution = result.distribution
        count = world.batch_size
        return (
            numpy.tile(distribution.mean, (count, 1)),
            numpy.tile(distribution.sigma, (count, 1)),
        )

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.config!r})"


def build_provider(
    config: SamplerConfig,
    prior=None,
    cma_config: CmaConfig = None,
    bounds: numpy.ndarray = None,
) -> SampleProvider:
    """
    :param config: sampler settings
    :param prior: trained distribution prior, required by the neural-prior mode
    :param cma_config: CMA settings of the CMA baseline
    :param bounds: target-pose bounds, defaults to the joint rotation bounds
    :return: provider of the configured mode
    """

    if bounds is None:
        bounds = joint_rotation_bounds()
    if config.mode == SamplingMode.NEURAL_PRIOR:
        if prior is None:
            raise ValueError("neural-prior sampling needs a trained prior")
        return NeuralPriorProvider(prior, bounds)
    elif config.mode == SamplingMode.CMA_BASELINE:
        return CmaProvider(cma_config, config.weights, config.fall_height, bounds)
    elif config.mode == SamplingMode.UNIFORM_BASELINE:
        return UniformProvider(config.uniform_width, bounds)
    elif config.mode == SamplingMode.GAUSSIAN_FIXED:
        return GaussianFixedProvider(config.gaussian_sigma, bounds)
    elif config.mode == SamplingMode.DELTA:
        return DeltaProvider()
    else:
        raise NotImplementedError(f'sampling mode "{config.mode}" not implemented')


class SampleRecord(NamedTuple):
    parent: int
    target: numpy.ndarray
    pose: numpy.ndarray
    velocity: numpy.ndarray
    components: numpy.ndarray
    total: float


@dataclass
class SampleBeam:
    """
    saved samples of one frame sorted by ascending total loss; ``parents`` index the previous beam
    """

    frame: int
    world: SimWorld
    parents: numpy.ndarray
    targets: numpy.ndarray
    components: numpy.ndarray
    totals: numpy.ndarray
    evaluated: int = 0
    failures: int = 0

    @classmethod
    def initial(cls, world: SimWorld, keep: int) -> "SampleBeam":
        """
        :param world: single world at the first frame
        :param keep: beam size
        :return: beam of ``keep`` copies of the start state
        """

        if world.batch_size != 1:
            world = world.select([0])
        return cls(
            frame=0,
            world=world.replicate(keep),
            parents=numpy.full(keep, -1),
            targets=numpy.full((keep, world.model.target_dof), numpy.nan),
            components=numpy.zeros((keep, len(COMPONENTS))),
            totals=numpy.zeros(keep),
        )

    @property
    def size(self) -> int:
        return len(self.totals)

    def records(self) -> List[SampleRecord]:
        return [
            SampleRecord(
                int(self.parents[index]),
                self.targets[index],
                self.world.pose[index],
                self.world.velocity[index],
                self.components[index],
                float(self.totals[index]),
            )
            for index in range(self.size)
        ]

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(frame={self.frame}, size={self.size}, best={float(self.totals[0])!r})"


def tracking_frame(
    motion: ReferenceMotion,
    index: int,
    observations: ObservationSequence = None,
) -> TrackingFrame:
    """
    :param motion: reference motion at the sampling rate
    :param index: frame index
    :param observations: 2D observations, matched to the frame by time
    :return: reference of one frame
    """

    keypoints = confidences = camera = None
    if observations is not None:
        time = motion.timestamps[index] - motion.timestamps[0]
        observed = int(round(time * observations.frame_rate))
        if 0 <= observed < len(observations):
            keypoints = observations.keypoints[observed]
            confidences = observations.confidences[observed]
            camera = observations.camera
    return TrackingFrame(
        motion.poses[index], motion.velocities[index], keypoints, confidences, camera
    )


def capture_frame(
    beam: SampleBeam,
    reference: TrackingFrame,
    provider: SampleProvider,
    config: SamplerConfig = None,
    seed: int = None,
) -> SampleBeam:
    """
    sample ``N / K`` target poses per saved state, roll every one out over one sampling interval and keep the ``K``
    lowest-loss results; when fewer than ``K`` samples survive, the survivors are repeated in loss order

    :param beam: saved states of the previous frame
    :param reference: reference and observations at the end of the interval
    :param provider: target-pose distribution
    :param config: sampler settings
    :param seed: sampling seed, defaults to the configured seed
    :return: beam of the next frame
    """

    if config is None:
        config = SamplerConfig()
    if seed is None:
        seed = config.seed
    if beam.size != config.keep:
        raise ValueError(f'expected a beam of "{config.keep}" states, not "{beam.size}"')

    frame = beam.frame + 1
    per_state = config.samples_per_state
    targets = provider.sample(beam.world, reference, frame, per_state, seed)
    parents = numpy.repeat(numpy.arange(beam.size), per_state)

    end = rollout_batch(beam.world.select(parents), targets)
    components, totals, failed = evaluate_states(
        end.model,
        end.pose,
        end.velocity,
        end.diverged,
        reference,
        config.weights,
        config.fall_height,
    )

    order = numpy.argsort(totals, kind="stable")
    survivors = order[~failed[order]]
    if len(survivors) == 0:
        raise FrameFailureError(frame, len(targets))
    keep = survivors[: config.keep]
    if len(keep) < config.keep:
        logging.debug(f'frame "{frame}" kept only "{len(keep)}" valid samples')
        keep = keep[numpy.arange(config.keep) * len(keep) // config.keep]

    logging.debug(
        f'frame "{frame}": best loss "{totals[keep[0]]:.6g}", "{int(failed.sum())}" of "{len(targets)}" samples failed'
    )
    return SampleBeam(
        frame=frame,
        world=end.select(keep),
        parents=parents[keep],
        targets=targets[keep],
        components=components[keep],
        totals=totals[keep],
        evaluated=len(targets),
        failures=int(failed.sum()),
    )


class CaptureResult:
    """
    best path through the saved samples of a capture, from the first frame to the last captured frame
    """

    def __init__(
        self,
        model: CharacterModel,
        timestamps: numpy.ndarray,
        poses: numpy.ndarray,
        velocities: numpy.ndarray,
        targets: numpy.ndarray,
        components: numpy.ndarray,
        totals: numpy.ndarray,
        success: bool,
        frame_rate: float,
        failed_frame: int = None,
        seed: int = 0,
    ):
        self.__model = model
        self.__timestamps = numpy.asarray(timestamps, dtype=float)
        self.__poses = numpy.asarray(poses, dtype=float)
        self.__velocities = numpy.asarray(velocities, dtype=float)
        self.__targets = numpy.asarray(targets, dtype=float)
        self.__components = numpy.asarray(components, dtype=float)
        self.__totals = numpy.asarray(totals, dtype=float)
        self.__success = bool(success)
        self.__frame_rate = float(frame_rate)
        self.__failed_frame = failed_frame
        self.__seed = int(seed)
        self.__joints = None

    @property
    def model(self) -> CharacterModel:
        return self.__model

    @property
    def timestamps(self) -> numpy.ndarray:
        return self.__timestamps

    @property
    def poses(self) -> numpy.ndarray:
        return self.__poses

    @property
    def velocities(self) -> numpy.ndarray:
        return self.__velocities

    @property
    def targets(self) -> numpy.ndarray:
        """
        target pose adopted for every sampling interval, ``(frames - 1, 3 * movable)``
        """

        return self.__targets

    @property
    def success(self) -> bool:
        return self.__success

    @property
    def failed_frame(self) -> int:
        return self.__failed_frame

    @property
    def frame_rate(self) -> float:
        return self.__frame_rate

    @property
    def seed(self) -> int:
        return self.__seed

    @property
    def losses(self) -> pandas.DataFrame:
        """
        loss components and total per captured frame after the first
        """

        data = pandas.DataFrame(self.__components, columns=list(COMPONENTS))
        data["total"] = self.__totals
        data.index = pandas.Index(numpy.arange(1, len(data) + 1), name="frame")
        data.insert(0, "time", self.__timestamps[1 : len(data) + 1])
        return data

    @property
    def joints(self) -> numpy.ndarray:
        """
        joint positions of the captured trajectory ``(frames, joints, 3)``
        """

        if self.__joints is None:
            self.__joints = forward_kinematics(self.__model, self.__poses)[0]
        return self.__joints

    @property
    def motion(self) -> ReferenceMotion:
        return ReferenceMotion(
            self.__timestamps, self.__poses, self.__frame_rate, self.__model.scale
        )

    @property
    def data(self) -> xarray.Dataset:
        frames = numpy.arange(len(self.__timestamps))
        losses = numpy.full((len(frames), len(COMPONENTS) + 1), numpy.nan)
        losses[1 : len(self.__totals) + 1] = numpy.concatenate(
            [self.__components, self.__totals[:, None]], axis=1
        )
        targets = numpy.full((len(frames), self.__model.target_dof), numpy.nan)
        targets[1 : len(self.__targets) + 1] = self.__targets
        return xarray.Dataset(
            {
                "pose": (("frame", "dof"), self.__poses),
                "velocity": (("frame", "dof"), self.__velocities),
                "target": (("frame", "target_dof"), targets),
                "joints": (("frame", "joint", "axis"), self.joints),
                "loss": (("frame", "component"), losses),
            },
            coords={
                "frame": frames,
                "time": ("frame", self.__timestamps),
                "joint": list(self.__model.names[1:]),
                "axis": ["x", "y", "z"],
                "component": list(COMPONENTS) + ["total"],
            },
            attrs={
                "frame_rate": self.__frame_rate,
                "success": int(self.__success),
                "seed": self.__seed,
            },
        )

    def to_file(self, path: PathLike, overwrite: bool = False):
        """
        write the captured trajectory; ``.motion`` writes the poses in the motion-file format, ``.csv`` the per-frame
        losses and ``.nc`` the whole result, velocities included, as netCDF

        :param path: output file
        :param overwrite: overwrite existing file
        """

        if not isinstance(path, Path):
            path = Path(path)
        if path.exists() and not overwrite:
            logging.warning(f'skipping existing file "{path}"')
            return

        if path.suffix == ".motion":
            self.motion.to_file(path, overwrite=True)
        elif path.suffix == ".csv":
            self.losses.to_csv(path, float_format="%.17g")
        elif path.suffix == ".nc":
            self.data.to_netcdf(path)
        else:
            raise NotImplementedError(f'writing to "{path.suffix}" not supported')

    def __len__(self) -> int:
        return len(self.__timestamps)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(frames={len(self)}, success={self.__success}, failed_frame={self.__failed_frame!r})"


def backtrack(beams: List[SampleBeam], index: int = 0) -> List[int]:
    """
    :param beams: beams of consecutive frames, starting with the initial beam
    :param index: saved sample of the last beam to start from
    :return: saved-sample index per frame along the parent links
    """

    path = [index]
    for beam in reversed(beams[1:]):
        index = int(beam.parents[index])
        path.append(index)
    return path[::-1]


def _capture_attempt(
    motion: ReferenceMotion,
    observations: ObservationSequence,
    world: SimWorld,
    provider: SampleProvider,
    config: SamplerConfig,
    seed: int,
) -> CaptureResult:
    beams = [SampleBeam.initial(world, config.keep)]
    failed_frame = None
    frames = tqdm(
        range(1, len(motion)),
        desc=f"capture (seed {seed})",
        disable=not config.progress,
        leave=False,
    )
    for index in frames:
        reference = tracking_frame(motion, index, observations)
        try:
            beams.append(capture_frame(beams[-1], reference, provider, config, seed))
        except FrameFailureError as error:
            logging.warning(f"{error}; stopping capture")
            failed_frame = error.frame
            break

    path = backtrack(beams)
    chosen = [beam.world.select([index]) for beam, index in zip(beams, path)]
    return CaptureResult(
        model=world.model,
        timestamps=motion.timestamps[: len(beams)],
        poses=numpy.concatenate([state.pose for state in chosen]),
        velocities=numpy.concatenate([state.velocity for state in chosen]),
        targets=numpy.array(
            [beam.targets[index] for beam, index in zip(beams[1:], path[1:])]
        ).reshape(-1, world.model.target_dof),
        components=numpy.array(
            [beam.components[index] for beam, index in zip(beams[1:], path[1:])]
        ).reshape(-1, len(COMPONENTS)),
        totals=numpy.array(
            [beam.totals[index] for beam, index in zip(beams[1:], path[1:])]
        ),
        success=failed_frame is None,
        frame_rate=config.frame_rate,
        failed_frame=failed_frame,
        seed=seed,
    )


def capture_motion(
    motion: ReferenceMotion,
    observations: ObservationSequence = None,
    scene: SceneGeometry = None,
    provider: SampleProvider = None,
    config: SamplerConfig = None,
    model: CharacterModel = None,
    sim_config: SimConfig = None,
) -> CaptureResult:
    """
    track a reference motion with sampling-based control; the character starts at the first reference frame and the
    final trajectory follows the parent links back from the lowest-loss sample of the last frame

    a failed attempt is retried with a new seed up to ``max_attempts`` times; the last attempt is returned even when it
    failed

    :param motion: reference motion, resampled to the sampling rate
    :param observations: 2D observations for the reprojection loss
    :param scene: scene geometry, defaults to flat ground
    :param provider: target-pose distribution, defaults to the configured mode
    :param config: sampler settings
    :param model: character, defaults to the built character at the motion scale
    :param sim_config: simulator settings; the control interval must equal one sampling interval
    :return: captured trajectory
    """

    if config is None:
        config = SamplerConfig()
    if sim_config is None:
        sim_config = SimConfig()
    if model is None:
        model = build_character(motion.scale)
    if provider is None:
        provider = build_provider(config)
    if abs(sim_config.control_interval - 1 / config.frame_rate) > INTERVAL_TOLERANCE:
        raise ValueError(
            f'control interval "{sim_config.control_interval}" does not match sampling interval "{1 / config.frame_rate}"'
        )
    if motion.dof != model.dof:
        raise ValueError(f'motion has "{motion.dof}" coordinates, not "{model.dof}"')
    if observations is not None:
        observations.check_model(model)

    if len(motion) < 2 or abs(motion.frame_rate - config.frame_rate) > INTERVAL_TOLERANCE:
        motion = motion.resample(config.frame_rate)
    if len(motion) < 2:
        raise ValueError("capture needs a motion of at least two frames")

    world = SimWorld(
        model,
        motion.poses[0],
        motion.velocities[0],
        scene=scene,
        config=sim_config,
        rng_seed=config.seed,
        time=float(motion.timestamps[0]),
    )

    result = None
    for attempt in range(config.max_attempts):
        seed = config.seed + attempt
        result = _capture_attempt(motion, observations, world, provider, config, seed)
        if result.success:
            break
        logging.info(
            f'capture attempt "{attempt + 1}" of "{config.max_attempts}" failed at frame "{result.failed_frame}"'
        )
    return result


def replay_capture(
    result: CaptureResult, scene: SceneGeometry = None, sim_config: SimConfig = None
) -> numpy.ndarray:
    """
    re-simulate the adopted target poses from the first captured state

    :param result: capture result
    :param scene: scene geometry of the capture
    :param sim_config: simulator settings of the capture
    :return: simulated poses per frame ``(frames, dof)``
    """

    world = SimWorld(
        result.model,
        result.poses[0],
        result.velocities[0],
        scene=scene,
        config=sim_config,
        time=float(result.timestamps[0]),
    )
    poses = [world.pose[0]]
    for target in result.targets:
        world, _ = rollout_target(world, target, raise_on_divergence=False)
        poses.append(world.pose[0])
    return numpy.stack(poses)
