"""
learned target-pose distribution: an encoder regressing a diagonal Gaussian over joint corrections from the character
state and the reference pose, a pose decoder imitating the simulator, training data from CMA-ES pseudo ground truth and
the two-branch training procedure
"""

from dataclasses import dataclass
from dataclasses import fields
import logging
from os import PathLike
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Tuple
from typing import Union

import numpy
import pandas
from tqdm import tqdm

from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import CharacterState
from physcapture.character.skeleton import link_transforms
from physcapture.character.skeleton import pose_jacobian
from physcapture.control.cmaes import cma_track_frame
from physcapture.control.cmaes import CmaConfig
from physcapture.control.cmaes import joint_rotation_bounds
from physcapture.control.cmaes import PoseDistribution
from physcapture.control.losses import evaluate_states
from physcapture.control.losses import LossWeights
from physcapture.control.losses import TrackingFrame
from physcapture.physics.scene import SceneGeometry
from physcapture.physics.world import rollout_batch
from physcapture.physics.world import SimConfig
from physcapture.physics.world import SimWorld
from physcapture.prior.net import AdamWConfig
from physcapture.prior.net import adamw_step
from physcapture.prior.net import AdamWState
from physcapture.prior.net import ForwardCache
from physcapture.prior.net import kl_diag_gaussian
from physcapture.prior.net import kl_diag_gaussian_gradient
from physcapture.prior.net import load_checkpoint
from physcapture.prior.net import Mlp
from physcapture.prior.net import MlpSpec
from physcapture.prior.net import NetworkMode
from physcapture.prior.net import NonFiniteLossError
from physcapture.prior.net import reparam_sample
from physcapture.prior.net import save_checkpoint
from physcapture.utilities import as_batch
from physcapture.utilities import pose_difference
from physcapture.utilities import relative_rotation_vectors
from physcapture.utilities import ROOT_DOF
from physcapture.utilities import rotation_matrices
from physcapture.utilities import sample_generator

LOG_SIGMA_LIMITS = (-5.0, 2.0)

DATASET_MAGIC = b"PCDS"
DATASET_VERSION = 1
DATASET_HEADER_DTYPE = numpy.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("count", "<u4"),
        ("state", "<u4"),
        ("pose", "<u4"),
        ("target", "<u4"),
    ]
)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    lambda_kl: float = 0.2
    # coefficient of the squared-weight penalty
    regularization: float = 1e-5
    # decoupled AdamW decay
    weight_decay: float = 0.01
    pretrain_epochs: int = 100
    two_branch_epochs: int = 20
    pairs: int = 200
    noise_position: float = 0.01
    noise_rotation: float = 0.02
    noise_velocity: float = 0.1
    validation_fraction: float = 0.1
    encoder_width: int = 512
    decoder_width: int = 256
    # relative increase of the held-out decoder losses that stops two-branch training
    early_stop_tolerance: float = 0.1
    sampling_samples: int = 100
    seed: int = 0
    progress: bool = True
    checkpoint: str = None

    def __post_init__(self):
        if not 0 <= self.lambda_kl <= 1:
            raise ValueError(f'KL weight must lie in [0, 1], not "{self.lambda_kl}"')
        if int(self.batch_size) < 1:
            raise ValueError(f'batch size must be at least 1, not "{self.batch_size}"')
        if not self.learning_rate > 0:
            raise ValueError(f'learning rate must be positive, not "{self.learning_rate}"')
        if min(self.noise_position, self.noise_rotation, self.noise_velocity) < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(
                f'validation fraction must lie in [0, 1), not "{self.validation_fraction}"'
            )
        self.batch_size = int(self.batch_size)
        self.pretrain_epochs = int(self.pretrain_epochs)
        self.two_branch_epochs = int(self.two_branch_epochs)
        self.pairs = int(self.pairs)

    @property
    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        names = {field.name for field in fields(cls)}
        unknown = set(values) - names
        if len(unknown) > 0:
            raise ValueError(f'unknown training settings "{sorted(unknown)}"')
        return cls(**values)


def state_features(pose: numpy.ndarray, velocity: numpy.ndarray) -> numpy.ndarray:
    """
    :return: ``[pose, velocity]`` with the horizontal root position removed
    """

    pose = numpy.array(pose, dtype=float)
    pose[..., :2] = 0.0
    return numpy.concatenate([pose, numpy.asarray(velocity, dtype=float)], axis=-1)


def reference_features(pose: numpy.ndarray, ref_pose: numpy.ndarray) -> numpy.ndarray:
    """
    :return: reference pose with root translation and rotation expressed in the character root frame
    """

    pose = numpy.asarray(pose, dtype=float)
    ref_pose = numpy.asarray(ref_pose, dtype=float)
    rotation = rotation_matrices(pose[..., 3:6])
    translation = (
        numpy.swapaxes(rotation, -1, -2) @ (ref_pose[..., :3] - pose[..., :3])[..., None]
    )[..., 0]
    root = relative_rotation_vectors(ref_pose[..., 3:6], pose[..., 3:6])
    return numpy.concatenate([translation, root, ref_pose[..., ROOT_DOF:]], axis=-1)


def encoder_features(
    pose: numpy.ndarray, velocity: numpy.ndarray, ref_pose: numpy.ndarray
) -> numpy.ndarray:
    ref_pose = numpy.broadcast_to(numpy.asarray(ref_pose, dtype=float), numpy.shape(pose))
    return numpy.concatenate(
        [state_features(pose, velocity), reference_features(pose, ref_pose)], axis=-1
    )


class EncoderOutput(NamedTuple):
    mean: numpy.ndarray
    log_sigma: numpy.ndarray
    # log-sigma strictly inside its clamp interval
    inside: numpy.ndarray
    cache: ForwardCache

    @property
    def sigma(self) -> numpy.ndarray:
        return numpy.exp(self.log_sigma)


class DistributionEncoder:
    """
    six fully-connected layers from ``[state, reference features]`` to the mean and clamped log standard deviation of
    the target-pose correction
    """

    def __init__(
        self,
        dof: int = 57,
        target_dof: int = 51,
        width: int = 512,
        layers: int = 6,
        rng: numpy.random.Generator = None,
        network: Mlp = None,
    ):
        input_width = 3 * dof
        if network is None:
            spec = MlpSpec.chain(input_width, [width] * (layers - 1) + [2 * target_dof])
            network = Mlp(spec, rng)
        if network.spec.input_width != input_width or network.spec.output_width != 2 * target_dof:
            raise ValueError(f'network "{network}" does not map "{input_width}" to "{2 * target_dof}" features')
        self.network = network
        self.dof = dof
        self.target_dof = target_dof

    def forward(
        self,
        pose: numpy.ndarray,
        velocity: numpy.ndarray,
        ref_pose: numpy.ndarray,
        mode: NetworkMode = NetworkMode.EVAL,
    ) -> EncoderOutput:
        pose, _ = as_batch(pose, self.dof)
        velocity, _ = as_batch(velocity, self.dof)
        outputs, cache = self.network.forward(encoder_features(pose, velocity, ref_pose), mode)
        mean = outputs[:, : self.target_dof]
        raw = outputs[:, self.target_dof :]
        log_sigma = numpy.clip(raw, *LOG_SIGMA_LIMITS)
        inside = (raw > LOG_SIGMA_LIMITS[0]) & (raw < LOG_SIGMA_LIMITS[1])
        return EncoderOutput(mean, log_sigma, inside, cache)

    def backward(
        self,
        output: EncoderOutput,
        mean_gradient: numpy.ndarray,
        log_sigma_gradient: numpy.ndarray,
    ) -> Dict[str, numpy.ndarray]:
        gradient = numpy.concatenate(
            [mean_gradient, numpy.where(output.inside, log_sigma_gradient, 0.0)], axis=1
        )
        return self.network.backward(output.cache, gradient)[0]

    def __call__(
        self, pose: numpy.ndarray, velocity: numpy.ndarray, ref_pose: numpy.ndarray
    ) -> Tuple[numpy.ndarray, numpy.ndarray]:
        output = self.forward(pose, velocity, ref_pose)
        return output.mean, output.sigma

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.network!r})"


class PoseDecoder:
    """
    four fully-connected layers predicting the simulated pose from ``[target pose, state]``; joint positions follow
    from the predicted pose by forward kinematics
    """

    def __init__(
        self,
        model: CharacterModel,
        width: int = 256,
        layers: int = 4,
        rng: numpy.random.Generator = None,
        network: Mlp = None,
    ):
        input_width = model.target_dof + 2 * model.dof
        if network is None:
            spec = MlpSpec.chain(input_width, [width] * (layers - 1) + [model.dof])
            network = Mlp(spec, rng)
        if network.spec.input_width != input_width or network.spec.output_width != model.dof:
            raise ValueError(f'network "{network}" does not map "{input_width}" to "{model.dof}" features')
        self.network = network
        self.model = model

    def forward(
        self,
        target: numpy.ndarray,
        pose: numpy.ndarray,
        velocity: numpy.ndarray,
        mode: NetworkMode = NetworkMode.EVAL,
    ) -> Tuple[numpy.ndarray, ForwardCache]:
        """
        :return: predicted poses ``(B, dof)``, the horizontal root position being relative to the start state, and the
            network cache
        """

        target, _ = as_batch(target, self.model.target_dof)
        pose, _ = as_batch(pose, self.model.dof)
        velocity, _ = as_batch(velocity, self.model.dof)
        inputs = numpy.concatenate([target, state_features(pose, velocity)], axis=1)
        outputs, cache = self.network.forward(inputs, mode)
        predicted = outputs.copy()
        predicted[:, :2] += pose[:, :2]
        return predicted, cache

    def backward(
        self, cache: ForwardCache, pose_gradient: numpy.ndarray
    ) -> Tuple[Dict[str, numpy.ndarray], numpy.ndarray]:
        """
        :return: parameter gradients and the gradient with respect to the target pose
        """

        gradients, input_gradient = self.network.backward(cache, pose_gradient)
        return gradients, input_gradient[:, : self.model.target_dof]

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.network!r})"


def encode_distribution(
    encoder: DistributionEncoder,
    state: Union[CharacterState, Tuple[numpy.ndarray, numpy.ndarray]],
    ref_pose: numpy.ndarray,
) -> PoseDistribution:
    """
    :param encoder: distribution encoder
    :param state: character state
    :param ref_pose: reference pose of the next frame
    :return: distribution of the correction added to the reference joint pose
    """

    if isinstance(state, CharacterState):
        state = (state.q, state.qdot)
    mean, sigma = encoder(state[0], state[1], ref_pose)
    return PoseDistribution(mean[0], sigma[0])


def decode_pose(
    decoder: PoseDecoder,
    target_pose: numpy.ndarray,
    state: Union[CharacterState, Tuple[numpy.ndarray, numpy.ndarray]],
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    :param decoder: pose decoder
    :param target_pose: target pose(s) ``(..., 3 * movable)``
    :param state: start state(s)
    :return: predicted pose(s) and their joint positions ``(..., joints, 3)``
    """

    if isinstance(state, CharacterState):
        state = (state.q, state.qdot)
    target_pose = numpy.asarray(target_pose, dtype=float)
    leading = target_pose.shape[:-1]
    predicted, _ = decoder.forward(target_pose, state[0], state[1])
    joints = link_transforms(decoder.model, predicted).origins[:, 1:]
    return (
        predicted.reshape(leading + predicted.shape[1:]),
        joints.reshape(leading + joints.shape[1:]),
    )


@dataclass
class TrainingSet:
    """
    start states, reference poses of the next frame and pseudo ground-truth target-pose distributions
    """

    states: numpy.ndarray
    ref_poses: numpy.ndarray
    means: numpy.ndarray
    sigmas: numpy.ndarray

    def __post_init__(self):
        self.states = numpy.asarray(self.states, dtype=float).reshape(len(self.states), -1)
        self.ref_poses = numpy.asarray(self.ref_poses, dtype=float).reshape(len(self.states), -1)
        self.means = numpy.asarray(self.means, dtype=float).reshape(len(self.states), -1)
        self.sigmas = numpy.asarray(self.sigmas, dtype=float).reshape(len(self.states), -1)
        if self.states.shape[1] != 2 * self.ref_poses.shape[1]:
            raise ValueError(
                f'states of width "{self.states.shape[1]}" do not match poses of width "{self.ref_poses.shape[1]}"'
            )
        if self.means.shape != self.sigmas.shape:
            raise ValueError("distribution means and sigmas differ in shape")
        if numpy.any(~(self.sigmas > 0)):
            raise ValueError("pseudo ground-truth sigmas must be positive")

    @property
    def dof(self) -> int:
        return self.ref_poses.shape[1]

    @property
    def poses(self) -> numpy.ndarray:
        return self.states[:, : self.dof]

    @property
    def velocities(self) -> numpy.ndarray:
        return self.states[:, self.dof :]

    @property
    def corrections(self) -> numpy.ndarray:
        """
        pseudo ground-truth means relative to the reference joint pose
        """

        return self.means - self.ref_poses[:, ROOT_DOF:]

    def subset(self, indices: numpy.ndarray) -> "TrainingSet":
        indices = numpy.asarray(indices, dtype=int)
        return TrainingSet(
            self.states[indices], self.ref_poses[indices], self.means[indices], self.sigmas[indices]
        )

    def split(self, fraction: float, rng: numpy.random.Generator) -> Tuple["TrainingSet", "TrainingSet"]:
        """
        :param fraction: held-out share
        :param rng: random generator
        :return: training and held-out sets
        """

        order = rng.permutation(len(self))
        count = int(round(fraction * len(self)))
        if 0 < fraction and count == 0 and len(self) > 1:
            count = 1
        return self.subset(numpy.sort(order[count:])), self.subset(numpy.sort(order[:count]))

    @property
    def data(self) -> pandas.DataFrame:
        columns = {}
        for name, values in (
            ("state", self.states),
            ("ref", self.ref_poses),
            ("mean", self.means),
            ("sigma", self.sigmas),
        ):
            for index in range(values.shape[1]):
                columns[f"{name}_{index}"] = values[:, index]
        return pandas.DataFrame(columns)

    def __len__(self) -> int:
        return len(self.states)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(samples={len(self)}, dof={self.dof})"


def write_dataset(path: PathLike, dataset: TrainingSet, overwrite: bool = False):
    """
    write one record per sample after a fixed header: state, reference pose, mean and sigma as little-endian
    ``float64``

    :param path: output file
    :param dataset: training set
    :param overwrite: overwrite existing file
    """

    if not isinstance(path, Path):
        path = Path(path)
    if path.exists() and not overwrite:
        logging.warning(f'skipping existing file "{path}"')
        return

    header = numpy.array(
        [
            (
                DATASET_MAGIC,
                DATASET_VERSION,
                len(dataset),
                dataset.states.shape[1],
                dataset.dof,
                dataset.means.shape[1],
            )
        ],
        dtype=DATASET_HEADER_DTYPE,
    )
    records = numpy.concatenate(
        [dataset.states, dataset.ref_poses, dataset.means, dataset.sigmas], axis=1
    )
    with open(path, "wb") as output:
        output.write(header.tobytes())
        output.write(numpy.ascontiguousarray(records, dtype="<f8").tobytes())


def read_dataset(path: PathLike) -> TrainingSet:
    if not isinstance(path, Path):
        path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'dataset "{path}" does not exist')

    content = path.read_bytes()
    if len(content) < DATASET_HEADER_DTYPE.itemsize:
        raise ValueError(f'"{path}" is not a dataset file')
    header = numpy.frombuffer(content[: DATASET_HEADER_DTYPE.itemsize], dtype=DATASET_HEADER_DTYPE)[0]
    if header["magic"] != DATASET_MAGIC:
        raise ValueError(f'"{path}" is not a dataset file')
    if header["version"] != DATASET_VERSION:
        raise ValueError(f'unsupported dataset version "{header["version"]}"')

    widths = [int(header["state"]), int(header["pose"]), int(header["target"]), int(header["target"])]
    count = int(header["count"])
    records = numpy.frombuffer(
        content[DATASET_HEADER_DTYPE.itemsize :], dtype="<f8"
    ).astype(float)
    if len(records) != count * sum(widths):
        raise ValueError(f'dataset "{path}" holds "{len(records)}" values, not "{count * sum(widths)}"')
    records = records.reshape(count, sum(widths))
    parts = numpy.split(records, numpy.cumsum(widths)[:-1], axis=1)
    return TrainingSet(*parts)


def generate_training_data(
    motions: List[ReferenceMotion],
    scene: SceneGeometry = None,
    cma_config: CmaConfig = None,
    rng: numpy.random.Generator = None,
    config: TrainConfig = None,
    model: CharacterModel = None,
    sim_config: SimConfig = None,
    weights: LossWeights = None,
    fall_height: float = 0.3,
) -> TrainingSet:
    """
    sample start times in the motions, interpolate the start state and add noise, take the reference pose one sampling
    interval later and search its pseudo ground-truth distribution with CMA-ES; pairs where every CMA sample failed are
    skipped

    :param motions: reference motions of at least two frames
    :param scene: scene geometry, defaults to flat ground
    :param cma_config: CMA settings
    :param rng: random generator for the pair choice, the noise and the CMA seeds
    :param config: training settings with the pair count and noise scales
    :param model: character model
    :param sim_config: simulator settings
    :param weights: sampling loss weights
    :param fall_height: root height below which a sample fails
    :return: training set
    """

    if config is None:
        config = TrainConfig()
    if sim_config is None:
        sim_config = SimConfig()
    if rng is None:
        rng = numpy.random.default_rng(config.seed)
    if model is None:
        model = build_character()
    if cma_config is None:
        cma_config = CmaConfig(dimension=model.target_dof)
    if len(motions) == 0:
        raise ValueError("no motions to sample from")
    interval = sim_config.control_interval
    for motion in motions:
        if len(motion) < 2 or motion.duration < interval:
            raise ValueError(f'motion "{motion}" is shorter than one sampling interval')

    states = []
    ref_poses = []
    means = []
    sigmas = []
    for index in tqdm(range(config.pairs), desc="training pairs", disable=not config.progress):
        motion = motions[int(rng.integers(len(motions)))]
        start = motion.timestamps[0] + rng.uniform(0.0, motion.duration - interval)
        pose, velocity = motion.interpolate(start)
        ref_pose, ref_velocity = motion.interpolate(min(start + interval, motion.timestamps[-1]))

        pose_noise = numpy.concatenate(
            [
                rng.normal(0.0, 1.0, 3) * config.noise_position,
                rng.normal(0.0, 1.0, model.dof - 3) * config.noise_rotation,
            ]
        )
        velocity_noise = rng.normal(0.0, 1.0, model.dof) * config.noise_velocity
        pose = pose + pose_noise
        velocity = velocity + velocity_noise
        cma_rng = numpy.random.default_rng(int(rng.integers(2**63 - 1)))

        world = SimWorld(model, pose, velocity, scene=scene, config=sim_config)
        result = cma_track_frame(
            world,
            ref_pose,
            cma_config,
            cma_rng,
            TrackingFrame(ref_pose, ref_velocity),
            weights,
            fall_height,
        )
        if not numpy.isfinite(result.best_value):
            logging.warning(f'skipping training pair "{index}": every CMA sample failed')
            continue
        states.append(numpy.concatenate([pose, velocity]))
        ref_poses.append(ref_pose)
        means.append(result.distribution.mean)
        sigmas.append(result.distribution.sigma)

    if len(states) == 0:
        raise ValueError("no training pair survived")
    logging.info(f'generated "{len(states)}" of "{config.pairs}" training pairs')
    return TrainingSet(numpy.stack(states), numpy.stack(ref_poses), numpy.stack(means), numpy.stack(sigmas))


def _batches(count: int, batch_size: int, rng: numpy.random.Generator) -> List[numpy.ndarray]:
    order = rng.permutation(count)
    return numpy.array_split(order, max(1, int(numpy.ceil(count / batch_size))))


def weight_penalty(network: Mlp, coefficient: float) -> Tuple[float, Dict[str, numpy.ndarray]]:
    """
    :return: ``coefficient`` times the sum of squared weights, and its gradient
    """

    value = 0.0
    gradients = {}
    for name, parameter in network.parameters.items():
        if name.endswith(".weight"):
            value += coefficient * float((parameter**2).sum())
            gradients[name] = 2 * coefficient * parameter
        else:
            gradients[name] = numpy.zeros_like(parameter)
    return value, gradients


def _add(first: Dict[str, numpy.ndarray], second: Dict[str, numpy.ndarray]) -> Dict[str, numpy.ndarray]:
    return {name: first[name] + second[name] for name in first}


def _abort(config: TrainConfig, networks: Dict[str, Mlp], message: str):
    if config.checkpoint is not None:
        save_checkpoint(config.checkpoint, networks, metadata={"aborted": True})
        logging.error(f'wrote checkpoint "{config.checkpoint}" before aborting')
    raise NonFiniteLossError(message)


def kl_batch_loss(
    encoder: DistributionEncoder,
    dataset: TrainingSet,
    mode: NetworkMode = NetworkMode.TRAIN,
) -> Tuple[float, Dict[str, numpy.ndarray]]:
    """
    :return: mean KL divergence from the encoder distribution to the pseudo ground truth, and its parameter gradients
    """

    output = encoder.forward(dataset.poses, dataset.velocities, dataset.ref_poses, mode)
    count = len(dataset)
    value = float(
        kl_diag_gaussian(output.mean, output.sigma, dataset.corrections, dataset.sigmas).mean()
    )
    mean_gradient, log_sigma_gradient = kl_diag_gaussian_gradient(
        output.mean, output.log_sigma, dataset.corrections, dataset.sigmas
    )
    gradients = encoder.backward(output, mean_gradient / count, log_sigma_gradient / count)
    return value, gradients


def pretrain_kl(
    encoder: DistributionEncoder,
    dataset: TrainingSet,
    config: TrainConfig = None,
    rng: numpy.random.Generator = None,
) -> Tuple[DistributionEncoder, pandas.DataFrame]:
    """
    fit the encoder to the pseudo ground-truth distributions by minimizing the mean KL divergence with AdamW

    :param encoder: distribution encoder, trained in place
    :param dataset: training set
    :param config: training settings
    :param rng: random generator for the batch order
    :return: trained encoder and the loss per epoch
    """

    if config is None:
        config = TrainConfig()
    if rng is None:
        rng = numpy.random.default_rng(config.seed)
    if len(dataset) == 0:
        raise ValueError("empty training set")

    optimizer = config.optimizer
    state = AdamWState.zeros(encoder.network.parameters)
    history = []
    for epoch in tqdm(range(config.pretrain_epochs), desc="KL pretraining", disable=not config.progress):
        losses = []
        for batch in _batches(len(dataset), config.batch_size, rng):
            loss, gradients = kl_batch_loss(encoder, dataset.subset(batch))
            penalty, penalty_gradients = weight_penalty(encoder.network, config.regularization)
            if not numpy.isfinite(loss + penalty):
                _abort(config, {"encoder": encoder.network}, f'non-finite KL loss at epoch "{epoch}"')
            parameters, state = adamw_step(
                encoder.network.parameters, _add(gradients, penalty_gradients), state, optimizer
            )
            encoder.network.parameters = parameters
            losses.append(loss)
        history.append({"epoch": epoch, "kl": float(numpy.mean(losses))})
        logging.info(f'KL pretraining epoch "{epoch}": loss "{history[-1]["kl"]:.6g}"')

    return encoder, pandas.DataFrame(history, columns=["epoch", "kl"]).set_index("epoch")


def two_branch_losses(
    predicted_pose: numpy.ndarray,
    predicted_joints: numpy.ndarray,
    simulated_pose: numpy.ndarray,
    simulated_joints: numpy.ndarray,
    ref_pose: numpy.ndarray,
    ref_joints: numpy.ndarray,
) -> Dict[str, numpy.ndarray]:
    """
    per-sample simulation loss against the simulated result and reconstruction loss against the reference

    :return: ``sim`` and ``rec`` losses ``(B,)``
    """

    return {
        "sim": ((predicted_pose - simulated_pose) ** 2).sum(axis=-1)
        + ((predicted_joints - simulated_joints) ** 2).sum(axis=(-2, -1)),
        "rec": ((predicted_pose - ref_pose) ** 2).sum(axis=-1)
        + ((predicted_joints - ref_joints) ** 2).sum(axis=(-2, -1)),
    }


class BranchStep(NamedTuple):
    losses: Dict[str, float]
    encoder_gradients: Dict[str, numpy.ndarray]
    decoder_gradients: Dict[str, numpy.ndarray]
    valid: int


def two_branch_step(
    encoder: DistributionEncoder,
    decoder: PoseDecoder,
    batch: TrainingSet,
    rng: numpy.random.Generator,
    scene: SceneGeometry = None,
    sim_config: SimConfig = None,
    lambda_kl: float = 0.2,
    mode: NetworkMode = NetworkMode.TRAIN,
) -> BranchStep:
    """
    one batch of two-branch training: sample corrections with the reparameterization, simulate the sampled target
    poses (the simulated poses enter the losses as constants), decode the same targets and push the decoder losses back
    through the sampled corrections into the encoder

    :param encoder: distribution encoder
    :param decoder: pose decoder
    :param batch: training samples
    :param rng: generator of the reparameterization noise
    :param scene: scene geometry
    :param sim_config: simulator settings
    :param lambda_kl: weight of the KL term
    :param mode: network mode
    :return: batch losses, gradients and the number of samples whose simulation did not diverge
    """

    model = decoder.model
    poses = batch.poses
    velocities = batch.velocities
    output = encoder.forward(poses, velocities, batch.ref_poses, mode)
    sample = reparam_sample(output.mean, output.sigma, rng)
    targets = batch.ref_poses[:, ROOT_DOF:] + sample.sample

    world = SimWorld(model, poses, velocities, scene=scene, config=sim_config)
    simulated = rollout_batch(world, targets)
    valid = ~simulated.diverged
    if not numpy.all(valid):
        logging.info(f'dropping "{int((~valid).sum())}" diverged samples from the batch')
    simulated_pose = numpy.where(valid[:, None], simulated.pose, batch.ref_poses)
    simulated_joints = link_transforms(model, simulated_pose).origins[:, 1:]
    ref_joints = link_transforms(model, batch.ref_poses).origins[:, 1:]

    predicted, cache = decoder.forward(targets, poses, velocities, mode)
    predicted_joints, jacobian = pose_jacobian(model, predicted)
    branch = two_branch_losses(
        predicted, predicted_joints, simulated_pose, simulated_joints, batch.ref_poses, ref_joints
    )
    count = max(int(valid.sum()), 1)
    weights = valid / count

    kl = kl_diag_gaussian(output.mean, output.sigma, batch.corrections, batch.sigmas)
    losses = {
        "sim": float((weights * branch["sim"]).sum()),
        "rec": float((weights * branch["rec"]).sum()),
        "kl": float((weights * kl).sum()),
    }

    joint_gradient = 2 * (predicted_joints - simulated_joints) + 2 * (predicted_joints - ref_joints)
    pose_gradient = 2 * (predicted - simulated_pose) + 2 * (predicted - batch.ref_poses)
    pose_gradient = pose_gradient + numpy.einsum("bpi,bpij->bj", joint_gradient, jacobian)
    pose_gradient *= weights[:, None]
    decoder_gradients, target_gradient = decoder.backward(cache, pose_gradient)

    kl_mean_gradient, kl_log_sigma_gradient = kl_diag_gaussian_gradient(
        output.mean, output.log_sigma, batch.corrections, batch.sigmas
    )
    mean_gradient = sample.mean_gradient(target_gradient) + lambda_kl * weights[:, None] * kl_mean_gradient
    log_sigma_gradient = (
        sample.sigma_gradient(target_gradient) * output.sigma
        + lambda_kl * weights[:, None] * kl_log_sigma_gradient
    )
    encoder_gradients = encoder.backward(output, mean_gradient, log_sigma_gradient)
    return BranchStep(losses, encoder_gradients, decoder_gradients, int(valid.sum()))


def _held_out_loss(
    encoder: DistributionEncoder,
    decoder: PoseDecoder,
    dataset: TrainingSet,
    scene: SceneGeometry,
    sim_config: SimConfig,
    seed: int,
) -> float:
    step = two_branch_step(
        encoder,
        decoder,
        dataset,
        sample_generator(seed, 1),
        scene,
        sim_config,
        mode=NetworkMode.EVAL,
    )
    return step.losses["sim"] + step.losses["rec"]


def train_two_branch(
    encoder: DistributionEncoder,
    decoder: PoseDecoder,
    dataset: TrainingSet,
    scene: SceneGeometry = None,
    sim_config: SimConfig = None,
    config: TrainConfig = None,
    rng: numpy.random.Generator = None,
    validation: TrainingSet = None,
) -> Tuple[DistributionEncoder, PoseDecoder, pandas.DataFrame]:
    """
    train encoder and decoder jointly on ``sim + rec + lambda_kl * kl + reg``; when a held-out set is given, training
    stops once its ``sim + rec`` exceeds the value at the start by more than the early-stopping tolerance, and the best
    held-out parameters are restored

    :param encoder: pretrained distribution encoder, trained in place
    :param decoder: pose decoder, trained in place
    :param dataset: training set
    :param scene: scene geometry
    :param sim_config: simulator settings
    :param config: training settings
    :param rng: random generator for batch order and sampling noise
    :param validation: held-out set
    :return: trained encoder, trained decoder and the losses per epoch
    """

    if config is None:
        config = TrainConfig()
    if rng is None:
        rng = numpy.random.default_rng(config.seed)
    if len(dataset) == 0:
        raise ValueError("empty training set")

    optimizer = config.optimizer
    encoder_state = AdamWState.zeros(encoder.network.parameters)
    decoder_state = AdamWState.zeros(decoder.network.parameters)
    networks = {"encoder": encoder.network, "decoder": decoder.network}

    baseline = None
    best = None
    if validation is not None and len(validation) > 0:
        baseline = _held_out_loss(encoder, decoder, validation, scene, sim_config, config.seed)
        best = (baseline, encoder.network.copy(), decoder.network.copy())
        logging.info(f'held-out decoder loss before two-branch training: "{baseline:.6g}"')

    history = []
    for epoch in tqdm(range(config.two_branch_epochs), desc="two-branch training", disable=not config.progress):
        totals = {"sim": [], "rec": [], "kl": [], "reg": []}
        for batch in _batches(len(dataset), config.batch_size, rng):
            step = two_branch_step(
                encoder, decoder, dataset.subset(batch), rng, scene, sim_config, config.lambda_kl
            )
            encoder_penalty, encoder_penalty_gradients = weight_penalty(encoder.network, config.regularization)
            decoder_penalty, decoder_penalty_gradients = weight_penalty(decoder.network, config.regularization)
            total = (
                step.losses["sim"]
                + step.losses["rec"]
                + config.lambda_kl * step.losses["kl"]
                + encoder_penalty
                + decoder_penalty
            )
            if not numpy.isfinite(total):
                _abort(config, networks, f'non-finite two-branch loss at epoch "{epoch}"')
            if step.valid == 0:
                continue

            parameters, encoder_state = adamw_step(
                encoder.network.parameters,
                _add(step.encoder_gradients, encoder_penalty_gradients),
                encoder_state,
                optimizer,
            )
            encoder.network.parameters = parameters
            parameters, decoder_state = adamw_step(
                decoder.network.parameters,
                _add(step.decoder_gradients, decoder_penalty_gradients),
                decoder_state,
                optimizer,
            )
            decoder.network.parameters = parameters
            for name in ("sim", "rec", "kl"):
                totals[name].append(step.losses[name])
            totals["reg"].append(encoder_penalty + decoder_penalty)

        record = {"epoch": epoch}
        record.update({name: float(numpy.mean(values)) if len(values) > 0 else numpy.nan for name, values in totals.items()})
        record["total"] = record["sim"] + record["rec"] + config.lambda_kl * record["kl"] + record["reg"]

        if baseline is not None:
            held_out = _held_out_loss(encoder, decoder, validation, scene, sim_config, config.seed)
            record["held_out"] = held_out
            if held_out < best[0]:
                best = (held_out, encoder.network.copy(), decoder.network.copy())
        history.append(record)
        logging.info(
            f'two-branch epoch "{epoch}": '
            + ", ".join(f'{name} "{value:.6g}"' for name, value in record.items() if name != "epoch")
        )

        if baseline is not None and record["held_out"] > (1 + config.early_stop_tolerance) * baseline:
            logging.warning(
                f'held-out decoder loss "{record["held_out"]:.6g}" exceeds the starting value "{baseline:.6g}"; stopping'
            )
            break

    if best is not None:
        encoder.network.parameters = best[1].parameters
        encoder.network.buffers.update(best[1].buffers)
        decoder.network.parameters = best[2].parameters
        decoder.network.buffers.update(best[2].buffers)

    return encoder, decoder, pandas.DataFrame(history).set_index("epoch") if len(history) > 0 else pandas.DataFrame()


class SamplingLoss(NamedTuple):
    # mean total loss of the samples that did not fail
    mean: float
    failure_rate: float


def evaluate_sampling_loss(
    encoder: DistributionEncoder,
    dataset: TrainingSet,
    model: CharacterModel,
    scene: SceneGeometry = None,
    sim_config: SimConfig = None,
    weights: LossWeights = None,
    samples: int = 100,
    seed: int = 0,
    fall_height: float = 0.3,
    bounds: numpy.ndarray = None,
) -> SamplingLoss:
    """
    draw target poses from the encoder distribution for every pair, simulate them and average the sampling loss

    :param encoder: distribution encoder
    :param dataset: held-out pairs
    :param model: character model
    :param scene: scene geometry
    :param sim_config: simulator settings
    :param weights: sampling loss weights
    :param samples: samples per pair
    :param seed: sampling seed
    :param fall_height: root height below which a sample fails
    :param bounds: target-pose bounds, defaults to the joint rotation bounds
    :return: mean loss of the surviving samples and the share of failed samples
    """

    if sim_config is None:
        sim_config = SimConfig()
    if bounds is None:
        bounds = joint_rotation_bounds()
    means, sigmas = encoder(dataset.poses, dataset.velocities, dataset.ref_poses)

    totals = []
    for index in range(len(dataset)):
        rng = sample_generator(seed, index)
        targets = dataset.ref_poses[index, ROOT_DOF:] + means[index] + sigmas[index] * rng.standard_normal(
            (samples, model.target_dof)
        )
        targets = numpy.clip(targets, bounds[:, 0], bounds[:, 1])
        world = SimWorld(
            model, dataset.poses[index], dataset.velocities[index], scene=scene, config=sim_config
        )
        end = rollout_batch(world, targets)
        ref_velocity = (
            pose_difference(dataset.ref_poses[index], dataset.poses[index]) / sim_config.control_interval
        )
        _, values, _ = evaluate_states(
            model,
            end.pose,
            end.velocity,
            end.diverged,
            TrackingFrame(dataset.ref_poses[index], ref_velocity),
            weights,
            fall_height,
        )
        totals.append(values)

    if len(totals) == 0:
        return SamplingLoss(numpy.nan, 0.0)
    totals = numpy.concatenate(totals)
    finite = numpy.isfinite(totals)
    return SamplingLoss(
        float(totals[finite].mean()) if numpy.any(finite) else numpy.inf,
        float(1 - finite.mean()),
    )


class DistributionPrior:
    """
    trained encoder used as a sampling distribution: target poses are the reference joint pose plus a correction drawn
    from the encoder distribution
    """

    def __init__(self, encoder: DistributionEncoder, decoder: PoseDecoder = None):
        self.encoder = encoder
        self.decoder = decoder

    def correction(
        self, pose: numpy.ndarray, velocity: numpy.ndarray, ref_pose: numpy.ndarray
    ) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """
        :return: mean and standard deviation of the correction per state ``(B, 3 * movable)``
        """

        return self.encoder(pose, velocity, ref_pose)

    def distribution(
        self,
        state: Union[CharacterState, Tuple[numpy.ndarray, numpy.ndarray]],
        ref_pose: numpy.ndarray,
    ) -> PoseDistribution:
        """
        :return: distribution of the target pose of one state
        """

        correction = encode_distribution(self.encoder, state, ref_pose)
        return PoseDistribution(
            numpy.asarray(ref_pose, dtype=float)[ROOT_DOF:] + correction.mean, correction.sigma
        )

    def to_file(self, path: PathLike, overwrite: bool = False):
        networks = {"encoder": self.encoder.network}
        if self.decoder is not None:
            networks["decoder"] = self.decoder.network
        save_checkpoint(
            path,
            networks,
            metadata={"dof": self.encoder.dof, "target_dof": self.encoder.target_dof},
            overwrite=overwrite,
        )

    @classmethod
    def from_file(cls, path: PathLike, model: CharacterModel = None) -> "DistributionPrior":
        """
        :param path: checkpoint with an ``encoder`` network and optionally a ``decoder`` network
        :param model: character model of the decoder
        :return: distribution prior
        """

        checkpoint = load_checkpoint(path)
        if "encoder" not in checkpoint.networks:
            raise ValueError(f'checkpoint "{path}" has no encoder')
        metadata = checkpoint.metadata
        encoder = DistributionEncoder(
            metadata.get("dof", 57),
            metadata.get("target_dof", 51),
            network=checkpoint.networks["encoder"],
        )
        decoder = None
        if "decoder" in checkpoint.networks and model is not None:
            decoder = PoseDecoder(model, network=checkpoint.networks["decoder"])
        return cls(encoder, decoder)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.encoder!r})"
