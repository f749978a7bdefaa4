"""
feed-forward networks in float64: fully-connected layers with optional batch normalization and LeakyReLU, exact
reverse-mode gradients, AdamW, diagonal-Gaussian helpers and checkpoint files
"""

from dataclasses import dataclass
from dataclasses import fields
from enum import Enum
import io
import logging
from os import PathLike
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Sequence
from typing import Tuple

import numpy
import toml
import typepigeon

LEAKY_SLOPE = 0.01
BATCHNORM_MOMENTUM = 0.9
BATCHNORM_EPSILON = 1e-5

CHECKPOINT_MAGIC = b"PCNN"
CHECKPOINT_VERSION = 1

CHECKPOINT_HEADER_DTYPE = numpy.dtype([("magic", "S4"), ("version", "<u4"), ("length", "<u4")])


class NonFiniteLossError(FloatingPointError):
    pass


class Activation(Enum):
    LEAKY_RELU = "leaky_relu"
    NONE = "none"


class NetworkMode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class LayerSpec:
    width: int
    batchnorm: bool = False
    activation: Activation = Activation.NONE

    def __post_init__(self):
        if int(self.width) < 1:
            raise ValueError(f'layer width must be positive, not "{self.width}"')
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "batchnorm", bool(self.batchnorm))
        object.__setattr__(
            self, "activation", typepigeon.convert_value(self.activation, Activation)
        )


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    layers: Tuple[LayerSpec, ...]

    def __post_init__(self):
        if int(self.input_width) < 1:
            raise ValueError(f'input width must be positive, not "{self.input_width}"')
        layers = tuple(
            layer if isinstance(layer, LayerSpec) else LayerSpec(**layer)
            for layer in self.layers
        )
        if len(layers) == 0:
            raise ValueError("network needs at least one layer")
        object.__setattr__(self, "input_width", int(self.input_width))
        object.__setattr__(self, "layers", layers)

    @classmethod
    def chain(
        cls, input_width: int, widths: Sequence[int], batchnorm: bool = True
    ) -> "MlpSpec":
        """
        hidden layers with batch normalization and LeakyReLU, linear output layer

        :param input_width: input features
        :param widths: output width of every layer, the last being the network output
        :param batchnorm: normalize hidden layers
        :return: network specification

        >>> MlpSpec.chain(4, [8, 2]).output_width
        2
        """

        layers = [
            LayerSpec(width, batchnorm, Activation.LEAKY_RELU) for width in widths[:-1]
        ]
        layers.append(LayerSpec(widths[-1]))
        return cls(input_width, tuple(layers))

    @property
    def output_width(self) -> int:
        return self.layers[-1].width

    @property
    def widths(self) -> List[int]:
        return [self.input_width] + [layer.width for layer in self.layers]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_width": self.input_width,
            "layers": [
                {
                    "width": layer.width,
                    "batchnorm": layer.batchnorm,
                    "activation": layer.activation.value,
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "MlpSpec":
        return cls(values["input_width"], tuple(LayerSpec(**layer) for layer in values["layers"]))


def leaky_relu(values: numpy.ndarray, slope: float = LEAKY_SLOPE) -> numpy.ndarray:
    """
    >>> leaky_relu(numpy.array([-1.0, 2.0])).tolist()
    [-0.01, 2.0]
    """

    return numpy.where(values > 0, values, slope * values)


def initial_parameters(spec: MlpSpec, rng: numpy.random.Generator) -> Dict[str, numpy.ndarray]:
    """
    Kaiming-uniform weights for the fan-in, zero biases, unit batch-normalization scales

    :param spec: network specification
    :param rng: random generator
    :return: parameters by name
    """

    parameters = {}
    for index, (fan_in, layer) in enumerate(zip(spec.widths[:-1], spec.layers)):
        bound = numpy.sqrt(6.0 / fan_in)
        parameters[f"{index}.weight"] = rng.uniform(-bound, bound, (fan_in, layer.width))
        parameters[f"{index}.bias"] = numpy.zeros(layer.width)
        if layer.batchnorm:
            parameters[f"{index}.gamma"] = numpy.ones(layer.width)
            parameters[f"{index}.beta"] = numpy.zeros(layer.width)
    return parameters


def initial_buffers(spec: MlpSpec) -> Dict[str, numpy.ndarray]:
    buffers = {}
    for index, layer in enumerate(spec.layers):
        if layer.batchnorm:
            buffers[f"{index}.running_mean"] = numpy.zeros(layer.width)
            buffers[f"{index}.running_var"] = numpy.ones(layer.width)
    return buffers


class LayerCache(NamedTuple):
    inputs: numpy.ndarray
    normalized: numpy.ndarray
    inverse_std: numpy.ndarray
    preactivation: numpy.ndarray


class ForwardCache(NamedTuple):
    mode: NetworkMode
    layers: Tuple[LayerCache, ...]
    version: int = 0


def mlp_forward(
    spec: MlpSpec,
    parameters: Dict[str, numpy.ndarray],
    inputs: numpy.ndarray,
    mode: NetworkMode = NetworkMode.EVAL,
    buffers: Dict[str, numpy.ndarray] = None,
    version: int = 0,
) -> Tuple[numpy.ndarray, ForwardCache]:
    """
    affine map, then batch normalization (batch statistics in training mode, running statistics otherwise) and
    activation per layer; training mode updates the running statistics in ``buffers``

    :param spec: network specification
    :param parameters: parameters by name
    :param inputs: inputs ``(batch, input_width)``
    :param mode: training or evaluation
    :param buffers: running statistics by name
    :param version: parameter version stored in the cache
    :return: outputs ``(batch, output_width)`` and the cache for the backward pass
    """

    mode = typepigeon.convert_value(mode, NetworkMode)
    inputs = numpy.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_width:
        raise ValueError(
            f'expected inputs of shape (batch, {spec.input_width}), not "{inputs.shape}"'
        )
    if len(inputs) == 0:
        raise ValueError("empty input batch")
    if buffers is None:
        buffers = initial_buffers(spec)

    caches = []
    values = inputs
    for index, layer in enumerate(spec.layers):
        layer_inputs = values
        values = layer_inputs @ parameters[f"{index}.weight"] + parameters[f"{index}.bias"]
        normalized = None
        inverse_std = None
        if layer.batchnorm:
            if mode == NetworkMode.TRAIN:
                mean = values.mean(axis=0)
                variance = values.var(axis=0)
                buffers[f"{index}.running_mean"] = (
                    BATCHNORM_MOMENTUM * buffers[f"{index}.running_mean"]
                    + (1 - BATCHNORM_MOMENTUM) * mean
                )
                buffers[f"{index}.running_var"] = (
                    BATCHNORM_MOMENTUM * buffers[f"{index}.running_var"]
                    + (1 - BATCHNORM_MOMENTUM) * variance
                )
            else:
                mean = buffers[f"{index}.running_mean"]
                variance = buffers[f"{index}.running_var"]
            inverse_std = 1 / numpy.sqrt(variance + BATCHNORM_EPSILON)
            normalized = (values - mean) * inverse_std
            values = parameters[f"{index}.gamma"] * normalized + parameters[f"{index}.beta"]
        preactivation = values
        if layer.activation == Activation.LEAKY_RELU:
            values = leaky_relu(values)
        caches.append(LayerCache(layer_inputs, normalized, inverse_std, preactivation))

    return values, ForwardCache(mode, tuple(caches), version)


def mlp_backward(
    spec: MlpSpec,
    parameters: Dict[str, numpy.ndarray],
    cache: ForwardCache,
    output_gradient: numpy.ndarray,
) -> Tuple[Dict[str, numpy.ndarray], numpy.ndarray]:
    """
    :param spec: network specification
    :param parameters: parameters of the forward pass
    :param cache: cache of the forward pass
    :param output_gradient: gradient of the loss with respect to the outputs
    :return: gradients by parameter name and gradient with respect to the inputs
    """

    gradient = numpy.asarray(output_gradient, dtype=float)
    gradients = {}
    for index in reversed(range(len(spec.layers))):
        layer = spec.layers[index]
        layer_cache = cache.layers[index]
        if layer.activation == Activation.LEAKY_RELU:
            gradient = gradient * numpy.where(layer_cache.preactivation > 0, 1.0, LEAKY_SLOPE)
        if layer.batchnorm:
            normalized = layer_cache.normalized
            gradients[f"{index}.gamma"] = (gradient * normalized).sum(axis=0)
            gradients[f"{index}.beta"] = gradient.sum(axis=0)
            gradient = gradient * parameters[f"{index}.gamma"]
            if cache.mode == NetworkMode.TRAIN:
                count = len(gradient)
                gradient = (layer_cache.inverse_std / count) * (
                    count * gradient
                    - gradient.sum(axis=0)
                    - normalized * (gradient * normalized).sum(axis=0)
                )
            else:
                gradient = gradient * layer_cache.inverse_std
        gradients[f"{index}.weight"] = layer_cache.inputs.T @ gradient
        gradients[f"{index}.bias"] = gradient.sum(axis=0)
        gradient = gradient @ parameters[f"{index}.weight"].T

    ordered = {name: gradients[name] for name in parameters}
    return ordered, gradient


class Mlp:
    """
    network with its parameters and running statistics; every parameter update invalidates earlier caches
    """

    def __init__(
        self,
        spec: MlpSpec,
        rng: numpy.random.Generator = None,
        parameters: Dict[str, numpy.ndarray] = None,
        buffers: Dict[str, numpy.ndarray] = None,
    ):
        if parameters is None:
            if rng is None:
                rng = numpy.random.default_rng(0)
            parameters = initial_parameters(spec, rng)
        expected = initial_parameters(spec, numpy.random.default_rng(0))
        for name, value in expected.items():
            if name not in parameters or numpy.shape(parameters[name]) != value.shape:
                raise ValueError(f'parameter "{name}" is missing or has the wrong shape')
        if buffers is None:
            buffers = initial_buffers(spec)

        self.__spec = spec
        self.__parameters = {name: numpy.array(parameters[name], dtype=float) for name in expected}
        self.__buffers = {name: numpy.array(value, dtype=float) for name, value in buffers.items()}
        self.__version = 0

    @property
    def spec(self) -> MlpSpec:
        return self.__spec

    @property
    def parameters(self) -> Dict[str, numpy.ndarray]:
        return self.__parameters

    @parameters.setter
    def parameters(self, parameters: Dict[str, numpy.ndarray]):
        if set(parameters) != set(self.__parameters):
            raise ValueError("parameter names do not match the network")
        self.__parameters = {name: numpy.array(parameters[name], dtype=float) for name in self.__parameters}
        self.__version += 1

    @property
    def buffers(self) -> Dict[str, numpy.ndarray]:
        return self.__buffers

    @property
    def version(self) -> int:
        return self.__version

    @property
    def parameter_count(self) -> int:
        return sum(value.size for value in self.__parameters.values())

    def forward(
        self, inputs: numpy.ndarray, mode: NetworkMode = NetworkMode.EVAL
    ) -> Tuple[numpy.ndarray, ForwardCache]:
        return mlp_forward(
            self.__spec, self.__parameters, inputs, mode, self.__buffers, self.__version
        )

    def backward(
        self, cache: ForwardCache, output_gradient: numpy.ndarray
    ) -> Tuple[Dict[str, numpy.ndarray], numpy.ndarray]:
        if cache.version != self.__version:
            raise ValueError(
                f'stale cache of parameter version "{cache.version}", network is at "{self.__version}"'
            )
        return mlp_backward(self.__spec, self.__parameters, cache, output_gradient)

    def __call__(self, inputs: numpy.ndarray) -> numpy.ndarray:
        return self.forward(inputs, NetworkMode.EVAL)[0]

    def copy(self) -> "Mlp":
        return Mlp(self.__spec, parameters=self.__parameters, buffers=self.__buffers)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(widths={self.__spec.widths}, parameters={self.parameter_count})"


@dataclass
class AdamWConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f'learning rate must be positive, not "{self.learning_rate}"')
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError(f'moment decay rates must lie in [0, 1), not "{self.beta1}" and "{self.beta2}"')
        if not self.epsilon > 0 or self.weight_decay < 0:
            raise ValueError("epsilon must be positive and weight decay non-negative")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "AdamWConfig":
        names = {field.name for field in fields(cls)}
        return cls(**{name: value for name, value in values.items() if name in names})


class AdamWState(NamedTuple):
    step: int
    first_moment: Dict[str, numpy.ndarray]
    second_moment: Dict[str, numpy.ndarray]

    @classmethod
    def zeros(cls, parameters: Dict[str, numpy.ndarray]) -> "AdamWState":
        return cls(
            0,
            {name: numpy.zeros_like(value) for name, value in parameters.items()},
            {name: numpy.zeros_like(value) for name, value in parameters.items()},
        )


def adamw_step(
    parameters: Dict[str, numpy.ndarray],
    gradients: Dict[str, numpy.ndarray],
    state: AdamWState = None,
    config: AdamWConfig = None,
) -> Tuple[Dict[str, numpy.ndarray], AdamWState]:
    """
    bias-corrected Adam update with weight decay applied multiplicatively to the parameters

    :param parameters: parameters by name
    :param gradients: gradients by name
    :param state: optimizer moments
    :param config: optimizer settings
    :return: updated parameters and optimizer state
    """

    if config is None:
        config = AdamWConfig()
    if state is None:
        state = AdamWState.zeros(parameters)

    step = state.step + 1
    first_correction = 1 - config.beta1**step
    second_correction = 1 - config.beta2**step
    updated = {}
    first_moment = {}
    second_moment = {}
    for name, value in parameters.items():
        gradient = gradients[name]
        if gradient.shape != value.shape:
            raise ValueError(
                f'gradient "{name}" has shape "{gradient.shape}", not "{value.shape}"'
            )
        first_moment[name] = config.beta1 * state.first_moment[name] + (1 - config.beta1) * gradient
        second_moment[name] = (
            config.beta2 * state.second_moment[name] + (1 - config.beta2) * gradient**2
        )
        update = (first_moment[name] / first_correction) / (
            numpy.sqrt(second_moment[name] / second_correction) + config.epsilon
        )
        updated[name] = value * (1 - config.learning_rate * config.weight_decay) - (
            config.learning_rate * update
        )
    return updated, AdamWState(step, first_moment, second_moment)


def _check_sigma(*sigmas: numpy.ndarray):
    for sigma in sigmas:
        if numpy.any(~(numpy.asarray(sigma) > 0)):
            raise ValueError("standard deviations must be positive")


def kl_diag_gaussian(
    mean_1: numpy.ndarray,
    sigma_1: numpy.ndarray,
    mean_2: numpy.ndarray,
    sigma_2: numpy.ndarray,
) -> numpy.ndarray:
    """
    KL divergence ``KL(N(mean_1, sigma_1) || N(mean_2, sigma_2))`` of diagonal Gaussians, summed over the last axis

    >>> float(kl_diag_gaussian(0.0, 1.0, 1.0, 1.0))
    0.5
    """

    _check_sigma(sigma_1, sigma_2)
    mean_1, sigma_1, mean_2, sigma_2 = (
        numpy.atleast_1d(numpy.asarray(value, dtype=float))
        for value in (mean_1, sigma_1, mean_2, sigma_2)
    )
    ratio = (sigma_1 / sigma_2) ** 2
    terms = 0.5 * (ratio + ((mean_1 - mean_2) / sigma_2) ** 2 - 1 - numpy.log(ratio))
    return terms.sum(axis=-1)


def kl_diag_gaussian_gradient(
    mean_1: numpy.ndarray,
    log_sigma_1: numpy.ndarray,
    mean_2: numpy.ndarray,
    sigma_2: numpy.ndarray,
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    :return: gradients of the KL divergence with respect to ``mean_1`` and ``log(sigma_1)``
    """

    _check_sigma(sigma_2)
    variance_2 = numpy.asarray(sigma_2, dtype=float) ** 2
    mean_gradient = (mean_1 - mean_2) / variance_2
    log_sigma_gradient = numpy.exp(2 * log_sigma_1) / variance_2 - 1
    return mean_gradient, log_sigma_gradient


class ReparamSample(NamedTuple):
    """
    sample ``mean + sigma * noise``; the pathwise derivative is one with respect to the mean and ``noise`` with
    respect to sigma
    """

    sample: numpy.ndarray
    noise: numpy.ndarray

    def mean_gradient(self, gradient: numpy.ndarray) -> numpy.ndarray:
        return numpy.asarray(gradient, dtype=float)

    def sigma_gradient(self, gradient: numpy.ndarray) -> numpy.ndarray:
        return numpy.asarray(gradient, dtype=float) * self.noise


def reparam_sample(
    mean: numpy.ndarray, sigma: numpy.ndarray, rng: numpy.random.Generator
) -> ReparamSample:
    mean = numpy.asarray(mean, dtype=float)
    sigma = numpy.asarray(sigma, dtype=float)
    if numpy.any(sigma < 0):
        raise ValueError("standard deviations must be non-negative")
    noise = rng.standard_normal(numpy.broadcast(mean, sigma).shape)
    return ReparamSample(mean + sigma * noise, noise)


class Checkpoint(NamedTuple):
    networks: Dict[str, Mlp]
    optimizers: Dict[str, AdamWState]
    metadata: Dict[str, Any]


def save_checkpoint(
    path: PathLike,
    networks: Dict[str, Mlp],
    optimizers: Dict[str, AdamWState] = None,
    metadata: Dict[str, Any] = None,
    overwrite: bool = True,
):
    """
    write networks and optimizer states: magic bytes, format version and header length as little-endian ``uint32``, a
    TOML header describing every network, then every array in header order as little-endian ``float64``

    :param path: output file
    :param networks: networks by name
    :param optimizers: optimizer states by network name
    :param metadata: extra header values
    :param overwrite: overwrite existing file
    """

    if not isinstance(path, Path):
        path = Path(path)
    if path.exists() and not overwrite:
        logging.warning(f'skipping existing file "{path}"')
        return
    if optimizers is None:
        optimizers = {}

    header = {"metadata": metadata if metadata is not None else {}, "networks": {}}
    blocks = []
    for name, network in networks.items():
        arrays = {**network.parameters, **network.buffers}
        entry = {
            "spec": network.spec.to_dict(),
            "parameters": list(network.parameters),
            "buffers": list(network.buffers),
            "optimizer_step": -1,
        }
        blocks.extend(arrays.values())
        if name in optimizers:
            state = optimizers[name]
            entry["optimizer_step"] = int(state.step)
            blocks.extend(state.first_moment[key] for key in network.parameters)
            blocks.extend(state.second_moment[key] for key in network.parameters)
        header["networks"][name] = entry

    encoded = toml.dumps(header).encode("utf-8")
    with open(path, "wb") as output:
        output.write(
            numpy.array([(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(encoded))], dtype=CHECKPOINT_HEADER_DTYPE).tobytes()
        )
        output.write(encoded)
        for block in blocks:
            output.write(numpy.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    :param path: checkpoint file
    :return: networks, optimizer states and metadata
    """

    if not isinstance(path, Path):
        path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'checkpoint "{path}" does not exist')

    with open(path, "rb") as source:
        content = source.read()
    offset = CHECKPOINT_HEADER_DTYPE.itemsize
    if len(content) < offset:
        raise ValueError(f'"{path}" is not a checkpoint file')
    prefix = numpy.frombuffer(content[:offset], dtype=CHECKPOINT_HEADER_DTYPE)[0]
    if prefix["magic"] != CHECKPOINT_MAGIC:
        raise ValueError(f'"{path}" is not a checkpoint file')
    version, length = int(prefix["version"]), int(prefix["length"])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f'unsupported checkpoint version "{version}"')
    header = toml.loads(content[offset : offset + length].decode("utf-8"))
    stream = io.BytesIO(content[offset + length :])

    def read_array(shape: Tuple[int, ...]) -> numpy.ndarray:
        count = int(numpy.prod(shape))
        data = stream.read(8 * count)
        if len(data) != 8 * count:
            raise ValueError(f'checkpoint "{path}" is truncated')
        return numpy.frombuffer(data, dtype="<f8").astype(float).reshape(shape)

    networks = {}
    optimizers = {}
    for name, entry in header["networks"].items():
        spec = MlpSpec.from_dict(entry["spec"])
        shapes = {key: value.shape for key, value in initial_parameters(spec, numpy.random.default_rng(0)).items()}
        shapes.update({key: value.shape for key, value in initial_buffers(spec).items()})
        parameters = {key: read_array(shapes[key]) for key in entry["parameters"]}
        buffers = {key: read_array(shapes[key]) for key in entry["buffers"]}
        networks[name] = Mlp(spec, parameters=parameters, buffers=buffers)
        if entry["optimizer_step"] >= 0:
            first_moment = {key: read_array(shapes[key]) for key in entry["parameters"]}
            second_moment = {key: read_array(shapes[key]) for key in entry["parameters"]}
            optimizers[name] = AdamWState(int(entry["optimizer_step"]), first_moment, second_moment)

    return Checkpoint(networks, optimizers, header["metadata"])
