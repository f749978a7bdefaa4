import numpy
import pytest

from physcapture.prior import adamw_step
from physcapture.prior import AdamWConfig
from physcapture.prior import kl_diag_gaussian
from physcapture.prior import load_checkpoint
from physcapture.prior import Mlp
from physcapture.prior import mlp_forward
from physcapture.prior import MlpSpec
from physcapture.prior import reparam_sample
from physcapture.prior import save_checkpoint
from physcapture.prior.net import AdamWState
from physcapture.prior.net import BATCHNORM_EPSILON
from physcapture.prior.net import kl_diag_gaussian_gradient
from physcapture.prior.net import LayerSpec
from physcapture.prior.net import NetworkMode
from tests import check_reference_directory
from tests import output_directory


def test_mlp_spec():
    spec = MlpSpec.chain(4, [8, 6, 2])

    assert spec.widths == [4, 8, 6, 2]
    assert spec.output_width == 2
    assert [layer.batchnorm for layer in spec.layers] == [True, True, False]
    assert MlpSpec.from_dict(spec.to_dict()) == spec

    with pytest.raises(ValueError):
        MlpSpec(4, ())

    with pytest.raises(ValueError):
        LayerSpec(0)


def test_identity_layer():
    spec = MlpSpec(3, (LayerSpec(3),))
    network = Mlp(spec, parameters={"0.weight": numpy.eye(3), "0.bias": numpy.zeros(3)})
    inputs = numpy.random.default_rng(0).normal(size=(5, 3))

    assert numpy.array_equal(network(inputs), inputs)

    with pytest.raises(ValueError):
        network(numpy.zeros((5, 4)))


def test_batchnorm_train():
    spec = MlpSpec(4, (LayerSpec(6, batchnorm=True),))
    network = Mlp(spec, numpy.random.default_rng(1))
    inputs = numpy.random.default_rng(2).normal(loc=3.0, scale=2.0, size=(64, 4))

    outputs, _ = network.forward(inputs, NetworkMode.TRAIN)
    affine = inputs @ network.parameters["0.weight"]
    variance = affine.var(axis=0)

    assert numpy.allclose(outputs.mean(axis=0), 0, atol=1e-12)
    assert numpy.allclose(outputs.var(axis=0), variance / (variance + BATCHNORM_EPSILON))
    assert numpy.allclose(network.buffers["0.running_mean"], 0.1 * affine.mean(axis=0))
    assert numpy.allclose(network.buffers["0.running_var"], 0.9 + 0.1 * variance)


def test_batchnorm_eval():
    spec = MlpSpec(2, (LayerSpec(2, batchnorm=True),))
    buffers = {"0.running_mean": numpy.array([1.0, -1.0]), "0.running_var": numpy.array([4.0, 1.0])}
    parameters = {
        "0.weight": numpy.eye(2),
        "0.bias": numpy.zeros(2),
        "0.gamma": numpy.ones(2),
        "0.beta": numpy.zeros(2),
    }
    network = Mlp(spec, parameters=parameters, buffers=buffers)

    outputs = network(numpy.array([[3.0, 0.0]]))

    assert numpy.allclose(
        outputs, [[2 / numpy.sqrt(4 + BATCHNORM_EPSILON), 1 / numpy.sqrt(1 + BATCHNORM_EPSILON)]]
    )
    # evaluation leaves the running statistics alone
    assert numpy.array_equal(network.buffers["0.running_mean"], [1.0, -1.0])


@pytest.mark.parametrize("mode", [NetworkMode.TRAIN, NetworkMode.EVAL])
def test_backward(mode):
    spec = MlpSpec.chain(5, [7, 6, 3])
    network = Mlp(spec, numpy.random.default_rng(3))
    rng = numpy.random.default_rng(4)
    inputs = rng.normal(size=(9, 5))
    projection = rng.normal(size=(9, 3))
    buffers = {name: value.copy() for name, value in network.buffers.items()}
    step = 1e-6

    def loss(parameters, values) -> float:
        outputs, _ = mlp_forward(
            spec, parameters, values, mode, {name: value.copy() for name, value in buffers.items()}
        )
        return float((outputs * projection).sum())

    outputs, cache = mlp_forward(spec, network.parameters, inputs, mode, dict(buffers))
    network_gradients, input_gradient = network.backward(cache, projection)

    for name, value in network.parameters.items():
        numerical = numpy.zeros(value.shape)
        for index in numpy.ndindex(value.shape):
            shifted = {key: array.copy() for key, array in network.parameters.items()}
            shifted[name][index] += step
            ahead = loss(shifted, inputs)
            shifted[name][index] -= 2 * step
            behind = loss(shifted, inputs)
            numerical[index] = (ahead - behind) / (2 * step)
        scale = max(numpy.linalg.norm(numerical), 1e-8)
        assert numpy.linalg.norm(network_gradients[name] - numerical) / scale < 1e-4, name

    numerical = numpy.zeros(inputs.shape)
    for index in numpy.ndindex(inputs.shape):
        shifted = inputs.copy()
        shifted[index] += step
        ahead = loss(network.parameters, shifted)
        shifted[index] -= 2 * step
        numerical[index] = (ahead - loss(network.parameters, shifted)) / (2 * step)
    assert numpy.linalg.norm(input_gradient - numerical) / numpy.linalg.norm(numerical) < 1e-4


def test_stale_cache():
    network = Mlp(MlpSpec.chain(2, [3, 1]), numpy.random.default_rng(5))
    _, cache = network.forward(numpy.ones((4, 2)), NetworkMode.TRAIN)

    network.parameters = {name: value * 0.5 for name, value in network.parameters.items()}

    assert network.version == 1
    with pytest.raises(ValueError):
        network.backward(cache, numpy.ones((4, 1)))

    with pytest.raises(ValueError):
        network.parameters = {"0.weight": numpy.zeros((2, 3))}


def test_mlp_copy():
    network = Mlp(MlpSpec.chain(2, [3, 1]), numpy.random.default_rng(6))

    copy = network.copy()
    copy.parameters = {name: value + 1.0 for name, value in copy.parameters.items()}

    assert not numpy.array_equal(copy.parameters["0.weight"], network.parameters["0.weight"])
    assert network.parameter_count == copy.parameter_count == 2 * 3 + 3 + 3 + 3 + 3 + 1


def test_adamw_first_step():
    parameters = {"weight": numpy.array([1.0, -2.0, 0.5])}
    gradients = {"weight": numpy.array([0.3, -0.1, 0.0])}
    config = AdamWConfig(learning_rate=0.01, weight_decay=0.1)

    updated, state = adamw_step(parameters, gradients, config=config)

    expected = parameters["weight"] * (1 - 0.01 * 0.1) - 0.01 * gradients["weight"] / (
        numpy.abs(gradients["weight"]) + config.epsilon
    )
    assert numpy.allclose(updated["weight"], expected)
    assert state.step == 1


def test_adamw_quadratic():
    parameters = {"weight": numpy.array([3.0, -4.0])}
    state = AdamWState.zeros(parameters)
    config = AdamWConfig(learning_rate=0.05, weight_decay=0.0)

    for _ in range(2000):
        parameters, state = adamw_step(parameters, {"weight": 2 * parameters["weight"]}, state, config)

    assert numpy.allclose(parameters["weight"], 0, atol=5e-2)

    with pytest.raises(ValueError):
        adamw_step(parameters, {"weight": numpy.zeros(3)}, state, config)

    with pytest.raises(ValueError):
        AdamWConfig(learning_rate=0.0)


def test_kl_diag_gaussian():
    rng = numpy.random.default_rng(7)
    mean = rng.normal(size=(4, 6))
    sigma = rng.uniform(0.1, 2.0, size=(4, 6))

    assert numpy.allclose(kl_diag_gaussian(mean, sigma, mean, sigma), 0)
    assert float(kl_diag_gaussian(0.0, 1.0, 1.0, 1.0)) == 0.5
    assert numpy.all(kl_diag_gaussian(mean, sigma, mean[::-1], sigma[::-1]) >= 0)
    assert kl_diag_gaussian(mean, sigma, 0.0, 1.0).shape == (4,)

    with pytest.raises(ValueError):
        kl_diag_gaussian(0.0, 0.0, 0.0, 1.0)


def test_kl_gradient():
    rng = numpy.random.default_rng(8)
    mean = rng.normal(size=5)
    log_sigma = rng.normal(scale=0.5, size=5)
    target_mean = rng.normal(size=5)
    target_sigma = rng.uniform(0.5, 1.5, size=5)
    step = 1e-6

    mean_gradient, log_sigma_gradient = kl_diag_gaussian_gradient(
        mean, log_sigma, target_mean, target_sigma
    )
    for gradient, shift in ((mean_gradient, (1, 0)), (log_sigma_gradient, (0, 1))):
        numerical = numpy.array(
            [
                (
                    kl_diag_gaussian(
                        mean + shift[0] * step * numpy.eye(5)[index],
                        numpy.exp(log_sigma + shift[1] * step * numpy.eye(5)[index]),
                        target_mean,
                        target_sigma,
                    )
                    - kl_diag_gaussian(
                        mean - shift[0] * step * numpy.eye(5)[index],
                        numpy.exp(log_sigma - shift[1] * step * numpy.eye(5)[index]),
                        target_mean,
                        target_sigma,
                    )
                )
                / (2 * step)
                for index in range(5)
            ]
        ).ravel()
        assert numpy.allclose(gradient, numerical, rtol=1e-5, atol=1e-7)


def test_reparam_sample():
    mean = numpy.array([1.0, -1.0, 0.5])
    sigma = numpy.array([0.1, 0.0, 2.0])

    drawn = reparam_sample(mean, sigma, numpy.random.default_rng(9))

    assert numpy.array_equal(drawn.sample, mean + sigma * drawn.noise)
    assert drawn.sample[1] == -1.0
    assert numpy.array_equal(drawn.mean_gradient(numpy.ones(3)), numpy.ones(3))
    assert numpy.array_equal(drawn.sigma_gradient(numpy.ones(3)), drawn.noise)

    with pytest.raises(ValueError):
        reparam_sample(mean, -sigma, numpy.random.default_rng(9))


def test_checkpoint():
    output = output_directory("test_checkpoint")
    encoder = Mlp(MlpSpec.chain(4, [8, 3]), numpy.random.default_rng(10))
    decoder = Mlp(MlpSpec.chain(3, [5, 2]), numpy.random.default_rng(11))
    encoder.forward(numpy.random.default_rng(12).normal(size=(16, 4)), NetworkMode.TRAIN)
    _, state = adamw_step(
        encoder.parameters, {name: numpy.ones_like(value) for name, value in encoder.parameters.items()}
    )

    save_checkpoint(
        output / "prior.ckpt",
        {"encoder": encoder, "decoder": decoder},
        {"encoder": state},
        {"epochs": 3},
    )
    checkpoint = load_checkpoint(output / "prior.ckpt")

    assert checkpoint.metadata == {"epochs": 3}
    assert set(checkpoint.networks) == {"encoder", "decoder"}
    for name, network in (("encoder", encoder), ("decoder", decoder)):
        read = checkpoint.networks[name]
        assert read.spec == network.spec
        for key, value in network.parameters.items():
            assert numpy.array_equal(read.parameters[key], value)
        for key, value in network.buffers.items():
            assert numpy.array_equal(read.buffers[key], value)
    assert checkpoint.optimizers["encoder"].step == 1
    assert numpy.array_equal(
        checkpoint.optimizers["encoder"].second_moment["0.weight"], state.second_moment["0.weight"]
    )
    assert "decoder" not in checkpoint.optimizers


def test_checkpoint_deterministic():
    first = output_directory("test_checkpoint_deterministic") / "first"
    second = output_directory("test_checkpoint_deterministic") / "second"
    first.mkdir(exist_ok=True)
    second.mkdir(exist_ok=True)

    for directory in (first, second):
        network = Mlp(MlpSpec.chain(4, [6, 2]), numpy.random.default_rng(13))
        save_checkpoint(directory / "network.ckpt", {"network": network})

    check_reference_directory(first, second)


def test_checkpoint_invalid():
    output = output_directory("test_checkpoint_invalid")
    (output / "garbage.ckpt").write_bytes(b"not a checkpoint at all")

    with pytest.raises(ValueError):
        load_checkpoint(output / "garbage.ckpt")

    with pytest.raises(FileNotFoundError):
        load_checkpoint(output / "nonexistent.ckpt")

    network = Mlp(MlpSpec.chain(4, [6, 2]), numpy.random.default_rng(14))
    save_checkpoint(output / "truncated.ckpt", {"network": network})
    content = (output / "truncated.ckpt").read_bytes()
    (output / "truncated.ckpt").write_bytes(content[:-16])

    with pytest.raises(ValueError):
        load_checkpoint(output / "truncated.ckpt")
