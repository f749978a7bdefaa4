import numpy
import pytest

from physcapture.character import build_character
from physcapture.character import CharacterModel
from physcapture.character import ReferenceMotion
from physcapture.control import CmaConfig
from physcapture.evaluation import SyntheticTask
from physcapture.evaluation.tasks import simulate_task
from physcapture.prior import decode_pose
from physcapture.prior import DistributionEncoder
from physcapture.prior import DistributionPrior
from physcapture.prior import encode_distribution
from physcapture.prior import evaluate_sampling_loss
from physcapture.prior import generate_training_data
from physcapture.prior import PoseDecoder
from physcapture.prior import pretrain_kl
from physcapture.prior import read_dataset
from physcapture.prior import train_two_branch
from physcapture.prior import TrainConfig
from physcapture.prior import TrainingSet
from physcapture.prior import write_dataset
from physcapture.prior.distribution import kl_batch_loss
from physcapture.prior.distribution import reference_features
from physcapture.prior.distribution import state_features
from physcapture.prior.distribution import two_branch_losses
from physcapture.prior.distribution import two_branch_step
from physcapture.prior.distribution import weight_penalty
from physcapture.prior.net import NetworkMode
from tests import output_directory


@pytest.fixture(scope="module")
def character() -> CharacterModel:
    return build_character()


def small_encoder(seed: int = 0) -> DistributionEncoder:
    return DistributionEncoder(width=16, layers=3, rng=numpy.random.default_rng(seed))


def quiet_encoder(seed: int) -> DistributionEncoder:
    encoder = small_encoder(seed)
    parameters = dict(encoder.network.parameters)
    parameters["2.weight"] = 0.01 * parameters["2.weight"]
    bias = parameters["2.bias"].copy()
    bias[51:] = -3.0
    parameters["2.bias"] = bias
    encoder.network.parameters = parameters
    return encoder


def small_decoder(model: CharacterModel, seed: int = 1) -> PoseDecoder:
    return PoseDecoder(model, width=16, layers=3, rng=numpy.random.default_rng(seed))


def training_set(model: CharacterModel, count: int, seed: int = 0) -> TrainingSet:
    rng = numpy.random.default_rng(seed)
    poses = numpy.tile(model.rest_pose(), (count, 1))
    poses[:, 6:] += rng.normal(scale=0.02, size=(count, model.dof - 6))
    velocities = rng.normal(scale=0.05, size=(count, model.dof))
    ref_poses = poses + rng.normal(scale=0.01, size=poses.shape)
    means = ref_poses[:, 6:] + rng.normal(scale=0.05, size=(count, model.target_dof))
    sigmas = rng.uniform(0.05, 0.2, size=(count, model.target_dof))
    return TrainingSet(numpy.concatenate([poses, velocities], axis=1), ref_poses, means, sigmas)


def test_train_config():
    config = TrainConfig.from_dict({"lambda_kl": 0.5, "batch_size": 16.0})

    assert config.lambda_kl == 0.5
    assert config.batch_size == 16
    assert config.optimizer.weight_decay == 0.01

    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})

    with pytest.raises(ValueError):
        TrainConfig(lambda_kl=1.5)

    with pytest.raises(ValueError):
        TrainConfig(noise_velocity=-0.1)

    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


def test_state_features(character):
    pose = character.rest_pose()
    pose[:2] = [3.0, -2.0]
    velocity = numpy.arange(57.0)

    features = state_features(pose, velocity)

    assert features.shape == (114,)
    assert numpy.all(features[:2] == 0)
    assert numpy.array_equal(features[2:57], pose[2:])
    assert numpy.array_equal(features[57:], velocity)
    # the input is not modified
    assert pose[0] == 3.0


def test_reference_features(character):
    pose = character.rest_pose()
    pose[3:6] = [0.0, 0.0, 0.7]
    pose[6:] = numpy.random.default_rng(2).normal(scale=0.1, size=51)

    same = reference_features(pose, pose)

    assert numpy.allclose(same[:6], 0, atol=1e-12)
    assert numpy.array_equal(same[6:], pose[6:])

    shifted_pose = pose.copy()
    shifted_pose[:2] += [1.5, -0.5]
    reference = pose.copy()
    reference[:3] += [0.1, 0.2, 0.0]
    shifted_reference = reference.copy()
    shifted_reference[:2] += [1.5, -0.5]

    assert numpy.allclose(
        reference_features(pose, reference), reference_features(shifted_pose, shifted_reference)
    )
    assert numpy.isclose(numpy.linalg.norm(reference_features(pose, reference)[:3]), numpy.hypot(0.1, 0.2))


def test_encoder(character):
    encoder = small_encoder()
    dataset = training_set(character, 4)

    mean, sigma = encoder(dataset.poses, dataset.velocities, dataset.ref_poses)
    distribution = encode_distribution(encoder, (dataset.poses[0], dataset.velocities[0]), dataset.ref_poses[0])

    assert mean.shape == sigma.shape == (4, 51)
    assert numpy.all(sigma >= numpy.exp(-5.0))
    assert numpy.all(sigma <= numpy.exp(2.0))
    assert numpy.allclose(distribution.mean, mean[0])
    assert numpy.allclose(distribution.sigma, sigma[0])

    with pytest.raises(ValueError):
        DistributionEncoder(network=small_decoder(character).network)


def test_encoder_clamp(character):
    encoder = small_encoder()
    parameters = dict(encoder.network.parameters)
    bias = parameters["2.bias"].copy()
    bias[51] = 10.0
    bias[52] = -10.0
    parameters["2.weight"] = numpy.zeros(parameters["2.weight"].shape)
    parameters["2.bias"] = bias
    encoder.network.parameters = parameters
    dataset = training_set(character, 2)

    output = encoder.forward(dataset.poses, dataset.velocities, dataset.ref_poses)
    gradients = encoder.backward(output, numpy.zeros((2, 51)), numpy.ones((2, 51)))

    assert numpy.all(output.log_sigma[:, 0] == 2.0)
    assert numpy.all(output.log_sigma[:, 1] == -5.0)
    assert not numpy.any(output.inside[:, :2])
    # clamped outputs pass no gradient
    assert numpy.all(gradients["2.bias"][51:53] == 0)
    assert numpy.all(gradients["2.bias"][53:] == 2)


def test_kl_batch_gradient(character):
    encoder = small_encoder(3)
    dataset = training_set(character, 5, seed=3)
    step = 1e-6

    def loss() -> float:
        return kl_batch_loss(encoder, dataset, NetworkMode.EVAL)[0]

    _, gradients = kl_batch_loss(encoder, dataset, NetworkMode.EVAL)
    original = {name: value.copy() for name, value in encoder.network.parameters.items()}
    for name, index in (("2.bias", (3,)), ("2.bias", (60,)), ("2.weight", (4, 55)), ("0.weight", (10, 2))):
        shifted = {key: value.copy() for key, value in original.items()}
        shifted[name][index] += step
        encoder.network.parameters = shifted
        ahead = loss()
        shifted[name][index] -= 2 * step
        encoder.network.parameters = shifted
        behind = loss()
        numerical = (ahead - behind) / (2 * step)
        assert numpy.isclose(gradients[name][index], numerical, rtol=1e-4, atol=1e-8), name
    encoder.network.parameters = original


def test_decoder(character):
    decoder = small_decoder(character)
    parameters = dict(decoder.network.parameters)
    parameters["2.weight"] = numpy.zeros(parameters["2.weight"].shape)
    parameters["2.bias"] = numpy.zeros(57)
    decoder.network.parameters = parameters
    pose = character.rest_pose()
    pose[:2] = [0.7, -1.2]

    predicted, joints = decode_pose(decoder, numpy.zeros(51), (pose, numpy.zeros(57)))
    batch_predicted, batch_joints = decode_pose(
        decoder, numpy.zeros((3, 51)), (numpy.tile(pose, (3, 1)), numpy.zeros((3, 57)))
    )

    # horizontal root is predicted relative to the start state
    assert numpy.array_equal(predicted[:2], pose[:2])
    assert numpy.all(predicted[2:] == 0)
    assert joints.shape == (19, 3)
    assert batch_predicted.shape == (3, 57)
    assert batch_joints.shape == (3, 19, 3)

    with pytest.raises(ValueError):
        PoseDecoder(character, network=small_encoder().network)


def test_training_set(character):
    dataset = training_set(character, 10)

    training, held_out = dataset.split(0.1, numpy.random.default_rng(0))

    assert dataset.dof == 57
    assert numpy.allclose(dataset.corrections, dataset.means - dataset.ref_poses[:, 6:])
    assert (len(training), len(held_out)) == (9, 1)
    assert len(dataset.data.columns) == 114 + 57 + 51 + 51
    assert len(dataset.subset([0, 3])) == 2

    with pytest.raises(ValueError):
        TrainingSet(dataset.states[:, :100], dataset.ref_poses, dataset.means, dataset.sigmas)

    with pytest.raises(ValueError):
        TrainingSet(dataset.states, dataset.ref_poses, dataset.means, -dataset.sigmas)


def test_dataset_file(character):
    output = output_directory("test_dataset_file")
    dataset = training_set(character, 6)

    write_dataset(output / "pairs.bin", dataset, overwrite=True)
    read = read_dataset(output / "pairs.bin")

    assert numpy.array_equal(read.states, dataset.states)
    assert numpy.array_equal(read.means, dataset.means)
    assert numpy.array_equal(read.sigmas, dataset.sigmas)

    content = (output / "pairs.bin").read_bytes()
    (output / "truncated.bin").write_bytes(content[:-8])
    (output / "garbage.bin").write_bytes(b"garbage bytes that are long enough")

    with pytest.raises(ValueError):
        read_dataset(output / "truncated.bin")

    with pytest.raises(ValueError):
        read_dataset(output / "garbage.bin")

    with pytest.raises(FileNotFoundError):
        read_dataset(output / "nonexistent.bin")


def test_weight_penalty():
    encoder = small_encoder()

    value, gradients = weight_penalty(encoder.network, 1e-5)

    expected = sum(
        (parameter**2).sum()
        for name, parameter in encoder.network.parameters.items()
        if name.endswith(".weight")
    )
    assert numpy.isclose(value, 1e-5 * expected)
    assert numpy.all(gradients["0.bias"] == 0)
    assert numpy.allclose(gradients["1.weight"], 2e-5 * encoder.network.parameters["1.weight"])


def test_two_branch_losses():
    pose = numpy.zeros((2, 57))
    joints = numpy.zeros((2, 19, 3))
    offset_pose = pose + 0.1
    offset_joints = joints.copy()
    offset_joints[:, 0, 2] = 0.5

    losses = two_branch_losses(pose, joints, pose, joints, offset_pose, offset_joints)

    assert numpy.all(losses["sim"] == 0)
    assert numpy.allclose(losses["rec"], 57 * 0.01 + 0.25)


def test_pretrain_kl(character):
    encoder = small_encoder(4)
    dataset = training_set(character, 16, seed=4)
    config = TrainConfig(learning_rate=1e-3, pretrain_epochs=30, batch_size=8, progress=False)

    _, history = pretrain_kl(encoder, dataset, config)

    assert len(history) == 30
    assert history["kl"].iloc[-1] < history["kl"].iloc[0]


def test_two_branch_step(character):
    encoder = quiet_encoder(5)
    decoder = small_decoder(character, 6)
    dataset = training_set(character, 3, seed=5)

    step = two_branch_step(encoder, decoder, dataset, numpy.random.default_rng(0))

    assert step.valid == 3
    assert set(step.losses) == {"sim", "rec", "kl"}
    assert all(numpy.isfinite(value) for value in step.losses.values())
    assert set(step.encoder_gradients) == set(encoder.network.parameters)
    assert set(step.decoder_gradients) == set(decoder.network.parameters)
    assert numpy.any(step.encoder_gradients["0.weight"] != 0)


def test_train_two_branch(character):
    encoder = quiet_encoder(7)
    decoder = small_decoder(character, 8)
    dataset = training_set(character, 4, seed=7)
    validation = training_set(character, 2, seed=8)
    config = TrainConfig(learning_rate=1e-3, two_branch_epochs=2, batch_size=4, progress=False)

    _, _, history = train_two_branch(encoder, decoder, dataset, config=config, validation=validation)

    assert 1 <= len(history) <= 2
    assert {"sim", "rec", "kl", "reg", "total", "held_out"} <= set(history.columns)
    assert numpy.all(numpy.isfinite(history["total"]))


def test_evaluate_sampling_loss(character):
    encoder = quiet_encoder(9)
    dataset = training_set(character, 2, seed=9)

    loss = evaluate_sampling_loss(encoder, dataset, character, samples=4)
    repeated = evaluate_sampling_loss(encoder, dataset, character, samples=4)

    assert 0 <= loss.failure_rate <= 1
    assert loss == repeated


def test_distribution_prior_file(character):
    output = output_directory("test_distribution_prior_file")
    prior = DistributionPrior(small_encoder(10), small_decoder(character, 11))
    dataset = training_set(character, 3, seed=10)

    prior.to_file(output / "prior.ckpt", overwrite=True)
    read = DistributionPrior.from_file(output / "prior.ckpt", character)
    without_decoder = DistributionPrior.from_file(output / "prior.ckpt")

    first = prior.correction(dataset.poses, dataset.velocities, dataset.ref_poses)
    second = read.correction(dataset.poses, dataset.velocities, dataset.ref_poses)
    assert numpy.array_equal(first[0], second[0])
    assert numpy.array_equal(first[1], second[1])
    assert read.decoder is not None
    assert without_decoder.decoder is None

    distribution = prior.distribution((dataset.poses[0], dataset.velocities[0]), dataset.ref_poses[0])
    assert numpy.allclose(distribution.mean, dataset.ref_poses[0, 6:] + first[0][0])


def test_generate_training_data(character):
    motion = ReferenceMotion(
        numpy.arange(6) / 30, numpy.tile(character.rest_pose(), (6, 1)), frame_rate=30.0
    )
    config = TrainConfig(pairs=2, noise_position=0.0, noise_rotation=0.0, noise_velocity=0.0, progress=False)

    dataset = generate_training_data(
        [motion], cma_config=CmaConfig(population=4, generations=1), config=config, model=character
    )

    assert 1 <= len(dataset) <= 2
    assert numpy.all(dataset.sigmas > 0)
    # without noise the start state is the interpolated reference state
    assert numpy.allclose(dataset.poses, character.rest_pose())
    assert numpy.allclose(dataset.velocities, 0)

    with pytest.raises(ValueError):
        generate_training_data([], config=config, model=character)

    with pytest.raises(ValueError):
        generate_training_data(
            [ReferenceMotion([0.0], character.rest_pose()[None])], config=config, model=character
        )


@pytest.fixture(scope="module")
def standing_training(character):
    motion = simulate_task(SyntheticTask("stand", duration=1.0), model=character)
    config = TrainConfig(
        learning_rate=1e-3,
        batch_size=16,
        pretrain_epochs=150,
        two_branch_epochs=20,
        pairs=60,
        noise_velocity=0.3,
        progress=False,
    )
    dataset = generate_training_data(
        [motion],
        cma_config=CmaConfig(population=8, generations=8),
        rng=numpy.random.default_rng(20),
        config=config,
        model=character,
    )
    training, held_out = dataset.split(0.2, numpy.random.default_rng(21))

    encoder = DistributionEncoder(width=64, layers=4, rng=numpy.random.default_rng(22))
    encoder, _ = pretrain_kl(encoder, training, config, numpy.random.default_rng(23))
    pretrained = DistributionEncoder(network=encoder.network.copy())

    decoder = PoseDecoder(character, width=64, layers=3, rng=numpy.random.default_rng(24))
    encoder, decoder, _ = train_two_branch(
        encoder, decoder, training, config=config, rng=numpy.random.default_rng(25), validation=held_out
    )
    return motion, pretrained, encoder, held_out


@pytest.mark.slow
def test_two_branch_lowers_sampling_loss(character, standing_training):
    _, pretrained, trained, held_out = standing_training

    before = evaluate_sampling_loss(pretrained, held_out, character, samples=50, seed=3)
    after = evaluate_sampling_loss(trained, held_out, character, samples=50, seed=3)

    assert numpy.isfinite(before.mean)
    assert after.mean < before.mean


@pytest.mark.slow
def test_correction_grows_with_root_spin(character, standing_training):
    motion, _, trained, _ = standing_training
    pose, velocity = motion.interpolate(0.5)
    ref_pose, _ = motion.interpolate(0.5 + 1 / 30)

    spins = numpy.tile(velocity, (4, 1))
    spins[:, 3:5] += 0.5 * numpy.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    poses = numpy.tile(pose, (5, 1))
    velocities = numpy.concatenate([velocity[None], spins])
    means, _ = trained(poses, velocities, numpy.tile(ref_pose, (5, 1)))

    norms = numpy.linalg.norm(means, axis=1)
    assert norms[1:].mean() > norms[0]
