"""
command line of the capture pipeline; every stage reads and writes files, so stages can be chained or rerun alone
"""

from argparse import ArgumentParser
from argparse import Namespace
from dataclasses import replace
import logging
from os import PathLike
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List

import numpy
import pandas
import toml

from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.control.cmaes import CmaConfig
from physcapture.control.sampling import build_provider
from physcapture.control.sampling import capture_motion
from physcapture.control.sampling import SamplerConfig
from physcapture.control.sampling import SamplingMode
from physcapture.evaluation.experiments import evaluate_motion
from physcapture.evaluation.experiments import run_success_experiment
from physcapture.evaluation.tasks import synthesize_task
from physcapture.evaluation.tasks import SyntheticTask
from physcapture.evaluation.tasks import TaskName
from physcapture.kinematic.camera import Camera
from physcapture.kinematic.camera import ObservationSequence
from physcapture.kinematic.optimize import KinematicConfig
from physcapture.kinematic.optimize import optimize_reference
from physcapture.physics.scene import SceneGeometry
from physcapture.physics.sdf import bake_sdf
from physcapture.physics.sdf import SdfGrid
from physcapture.physics.world import SimConfig
from physcapture.prior.distribution import DistributionEncoder
from physcapture.prior.distribution import DistributionPrior
from physcapture.prior.distribution import evaluate_sampling_loss
from physcapture.prior.distribution import generate_training_data
from physcapture.prior.distribution import PoseDecoder
from physcapture.prior.distribution import pretrain_kl
from physcapture.prior.distribution import read_dataset
from physcapture.prior.distribution import train_two_branch
from physcapture.prior.distribution import TrainConfig
from physcapture.prior.distribution import write_dataset

CONFIGURATION_TABLES = ("simulation", "sampler", "cma", "training", "kinematic")

# values of ``--prior`` that select a baseline instead of a checkpoint
BASELINE_PRIORS = {
    "cma": SamplingMode.CMA_BASELINE,
    "uniform": SamplingMode.UNIFORM_BASELINE,
    "gaussian": SamplingMode.GAUSSIAN_FIXED,
}


def read_configuration(path: PathLike = None) -> Dict[str, Dict[str, Any]]:
    """
    :param path: TOML file with ``[simulation]``, ``[sampler]``, ``[cma]``, ``[training]`` and ``[kinematic]`` tables
    :return: settings per table, empty tables for those not in the file
    """

    configuration = {table: {} for table in CONFIGURATION_TABLES}
    if path is None:
        return configuration
    if not isinstance(path, Path):
        path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'configuration file "{path}" does not exist')
    values = toml.load(path)
    unknown = set(values) - set(CONFIGURATION_TABLES)
    if len(unknown) > 0:
        raise ValueError(f'unknown configuration tables "{sorted(unknown)}"')
    configuration.update(values)
    return configuration


def _overrides(args: Namespace, names: Dict[str, str]) -> Dict[str, Any]:
    """flags given on the command line, keyed by setting name"""

    return {
        setting: getattr(args, flag)
        for flag, setting in names.items()
        if getattr(args, flag, None) is not None
    }


def simulation_config(args: Namespace, configuration: dict) -> SimConfig:
    values = dict(configuration["simulation"])
    if args.threads is not None:
        values["threads"] = args.threads
    return SimConfig.from_dict(values)


def sampler_config(args: Namespace, configuration: dict) -> SamplerConfig:
    values = dict(configuration["sampler"])
    values.update(
        _overrides(args, {"samples": "samples", "keep": "keep", "attempts": "max_attempts"})
    )
    if args.seed is not None:
        values["seed"] = args.seed
    if args.no_progress:
        values["progress"] = False
    return SamplerConfig.from_dict(values)


def training_config(args: Namespace, configuration: dict) -> TrainConfig:
    values = dict(configuration["training"])
    values.update(
        _overrides(
            args,
            {
                "epochs": "two_branch_epochs",
                "pretrain_epochs": "pretrain_epochs",
                "lambda_kl": "lambda_kl",
                "batch_size": "batch_size",
                "learning_rate": "learning_rate",
                "pairs": "pairs",
                "noise_position": "noise_position",
                "noise_rotation": "noise_rotation",
                "noise_velocity": "noise_velocity",
            },
        )
    )
    if args.seed is not None:
        values["seed"] = args.seed
    if args.no_progress:
        values["progress"] = False
    return TrainConfig.from_dict(values)


def _seed(args: Namespace) -> int:
    return 0 if args.seed is None else args.seed


def _scene(path: PathLike = None) -> SceneGeometry:
    if path is None:
        return SceneGeometry.flat_ground()
    return SceneGeometry.from_file(path)


def _write(instance, path: PathLike, overwrite: bool):
    instance.to_file(path, overwrite=overwrite)
    logging.info(f'wrote "{path}"')


def synth_motion(args: Namespace, configuration: dict) -> int:
    task = SyntheticTask(
        args.task,
        duration=args.duration,
        observation_noise=args.noise,
    )
    camera = Camera.look_at() if args.camera is None else Camera.from_file(args.camera)
    scene = task.scene()
    motion, observations = synthesize_task(
        task,
        scene=scene,
        seed=_seed(args),
        camera=camera,
        sim_config=simulation_config(args, configuration),
    )
    _write(motion, args.out, args.overwrite)
    if args.obs is not None:
        _write(observations, args.obs, args.overwrite)
    if args.camera_out is not None:
        _write(camera, args.camera_out, args.overwrite)
    if args.scene_out is not None:
        _write(scene, args.scene_out, args.overwrite)
    return 0


def bake(args: Namespace, configuration: dict) -> int:
    scene = _scene(args.scene)
    bounds = numpy.asarray(args.bounds, dtype=float).reshape(2, 3)
    grid = bake_sdf(scene, (bounds[0], bounds[1]), args.resolution)
    _write(grid, args.out, args.overwrite)
    return 0


def optimize_ref(args: Namespace, configuration: dict) -> int:
    observations = ObservationSequence.from_file(args.obs, args.camera)
    scene = SdfGrid.from_file(args.sdf) if args.sdf is not None else _scene(args.scene)
    values = dict(configuration["kinematic"])
    values.update(_overrides(args, {"iterations": "iterations"}))
    init = ReferenceMotion.from_file(args.init) if args.init is not None else None
    motion = optimize_reference(
        observations,
        scene,
        init=init,
        config=KinematicConfig.from_dict(values),
        interaction=False if args.no_interaction else None,
    )
    _write(motion, args.out, args.overwrite)
    return 0


def _training_data(args: Namespace, configuration: dict, config: TrainConfig):
    motions = [ReferenceMotion.from_file(path) for path in args.ref]
    return generate_training_data(
        motions,
        scene=_scene(args.scene),
        cma_config=CmaConfig.from_dict(configuration["cma"]),
        config=config,
        sim_config=simulation_config(args, configuration),
    )


def gen_data(args: Namespace, configuration: dict) -> int:
    if args.ref is None:
        raise ValueError("data generation needs reference motions (--ref)")
    dataset = _training_data(args, configuration, training_config(args, configuration))
    write_dataset(args.out, dataset, overwrite=args.overwrite)
    logging.info(f'wrote "{len(dataset)}" training pairs to "{args.out}"')
    return 0


def train_prior(args: Namespace, configuration: dict) -> int:
    config = training_config(args, configuration)
    if args.data is not None:
        dataset = read_dataset(args.data)
    elif args.ref is not None:
        dataset = _training_data(args, configuration, config)
    else:
        raise ValueError("training needs a dataset (--data) or reference motions (--ref)")

    model = build_character()
    sim_config = simulation_config(args, configuration)
    scene = _scene(args.scene)
    rng = numpy.random.default_rng(config.seed)
    training, validation = dataset.split(config.validation_fraction, rng)
    if len(validation) == 0:
        validation = None

    encoder = DistributionEncoder(
        model.dof, model.target_dof, width=config.encoder_width, rng=rng
    )
    encoder, pretrain_history = pretrain_kl(encoder, training, config, rng)
    decoder = PoseDecoder(model, width=config.decoder_width, rng=rng)
    encoder, decoder, history = train_two_branch(
        encoder, decoder, training, scene, sim_config, config, rng, validation
    )

    prior = DistributionPrior(encoder, decoder)
    _write(prior, args.out, args.overwrite)
    if args.history is not None:
        pretrain_history.insert(0, "stage", "pretrain")
        history.insert(0, "stage", "two-branch")
        pandas.concat([pretrain_history, history]).to_csv(args.history)

    if validation is not None:
        loss = evaluate_sampling_loss(
            encoder,
            validation,
            model,
            scene,
            sim_config,
            samples=config.sampling_samples,
            seed=config.seed,
        )
        logging.info(
            f'held-out sampling loss "{loss.mean:.4f}" with failure rate "{loss.failure_rate:.3f}"'
        )
    return 0


def capture(args: Namespace, configuration: dict) -> int:
    reference = ReferenceMotion.from_file(args.ref)
    observations = None
    if args.obs is not None:
        if args.camera is None:
            raise ValueError("observations need a camera (--camera)")
        observations = ObservationSequence.from_file(args.obs, args.camera)

    config = sampler_config(args, configuration)
    prior = None
    if args.prior in BASELINE_PRIORS:
        mode = BASELINE_PRIORS[args.prior]
    else:
        mode = SamplingMode.NEURAL_PRIOR
        prior = DistributionPrior.from_file(args.prior)
    config = replace(config, mode=mode)

    provider = build_provider(
        config, prior=prior, cma_config=CmaConfig.from_dict(configuration["cma"])
    )
    result = capture_motion(
        reference,
        observations,
        scene=_scene(args.scene),
        provider=provider,
        config=config,
        sim_config=simulation_config(args, configuration),
    )

    out = Path(args.out)
    if out.suffix == "":
        out = out.with_suffix(".motion")
    _write(result, out, args.overwrite)
    if out.suffix == ".motion":
        _write(result, out.with_suffix(".csv"), args.overwrite)

    if not result.success:
        logging.warning(f'capture failed at frame "{result.failed_frame}"')
        return 1
    return 0


def evaluate(args: Namespace, configuration: dict) -> int:
    predicted = ReferenceMotion.from_file(args.pred)
    ground_truth = ReferenceMotion.from_file(args.gt)
    report = evaluate_motion(predicted, ground_truth)
    print(report.summary())
    if args.out is not None:
        _write(report, args.out, args.overwrite)
    return 0


def success_experiment(args: Namespace, configuration: dict) -> int:
    prior = DistributionPrior.from_file(args.prior) if args.prior is not None else None
    modes = args.modes
    if modes is None:
        modes = [mode.value for mode in SamplingMode if mode != SamplingMode.DELTA]
    if prior is None and SamplingMode.NEURAL_PRIOR.value in modes:
        logging.warning("no prior checkpoint given; skipping the neural-prior mode")
        modes = [mode for mode in modes if mode != SamplingMode.NEURAL_PRIOR.value]

    simulation = dict(configuration["simulation"])
    report = run_success_experiment(
        task=args.task,
        modes=modes,
        trials=args.trials,
        seed=_seed(args),
        prior=prior,
        sampler_config=sampler_config(args, configuration),
        cma_config=CmaConfig.from_dict(configuration["cma"]),
        sim_config=SimConfig.from_dict(simulation),
        threads=1 if args.threads is None else args.threads,
        progress=not args.no_progress,
    )
    print(report.to_string(index=False))
    if args.out is not None:
        path = Path(args.out)
        if path.exists() and not args.overwrite:
            logging.warning(f'skipping existing file "{path}"')
        else:
            report.to_csv(path, index=False)
    return 0


def parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--config", help="TOML file of settings tables")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--overwrite", action="store_true", help="overwrite existing outputs")
    common.add_argument("--no-progress", action="store_true", help="hide progress bars")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="log debug messages")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="log warnings and errors only")

    root = ArgumentParser(
        prog="physcapture", description="physics-based motion capture from 2D keypoints"
    )
    commands = root.add_subparsers(dest="command", required=True)

    command = commands.add_parser(
        "synth-motion", parents=[common], help="simulate a synthetic task and observe it"
    )
    command.add_argument("--task", choices=[task.value for task in TaskName], default="stand")
    command.add_argument("--duration", type=float, default=2.0, help="seconds")
    command.add_argument("--noise", type=float, default=0.0, help="pixel noise")
    command.add_argument("--camera", help="camera file, defaults to a camera 4 m in front")
    command.add_argument("--out", required=True, help="ground-truth motion file")
    command.add_argument("--obs", help="keypoint CSV output")
    command.add_argument("--camera-out", help="camera file output")
    command.add_argument("--scene-out", help="scene TOML output")
    command.set_defaults(handler=synth_motion)

    command = commands.add_parser("bake-sdf", parents=[common], help="bake a scene distance field")
    command.add_argument("--scene", help="scene TOML, defaults to flat ground")
    command.add_argument(
        "--bounds",
        type=float,
        nargs=6,
        default=[-2.0, -2.0, -0.5, 2.0, 2.0, 2.5],
        metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"),
    )
    command.add_argument("--resolution", type=int, default=256)
    command.add_argument("--out", required=True, help="binary SDF output")
    command.set_defaults(handler=bake)

    command = commands.add_parser(
        "optimize-ref", parents=[common], help="fit a kinematic reference to 2D keypoints"
    )
    command.add_argument("--obs", required=True, help="keypoint CSV")
    command.add_argument("--camera", required=True, help="camera file (K and Rt lines)")
    scene = command.add_mutually_exclusive_group()
    scene.add_argument("--scene", help="scene TOML")
    scene.add_argument("--sdf", help="baked SDF")
    command.add_argument("--init", help="initial motion file")
    command.add_argument("--iterations", type=int, help="iterations per stage")
    command.add_argument("--no-interaction", action="store_true", help="drop the foot-to-scene term")
    command.add_argument("--out", required=True, help="reference motion output")
    command.set_defaults(handler=optimize_ref)

    noise = ArgumentParser(add_help=False)
    noise.add_argument("--ref", nargs="+", help="reference motion files")
    noise.add_argument("--scene", help="scene TOML")
    noise.add_argument("--pairs", type=int, help="training pairs")
    noise.add_argument("--noise-position", type=float, help="start-state position noise")
    noise.add_argument("--noise-rotation", type=float, help="start-state rotation noise")
    noise.add_argument("--noise-velocity", type=float, help="start-state velocity noise")

    command = commands.add_parser(
        "gen-data", parents=[common, noise], help="search pseudo ground-truth distributions with CMA-ES"
    )
    command.add_argument("--out", required=True, help="dataset output")
    command.set_defaults(handler=gen_data)

    command = commands.add_parser(
        "train-prior", parents=[common, noise], help="train the distribution prior"
    )
    command.add_argument("--data", help="dataset file; generated from --ref when not given")
    command.add_argument("--epochs", type=int, help="two-branch epochs")
    command.add_argument("--pretrain-epochs", type=int, help="KL pretraining epochs")
    command.add_argument("--lambda-kl", type=float, help="KL weight of two-branch training")
    command.add_argument("--batch-size", type=int)
    command.add_argument("--learning-rate", type=float)
    command.add_argument("--history", help="CSV of the losses per epoch")
    command.add_argument("--out", required=True, help="checkpoint output")
    command.set_defaults(handler=train_prior)

    command = commands.add_parser(
        "capture", parents=[common], help="track a reference motion in the simulator"
    )
    command.add_argument("--ref", required=True, help="reference motion file")
    command.add_argument("--obs", help="keypoint CSV for the reprojection term")
    command.add_argument("--camera", help="camera file (K and Rt lines)")
    command.add_argument("--scene", help="scene TOML")
    command.add_argument(
        "--prior",
        default="cma",
        help=f"prior checkpoint, or one of {sorted(BASELINE_PRIORS)}",
    )
    command.add_argument("--samples", type=int, help="samples per frame")
    command.add_argument("--keep", type=int, help="saved samples per frame")
    command.add_argument("--attempts", type=int, help="capture attempts with fresh seeds")
    command.add_argument("--out", required=True, help="result (.motion, .csv or .nc)")
    command.set_defaults(handler=capture)

    command = commands.add_parser("eval", parents=[common], help="metrics against a ground truth")
    command.add_argument("--pred", required=True, help="predicted motion file")
    command.add_argument("--gt", required=True, help="ground-truth motion file")
    command.add_argument("--out", help="metrics CSV")
    command.set_defaults(handler=evaluate)

    command = commands.add_parser(
        "success-exp", parents=[common], help="success rates of the sampling modes"
    )
    command.add_argument("--task", choices=[task.value for task in TaskName], default="lift-leg")
    command.add_argument(
        "--modes",
        nargs="+",
        choices=[mode.value for mode in SamplingMode],
        help="modes to compare",
    )
    command.add_argument("--trials", type=int, default=30)
    command.add_argument("--prior", help="prior checkpoint of the neural-prior mode")
    command.add_argument("--samples", type=int, help="samples per frame")
    command.add_argument("--keep", type=int, help="saved samples per frame")
    command.add_argument("--attempts", type=int, help="capture attempts with fresh seeds")
    command.add_argument("--out", help="report CSV")
    command.set_defaults(handler=success_experiment)

    return root


def main(argv: List[str] = None) -> int:
    args = parser().parse_args(argv)
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)-8s %(message)s")
    return args.handler(args, read_configuration(args.config))


if __name__ == "__main__":
    raise SystemExit(main())
