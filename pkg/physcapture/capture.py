from os import PathLike
from typing import Union

from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.character.skeleton import CharacterModel
from physcapture.control.cmaes import CmaConfig
from physcapture.control.sampling import build_provider
from physcapture.control.sampling import capture_motion
from physcapture.control.sampling import CaptureResult
from physcapture.control.sampling import SamplerConfig
from physcapture.evaluation.experiments import evaluate_capture
from physcapture.evaluation.experiments import evaluate_motion
from physcapture.evaluation.metrics import MetricsReport
from physcapture.evaluation.tasks import synthesize_task
from physcapture.evaluation.tasks import SyntheticTask
from physcapture.kinematic.camera import Camera
from physcapture.kinematic.camera import ObservationSequence
from physcapture.kinematic.optimize import KinematicConfig
from physcapture.kinematic.optimize import optimize_reference
from physcapture.physics.scene import SceneGeometry
from physcapture.physics.world import SimConfig
from physcapture.prior.distribution import DistributionPrior


class MotionCapture:
    """
    The ``MotionCapture`` class chains the stages of capturing one performance: kinematic reference estimation from 2D
    observations, physics-based tracking of the reference, and evaluation against a ground truth when one is known.
    """

    def __init__(
        self,
        observations: ObservationSequence,
        scene: SceneGeometry = None,
        model: CharacterModel = None,
        sim_config: SimConfig = None,
        ground_truth: ReferenceMotion = None,
    ):
        """
        :param observations: 2D keypoints of the performance
        :param scene: scene geometry, defaults to flat ground
        :param model: unit-scale character model
        :param sim_config: simulator settings
        :param ground_truth: known motion of the performance
        """

        if scene is None:
            scene = SceneGeometry.flat_ground()
        if model is None:
            model = build_character()
        if sim_config is None:
            sim_config = SimConfig()
        observations.check_model(model)

        self.__observations = observations
        self.__scene = scene
        self.__model = model
        self.__sim_config = sim_config
        self.__ground_truth = ground_truth

        self.__reference = None
        self.__previous_configuration = None

    @classmethod
    def from_task(
        cls,
        task: Union[SyntheticTask, str],
        seed: int = 0,
        camera: Camera = None,
        sim_config: SimConfig = None,
    ) -> "MotionCapture":
        """
        simulate a synthetic task and observe it

        :param task: task or task name
        :param seed: seed of the observation noise
        :param camera: camera observing the task
        :param sim_config: simulator settings
        :return: capture of the task, with its ground truth
        """

        if not isinstance(task, SyntheticTask):
            task = SyntheticTask(task)
        model = build_character()
        scene = task.scene()
        ground_truth, observations = synthesize_task(
            task, scene=scene, seed=seed, camera=camera, model=model, sim_config=sim_config
        )
        return cls(
            observations,
            scene=scene,
            model=model,
            sim_config=sim_config,
            ground_truth=ground_truth,
        )

    @classmethod
    def from_files(
        cls,
        observations: PathLike,
        camera: PathLike,
        scene: PathLike = None,
        sim_config: SimConfig = None,
    ) -> "MotionCapture":
        """
        :param observations: keypoint CSV
        :param camera: camera file with K and Rt lines
        :param scene: scene TOML, defaults to flat ground
        :param sim_config: simulator settings
        :return: capture of the observed performance
        """

        if scene is not None:
            scene = SceneGeometry.from_file(scene)
        return cls(
            ObservationSequence.from_file(observations, camera),
            scene=scene,
            sim_config=sim_config,
        )

    @property
    def observations(self) -> ObservationSequence:
        return self.__observations

    @property
    def scene(self) -> SceneGeometry:
        return self.__scene

    @property
    def model(self) -> CharacterModel:
        return self.__model

    @property
    def sim_config(self) -> SimConfig:
        return self.__sim_config

    @property
    def ground_truth(self) -> ReferenceMotion:
        return self.__ground_truth

    def reference(
        self,
        config: KinematicConfig = None,
        init: ReferenceMotion = None,
        interaction: bool = None,
    ) -> ReferenceMotion:
        """
        kinematic reference motion fitted to the observations; the fit is kept until the settings change

        :param config: optimizer settings
        :param init: initial motion
        :param interaction: override of the foot-to-scene term
        :return: reference motion with the estimated skeleton scale
        """

        if config is None:
            config = KinematicConfig()
        configuration = {
            "config": config.__dict__.copy(),
            "init": id(init),
            "interaction": interaction,
        }
        if self.__reference is None or configuration != self.__previous_configuration:
            self.__reference = optimize_reference(
                self.__observations,
                self.__scene,
                init=init,
                model=self.__model,
                config=config,
                interaction=interaction,
            )
            self.__previous_configuration = configuration
        return self.__reference

    def capture(
        self,
        reference: ReferenceMotion = None,
        prior: DistributionPrior = None,
        config: SamplerConfig = None,
        cma_config: CmaConfig = None,
        use_observations: bool = True,
    ) -> CaptureResult:
        """
        track the reference motion in the simulator

        :param reference: motion to track, defaults to the fitted reference
        :param prior: trained distribution prior of the neural-prior mode
        :param config: sampler settings
        :param cma_config: settings of the CMA baseline
        :param use_observations: include the reprojection term
        :return: capture result
        """

        if reference is None:
            reference = self.reference()
        if config is None:
            config = SamplerConfig()
        provider = build_provider(config, prior=prior, cma_config=cma_config)
        return capture_motion(
            reference,
            self.__observations if use_observations else None,
            scene=self.__scene,
            provider=provider,
            config=config,
            sim_config=self.__sim_config,
        )

    def evaluate(self, result: Union[CaptureResult, ReferenceMotion]) -> MetricsReport:
        """
        :param result: capture result or kinematic motion
        :return: metrics against the ground truth
        """

        if self.__ground_truth is None:
            raise ValueError("no ground truth to evaluate against")
        if isinstance(result, CaptureResult):
            return evaluate_capture(result, self.__ground_truth)
        return evaluate_motion(result, self.__ground_truth)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(frames={len(self.__observations)}, scene={self.__scene!r}, ground_truth={self.__ground_truth is not None})"
