"""
synthetic ground-truth motions, simulated from scripted target-pose programs
"""

from dataclasses import dataclass
from enum import Enum
import logging
from typing import Tuple

import numpy
import typepigeon

from physcapture.character.const import FOOT_JOINTS
from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import forward_kinematics
from physcapture.kinematic.camera import Camera
from physcapture.kinematic.camera import ObservationSequence
from physcapture.kinematic.camera import synthesize_observations
from physcapture.physics.scene import SceneGeometry
from physcapture.physics.world import control_step
from physcapture.physics.world import SimConfig
from physcapture.physics.world import SimWorld
from physcapture.utilities import ROOT_DOF


class TaskName(Enum):
    STAND = "stand"
    SQUAT = "squat"
    WALK_IN_PLACE = "walk-in-place"
    LIFT_LEG = "lift-leg"
    STAIR_STEP = "stair-step"


class TaskGenerationError(RuntimeError):
    pass


# default peak joint angle per task, in radians
TASK_AMPLITUDES = {
    TaskName.STAND: 0.0,
    TaskName.SQUAT: 0.4,
    TaskName.WALK_IN_PLACE: 0.3,
    TaskName.LIFT_LEG: 0.5,
    TaskName.STAIR_STEP: 0.75,
}

# stair-step knee flexion while the foot swings over the first riser
STAIR_CLEARANCE_KNEE = 1.2

# ankle corrections of the balance feedback are clipped to this, in radians
BALANCE_LIMIT = 0.3


@dataclass
class SyntheticTask:
    """
    scripted task; the character first settles at rest for ``settle`` seconds, then the program runs for
    ``duration`` seconds and is recorded at ``frame_rate``
    """

    name: TaskName
    duration: float = 2.0
    frame_rate: float = 30.0
    settle: float = 0.5
    amplitude: float = None
    period: float = None
    balance_gain: float = 2.0
    balance_damping: float = 0.3
    observation_noise: float = 0.0
    fall_height: float = 0.3
    # largest coordinate speed at the end of the settle phase
    settle_speed: float = 1.0

    def __post_init__(self):
        self.name = typepigeon.convert_value(self.name, TaskName)
        if not self.duration > 0:
            raise ValueError(f'task duration must be positive, not "{self.duration}"')
        if not self.frame_rate > 0:
            raise ValueError(f'frame rate must be positive, not "{self.frame_rate}"')
        if self.settle < 0:
            raise ValueError(f'settle time must be non-negative, not "{self.settle}"')
        if self.observation_noise < 0:
            raise ValueError(
                f'observation noise must be non-negative, not "{self.observation_noise}"'
            )
        if self.amplitude is None:
            self.amplitude = TASK_AMPLITUDES[self.name]
        if self.period is None:
            self.period = 1.0 if self.name == TaskName.WALK_IN_PLACE else self.duration
        if not self.period > 0:
            raise ValueError(f'period must be positive, not "{self.period}"')

    @property
    def frames(self) -> int:
        return int(round(self.duration * self.frame_rate)) + 1

    def scene(self) -> SceneGeometry:
        if self.name == TaskName.STAIR_STEP:
            return SceneGeometry.staircase()
        return SceneGeometry.flat_ground()

    def program(self, model: CharacterModel, time: float) -> Tuple[numpy.ndarray, float]:
        """
        scripted target pose of the task

        :param model: character model
        :param time: seconds since the end of the settle phase; negative during settling
        :return: target pose ``(3 * movable,)`` and the share of the weight carried by the right foot
        """

        target = numpy.zeros(model.target_dof)
        if time < 0:
            return target, 0.5
        phase = min(time / self.duration, 1.0)

        if self.name == TaskName.SQUAT:
            angle = self.amplitude * (1 - numpy.cos(2 * numpy.pi * time / self.period)) / 2
            for side in ("left", "right"):
                _flex_leg(model, target, side, angle, 2 * angle)
            return target, 0.5

        if self.name == TaskName.WALK_IN_PLACE:
            swing = numpy.sin(2 * numpy.pi * time / self.period)
            left = self.amplitude * max(swing, 0.0)
            right = self.amplitude * max(-swing, 0.0)
            _flex_leg(model, target, "left", left, 2 * left)
            _flex_leg(model, target, "right", right, 2 * right)
            return target, 0.5 + 0.5 * numpy.tanh(8 * swing)

        if self.name == TaskName.LIFT_LEG:
            # shift the weight, lift, hold and lower within the duration
            shift = _ramp(phase, 0.0, 0.25)
            lift = _ramp(phase, 0.25, 0.45) - _ramp(phase, 0.75, 0.95)
            angle = self.amplitude * lift
            _flex_leg(model, target, "left", angle, 2 * angle, flat_foot=False)
            return target, 0.5 + 0.5 * shift

        if self.name == TaskName.STAIR_STEP:
            shift = _ramp(phase, 0.0, 0.2) - _ramp(phase, 0.7, 0.9)
            raise_leg = _ramp(phase, 0.2, 0.4)
            extend = _ramp(phase, 0.4, 0.6)
            hip = self.amplitude * raise_leg + 0.15 * raise_leg * (1 - extend)
            knee = raise_leg * (
                STAIR_CLEARANCE_KNEE * (1 - extend) + (self.amplitude - 0.2) * extend
            )
            _flex_leg(model, target, "left", hip, knee)
            return target, 0.5 + 0.5 * shift

        return target, 0.5


def _ramp(value: float, start: float, stop: float) -> float:
    """smooth step from 0 at ``start`` to 1 at ``stop``"""

    fraction = numpy.clip((value - start) / (stop - start), 0.0, 1.0)
    return float(fraction * fraction * (3 - 2 * fraction))


def target_column(model: CharacterModel, joint: str, axis: int = 0) -> int:
    """
    :param model: character model
    :param joint: movable joint name
    :param axis: rotation-vector component
    :return: column of the joint component in a target pose
    """

    column = model.dof_index[model.joint_index(joint) + 1]
    if column < 0:
        raise ValueError(f'joint "{joint}" is not movable')
    return int(column) - ROOT_DOF + axis


def _flex_leg(
    model: CharacterModel,
    target: numpy.ndarray,
    side: str,
    hip: float,
    knee: float,
    flat_foot: bool = True,
):
    # hip flexion is negative about x, knee flexion positive; the ankle keeps the sole parallel to the pelvis
    target[target_column(model, f"{side}_hip")] = -hip
    target[target_column(model, f"{side}_knee")] = knee
    if flat_foot:
        target[target_column(model, f"{side}_ankle")] = hip - knee


def _balance(
    task: SyntheticTask,
    model: CharacterModel,
    pose: numpy.ndarray,
    com_velocity: numpy.ndarray,
    right_share: float,
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    ankle-strategy feedback moving the center of mass over the weighted support point

    :return: ankle correction ``(x, y)`` and the center of mass
    """

    joints, com = forward_kinematics(model, pose)
    left, right = (joints[model.joint_index(name), :2] for name in FOOT_JOINTS)
    support = (1 - right_share) * left + right_share * right
    offset = com[:2] - support
    correction = numpy.array(
        [
            -task.balance_gain * offset[1] - task.balance_damping * com_velocity[1],
            task.balance_gain * offset[0] + task.balance_damping * com_velocity[0],
        ]
    )
    return numpy.clip(correction, -BALANCE_LIMIT, BALANCE_LIMIT), com


def simulate_task(
    task: SyntheticTask,
    scene: SceneGeometry = None,
    model: CharacterModel = None,
    sim_config: SimConfig = None,
) -> ReferenceMotion:
    """
    run the scripted program of a task in the simulator and record the trajectory

    :param task: task
    :param scene: scene, defaults to the task's
    :param model: character, defaults to the built character
    :param sim_config: simulator settings
    :return: recorded motion, timed from the end of the settle phase
    """

    if scene is None:
        scene = task.scene()
    if model is None:
        model = build_character()
    if sim_config is None:
        sim_config = SimConfig()

    steps_per_frame = 1 / (task.frame_rate * sim_config.dt)
    if abs(steps_per_frame - round(steps_per_frame)) > 1e-6:
        raise ValueError(
            f'frame rate "{task.frame_rate}" is not a whole number of control steps of "{sim_config.dt}"'
        )
    steps_per_frame = int(round(steps_per_frame))
    settle_steps = int(round(task.settle / sim_config.dt))

    world = SimWorld(model, model.rest_pose(), scene=scene, config=sim_config)
    feet = {
        side: [target_column(model, f"{side}_ankle", axis) for axis in (0, 1)]
        for side in ("left", "right")
    }
    _, com = forward_kinematics(model, world.pose[0])
    com_velocity = numpy.zeros(3)

    poses = []
    total_steps = settle_steps + (task.frames - 1) * steps_per_frame
    for index in range(total_steps + 1):
        time = (index - settle_steps) * sim_config.dt
        if index >= settle_steps and (index - settle_steps) % steps_per_frame == 0:
            poses.append(world.pose[0])
        if index == settle_steps:
            speed = float(numpy.abs(world.velocity).max())
            if speed > task.settle_speed:
                raise TaskGenerationError(
                    f'task "{task.name.value}" did not settle (coordinate speed "{speed:.3f}")'
                )
        if index == total_steps:
            break

        target, right_share = task.program(model, time)
        correction, new_com = _balance(task, model, world.pose[0], com_velocity, right_share)
        com_velocity = (new_com - com) / sim_config.dt
        com = new_com
        for side, share in (("left", 1 - right_share), ("right", right_share)):
            if share > 0.05:
                target[feet[side]] += correction

        world = control_step(world, target, raise_on_divergence=False)
        if world.diverged[0]:
            raise TaskGenerationError(
                f'simulation of task "{task.name.value}" diverged at "{time:.3f}" s'
            )
        if world.pose[0, 2] < task.fall_height:
            raise TaskGenerationError(
                f'character fell during task "{task.name.value}" at "{time:.3f}" s'
            )

    timestamps = numpy.arange(task.frames) / task.frame_rate
    logging.info(f'simulated task "{task.name.value}" ({task.frames} frames)')
    return ReferenceMotion(timestamps, numpy.stack(poses), task.frame_rate, model.scale)


def synthesize_task(
    task: SyntheticTask,
    scene: SceneGeometry = None,
    seed: int = 0,
    camera: Camera = None,
    model: CharacterModel = None,
    sim_config: SimConfig = None,
) -> Tuple[ReferenceMotion, ObservationSequence]:
    """
    ground-truth motion of a task and its 2D observations

    :param task: task, or a task name
    :param scene: scene, defaults to the task's
    :param seed: seed of the observation noise
    :param camera: camera, defaults to a camera 4 m in front of the character
    :param model: character, defaults to the built character
    :param sim_config: simulator settings
    :return: ground-truth motion and observations
    """

    if not isinstance(task, SyntheticTask):
        task = SyntheticTask(task)
    if scene is None:
        scene = task.scene()
    if camera is None:
        camera = Camera.look_at()
    if model is None:
        model = build_character()

    motion = simulate_task(task, scene, model, sim_config)
    observations = synthesize_observations(
        model, motion, camera, scene=scene, noise=task.observation_noise, seed=seed
    )
    return motion, observations


def corrupt_motion(
    motion: ReferenceMotion,
    noise: float = 0.02,
    translation_noise: float = 0.01,
    seed: int = 0,
) -> ReferenceMotion:
    """
    add independent Gaussian noise to every frame, standing in for a jittery kinematic estimate

    :param motion: clean motion
    :param noise: standard deviation on rotation coordinates, in radians
    :param translation_noise: standard deviation on the root translation, in meters
    :param seed: noise seed
    :return: noisy motion
    """

    if noise < 0 or translation_noise < 0:
        raise ValueError(
            f'noise must be non-negative, not "{noise}" and "{translation_noise}"'
        )
    rng = numpy.random.default_rng(seed)
    poses = numpy.array(motion.poses)
    poses[:, :3] += rng.normal(0.0, translation_noise, poses[:, :3].shape)
    poses[:, 3:] += rng.normal(0.0, noise, poses[:, 3:].shape)
    return ReferenceMotion(motion.timestamps, poses, motion.frame_rate, motion.scale)
