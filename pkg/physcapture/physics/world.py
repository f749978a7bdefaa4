"""
batched simulation worlds, PD control and rollouts

a ``SimWorld`` holds a batch of states of one character; a single world is a batch of one. Stepping is a pure function
returning a new world, so clones can be rolled out concurrently
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import fields
import logging
from os import PathLike
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Tuple
from typing import Union

import numpy

from physcapture.character.motion import write_motion_file
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import CharacterState
from physcapture.character.skeleton import TargetPose
from physcapture.physics.contact import ContactImpulses
from physcapture.physics.contact import ContactPoint
from physcapture.physics.contact import detect_contacts
from physcapture.physics.contact import solve_contacts
from physcapture.physics.dynamics import articulated_body_accelerations
from physcapture.physics.dynamics import composite_mass_matrix
from physcapture.physics.dynamics import inverse_dynamics
from physcapture.physics.dynamics import spatial_tree
from physcapture.physics.scene import SceneGeometry
from physcapture.utilities import as_batch
from physcapture.utilities import integrate_pose
from physcapture.utilities import pose_difference
from physcapture.utilities import ROOT_DOF


class SimulationDivergedError(RuntimeError):
    pass


@dataclass
class SimConfig:
    dt: float = 1 / 240
    substeps: int = 2
    solver_iterations: int = 10
    gravity: float = 9.81
    lateral_friction: float = 0.9
    rolling_friction: float = 0.3
    restitution: float = 0.0
    # control steps per sampling interval (240 Hz control against 30 Hz sampling)
    control_steps: int = 8
    max_joint_velocity: float = 100.0
    max_root_speed: float = 50.0
    contact_margin: float = 0.01
    baumgarte: float = 0.2
    penetration_slop: float = 0.001
    stable_pd: bool = True
    # worlds per rollout chunk; results do not depend on the thread count for a fixed chunk size
    chunk_size: int = 64
    threads: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f'time step must be positive, not "{self.dt}"')
        for name in ("substeps", "solver_iterations", "control_steps", "chunk_size", "threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f'{name} must be at least 1, not "{getattr(self, name)}"')
            setattr(self, name, int(getattr(self, name)))
        if not 0 <= self.restitution <= 1:
            raise ValueError(f'restitution must lie in [0, 1], not "{self.restitution}"')
        for name in ("lateral_friction", "rolling_friction", "contact_margin", "penetration_slop"):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} must be non-negative, not "{getattr(self, name)}"')
        if not 0 <= self.baumgarte <= 1:
            raise ValueError(f'Baumgarte factor must lie in [0, 1], not "{self.baumgarte}"')

    @property
    def substep(self) -> float:
        return self.dt / self.substeps

    @property
    def control_interval(self) -> float:
        return self.dt * self.control_steps

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SimConfig":
        names = {field.name for field in fields(cls)}
        unknown = set(values) - names
        if len(unknown) > 0:
            raise ValueError(f'unknown simulation settings "{sorted(unknown)}"')
        return cls(**values)


class SimWorld:
    """
    batch of character states in a shared scene

    ``diverged`` marks worlds whose state exploded; their state is frozen at the last finite step
    """

    def __init__(
        self,
        model: CharacterModel,
        pose: numpy.ndarray,
        velocity: numpy.ndarray = None,
        scene: SceneGeometry = None,
        config: SimConfig = None,
        rng_seed: int = 0,
        time: float = 0.0,
        diverged: numpy.ndarray = None,
    ):
        pose, _ = as_batch(numpy.array(pose, dtype=float), model.dof)
        if velocity is None:
            velocity = numpy.zeros(pose.shape)
        velocity, _ = as_batch(numpy.array(velocity, dtype=float), model.dof)
        if pose.shape != velocity.shape:
            raise ValueError(
                f'pose batch "{pose.shape}" does not match velocity batch "{velocity.shape}"'
            )
        if scene is None:
            scene = SceneGeometry.flat_ground()
        if config is None:
            config = SimConfig()
        if diverged is None:
            diverged = ~numpy.all(numpy.isfinite(pose) & numpy.isfinite(velocity), axis=1)

        self.__model = model
        self.__pose = pose
        self.__velocity = velocity
        self.__scene = scene
        self.__config = config
        self.__rng_seed = int(rng_seed)
        self.__time = float(time)
        self.__diverged = numpy.array(diverged, dtype=bool).reshape(len(pose))

        for array in (self.__pose, self.__velocity, self.__diverged):
            array.setflags(write=False)

    @classmethod
    def from_state(
        cls,
        model: CharacterModel,
        state: CharacterState,
        scene: SceneGeometry = None,
        config: SimConfig = None,
        rng_seed: int = 0,
    ) -> "SimWorld":
        return cls(model, state.q, state.qdot, scene, config, rng_seed)

    @property
    def model(self) -> CharacterModel:
        return self.__model

    @property
    def pose(self) -> numpy.ndarray:
        return self.__pose

    @property
    def velocity(self) -> numpy.ndarray:
        return self.__velocity

    @property
    def scene(self) -> SceneGeometry:
        return self.__scene

    @property
    def config(self) -> SimConfig:
        return self.__config

    @property
    def rng_seed(self) -> int:
        return self.__rng_seed

    @property
    def time(self) -> float:
        return self.__time

    @property
    def diverged(self) -> numpy.ndarray:
        return self.__diverged

    @property
    def batch_size(self) -> int:
        return len(self.__pose)

    @property
    def state(self) -> CharacterState:
        """state of the first world in the batch"""
        return self.state_at(0)

    def state_at(self, index: int) -> CharacterState:
        return CharacterState(self.__pose[index].copy(), self.__velocity[index].copy())

    def evolve(
        self,
        pose: numpy.ndarray,
        velocity: numpy.ndarray,
        time: float = None,
        diverged: numpy.ndarray = None,
    ) -> "SimWorld":
        """
        :return: world sharing model, scene and configuration with the given states
        """

        return SimWorld(
            self.__model,
            pose,
            velocity,
            self.__scene,
            self.__config,
            self.__rng_seed,
            self.__time if time is None else time,
            self.__diverged if diverged is None else diverged,
        )

    def clone(self) -> "SimWorld":
        return self.evolve(self.__pose.copy(), self.__velocity.copy())

    def select(self, indices: numpy.ndarray) -> "SimWorld":
        indices = numpy.atleast_1d(numpy.asarray(indices, dtype=int))
        return self.evolve(
            self.__pose[indices], self.__velocity[indices], diverged=self.__diverged[indices]
        )

    def replicate(self, count: int) -> "SimWorld":
        """
        :param count: batch size
        :return: batch of copies of a single world
        """

        if self.batch_size != 1:
            raise ValueError(f'only a single world can be replicated, not a batch of "{self.batch_size}"')
        return self.select(numpy.zeros(count, dtype=int))

    @classmethod
    def concatenate(cls, worlds: List["SimWorld"]) -> "SimWorld":
        first = worlds[0]
        return first.evolve(
            numpy.concatenate([world.pose for world in worlds]),
            numpy.concatenate([world.velocity for world in worlds]),
            time=max(world.time for world in worlds),
            diverged=numpy.concatenate([world.diverged for world in worlds]),
        )

    def contacts(self, index: int = 0) -> List[ContactPoint]:
        """
        :param index: world index in the batch
        :return: touching contacts of one world
        """

        tree = spatial_tree(self.__model, self.__pose[index : index + 1])
        return detect_contacts(self.__model, tree.kinematics, self.__scene).contact_points()

    def __len__(self) -> int:
        return self.batch_size

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(batch_size={self.batch_size}, time={self.__time!r}, diverged={int(self.__diverged.sum())})"


class RolloutTrace(NamedTuple):
    """states after every control step, including the initial state"""

    times: numpy.ndarray
    poses: numpy.ndarray
    velocities: numpy.ndarray


def _target_poses(model: CharacterModel, pose: numpy.ndarray, target) -> numpy.ndarray:
    if isinstance(target, TargetPose):
        target = target.values
    target, _ = as_batch(numpy.asarray(target, dtype=float), model.target_dof)
    target = numpy.broadcast_to(target, (len(pose), model.target_dof))
    return numpy.concatenate([pose[:, :ROOT_DOF], target], axis=1)


def _joint_gains(model: CharacterModel) -> Tuple[numpy.ndarray, numpy.ndarray]:
    return numpy.repeat(model.kp, 3), numpy.repeat(model.kd, 3)


def _clamp_torques(model: CharacterModel, torques: numpy.ndarray) -> numpy.ndarray:
    joint = torques[:, ROOT_DOF:].reshape(len(torques), -1, 3)
    norms = numpy.linalg.norm(joint, axis=-1)
    factor = numpy.where(
        norms > model.torque_limits,
        model.torque_limits / numpy.where(norms > 0, norms, 1.0),
        1.0,
    )
    clamped = numpy.zeros(torques.shape)
    clamped[:, ROOT_DOF:] = (joint * factor[..., None]).reshape(len(torques), -1)
    return clamped


def pd_torques(
    model: CharacterModel,
    state: Union[CharacterState, Tuple[numpy.ndarray, numpy.ndarray]],
    target: Union[TargetPose, numpy.ndarray],
) -> numpy.ndarray:
    """
    explicit PD law ``kp (target - q) - kd qdot`` per movable joint, clamped to the joint torque limit by norm

    :param model: character model
    :param state: state, or pose and velocity arrays ``(..., dof)``
    :param target: target pose(s) ``(..., 3 * movable)``
    :return: torques ``(..., dof)`` with zero root coordinates

    >>> from physcapture.character import build_character
    >>> model = build_character()
    >>> pose = model.rest_pose()
    >>> float(abs(pd_torques(model, (pose, numpy.zeros(57)), pose[6:])).max())
    0.0
    """

    if isinstance(state, CharacterState):
        pose, velocity = state.q, state.qdot
    else:
        pose, velocity = state
    pose, leading = as_batch(numpy.asarray(pose, dtype=float), model.dof)
    velocity, _ = as_batch(numpy.asarray(velocity, dtype=float), model.dof)

    kp, kd = _joint_gains(model)
    error = pose_difference(_target_poses(model, pose, target), pose)[:, ROOT_DOF:]
    torques = numpy.zeros(pose.shape)
    torques[:, ROOT_DOF:] = kp * error - kd * velocity[:, ROOT_DOF:]
    return _clamp_torques(model, torques).reshape(leading + (model.dof,))


def _stable_pd_torques(
    model: CharacterModel,
    matrix: numpy.ndarray,
    bias: numpy.ndarray,
    pose: numpy.ndarray,
    velocity: numpy.ndarray,
    targets: numpy.ndarray,
    timestep: float,
) -> numpy.ndarray:
    """
    PD torques evaluated at the end of the substep, ``kp (e - h qdot) - kd (qdot + h qddot)`` with ``qddot`` solved
    implicitly from ``(M + h Kd) qddot = tau_pd - h``
    """

    kp, kd = _joint_gains(model)
    joints = slice(ROOT_DOF, model.dof)
    joint_velocity = velocity[:, joints]
    error = pose_difference(targets, pose)[:, joints]
    proportional = kp * (error - timestep * joint_velocity)

    free = slice(ROOT_DOF if model.fixed_base else 0, model.dof)
    system = matrix.copy()
    system[:, joints, joints] += timestep * numpy.diag(kd)
    forcing = -bias
    forcing[:, joints] += proportional - kd * joint_velocity
    acceleration = numpy.zeros(pose.shape)
    acceleration[:, free] = numpy.linalg.solve(
        system[:, free, free], forcing[:, free, None]
    )[..., 0]

    torques = numpy.zeros(pose.shape)
    torques[:, joints] = proportional - kd * (
        joint_velocity + timestep * acceleration[:, joints]
    )
    return _clamp_torques(model, torques)


def _check_divergence(
    config: SimConfig, pose: numpy.ndarray, velocity: numpy.ndarray
) -> numpy.ndarray:
    finite = numpy.all(numpy.isfinite(pose) & numpy.isfinite(velocity), axis=1)
    with numpy.errstate(invalid="ignore"):
        exploded = (
            numpy.any(numpy.abs(velocity[:, 3:]) > config.max_joint_velocity, axis=1)
            | (numpy.linalg.norm(velocity[:, :3], axis=1) > config.max_root_speed)
        )
    return ~finite | exploded


def _substep(
    world: SimWorld,
    pose: numpy.ndarray,
    velocity: numpy.ndarray,
    torques: numpy.ndarray = None,
    targets: numpy.ndarray = None,
) -> Tuple[numpy.ndarray, numpy.ndarray, ContactImpulses]:
    model = world.model
    config = world.config
    timestep = config.substep

    tree = spatial_tree(model, pose)
    matrix = composite_mass_matrix(model, tree)
    if targets is not None:
        if config.stable_pd:
            bias = inverse_dynamics(
                model, tree, velocity, numpy.zeros(velocity.shape), config.gravity
            )
            torques = _stable_pd_torques(
                model, matrix, bias, pose, velocity, targets, timestep
            )
        else:
            torques = pd_torques(model, (pose, velocity), targets[:, ROOT_DOF:])

    acceleration = articulated_body_accelerations(
        model, tree, velocity, torques, config.gravity, check_finite=False
    )
    unconstrained = velocity + timestep * acceleration

    contacts = detect_contacts(model, tree.kinematics, world.scene, config.contact_margin)
    constrained, impulses = solve_contacts(
        model,
        tree.kinematics,
        matrix,
        unconstrained,
        contacts,
        timestep,
        iterations=config.solver_iterations,
        friction=config.lateral_friction,
        rolling_friction=config.rolling_friction,
        restitution=config.restitution,
        baumgarte=config.baumgarte,
        slop=config.penetration_slop,
        initial_velocity=velocity,
    )

    # second-order position update while airborne, semi-implicit Euler under contact
    touching = numpy.any(impulses.normal > 0, axis=1)
    correction = numpy.where(touching[:, None], 0.0, 0.5 * timestep**2 * acceleration)
    if model.fixed_base:
        correction[:, :ROOT_DOF] = 0.0
    pose = integrate_pose(pose, timestep * constrained - correction)
    return pose, constrained, impulses


def _advance(
    world: SimWorld,
    torques: numpy.ndarray = None,
    targets: numpy.ndarray = None,
    raise_on_divergence: bool = None,
) -> SimWorld:
    model = world.model
    config = world.config
    if raise_on_divergence is None:
        raise_on_divergence = world.batch_size == 1

    pose = numpy.array(world.pose)
    velocity = numpy.array(world.velocity)
    diverged = world.diverged.copy()
    live = numpy.flatnonzero(~diverged)

    if len(live) > 0:
        live_pose = pose[live]
        live_velocity = velocity[live]
        live_torques = None if torques is None else torques[live]
        live_targets = None if targets is None else targets[live]
        with numpy.errstate(all="ignore"):
            for _ in range(config.substeps):
                if live_targets is not None:
                    live_targets = numpy.concatenate(
                        [live_pose[:, :ROOT_DOF], live_targets[:, ROOT_DOF:]], axis=1
                    )
                live_pose, live_velocity, _ = _substep(
                    world, live_pose, live_velocity, live_torques, live_targets
                )

        exploded = _check_divergence(config, live_pose, live_velocity)
        if numpy.any(exploded):
            if raise_on_divergence:
                raise SimulationDivergedError(
                    f'simulation diverged at t="{world.time + config.dt:.6f}" s'
                )
            logging.debug(f'{int(exploded.sum())} of "{world.batch_size}" worlds diverged')
        settled = live[~exploded]
        pose[settled] = live_pose[~exploded]
        velocity[settled] = live_velocity[~exploded]
        diverged[live[exploded]] = True

    return world.evolve(pose, velocity, time=world.time + config.dt, diverged=diverged)


def step(
    world: SimWorld, torques: numpy.ndarray, raise_on_divergence: bool = None
) -> SimWorld:
    """
    advance every world by one control step of ``dt`` in ``substeps`` substeps, holding the torques constant

    :param world: world batch
    :param torques: generalized forces ``(dof,)`` or ``(B, dof)``, zero on the root coordinates
    :param raise_on_divergence: raise ``SimulationDivergedError`` instead of flagging; defaults to a single world
    :return: stepped world
    """

    model = world.model
    torques, _ = as_batch(numpy.asarray(torques, dtype=float), model.dof)
    torques = numpy.broadcast_to(torques, world.pose.shape)
    if not model.fixed_base and numpy.any(torques[:, :ROOT_DOF] != 0):
        raise ValueError("root coordinates are unactuated; torques must be zero there")
    return _advance(world, torques=torques, raise_on_divergence=raise_on_divergence)


def control_step(
    world: SimWorld,
    target: Union[TargetPose, numpy.ndarray],
    raise_on_divergence: bool = None,
) -> SimWorld:
    """
    one control step towards a target pose; explicit PD torques are computed once and held over the substeps, stable
    PD is re-evaluated at every substep

    :param world: world batch
    :param target: target pose(s) ``(3 * movable,)`` or ``(B, 3 * movable)``
    :param raise_on_divergence: raise instead of flagging; defaults to a single world
    :return: stepped world
    """

    targets = _target_poses(world.model, world.pose, target)
    if world.config.stable_pd:
        return _advance(world, targets=targets, raise_on_divergence=raise_on_divergence)
    torques = pd_torques(world.model, (world.pose, world.velocity), targets[:, ROOT_DOF:])
    return _advance(world, torques=torques, raise_on_divergence=raise_on_divergence)


def rollout_target(
    world: SimWorld,
    target: Union[TargetPose, numpy.ndarray],
    trace: bool = False,
    control_steps: int = None,
    raise_on_divergence: bool = None,
) -> Tuple[SimWorld, RolloutTrace]:
    """
    track a target pose for one sampling interval, recomputing the PD torques before every control step

    :param world: world batch
    :param target: target pose(s)
    :param trace: record the state after every control step
    :param control_steps: control steps, defaults to the configured count
    :param raise_on_divergence: raise instead of flagging; defaults to a single world
    :return: world after the rollout and the trace (``None`` unless requested)
    """

    if control_steps is None:
        control_steps = world.config.control_steps
    if isinstance(target, TargetPose):
        target = target.values
    target = numpy.asarray(target, dtype=float)

    times = [world.time]
    poses = [world.pose]
    velocities = [world.velocity]
    start = world.time
    for index in range(control_steps):
        world = control_step(world, target, raise_on_divergence)
        if trace:
            times.append(world.time)
            poses.append(world.pose)
            velocities.append(world.velocity)

    # exact multiple of the control interval, free of accumulated rounding
    world = world.evolve(
        world.pose, world.velocity, time=start + control_steps * world.config.dt
    )
    if not trace:
        return world, None
    return world, RolloutTrace(numpy.array(times), numpy.stack(poses), numpy.stack(velocities))


def rollout_batch(
    world: SimWorld,
    targets: numpy.ndarray,
    control_steps: int = None,
) -> SimWorld:
    """
    roll out one target per world in fixed-size chunks on a thread pool; divergence is flagged, never raised

    :param world: single world (replicated for every target) or a batch with one world per target
    :param targets: target poses ``(N, 3 * movable)``
    :param control_steps: control steps, defaults to the configured count
    :return: batch of end worlds in target order
    """

    targets, _ = as_batch(numpy.asarray(targets, dtype=float), world.model.target_dof)
    if world.batch_size == 1 and len(targets) != 1:
        world = world.replicate(len(targets))
    if world.batch_size != len(targets):
        raise ValueError(
            f'expected one target per world, not "{len(targets)}" targets for "{world.batch_size}" worlds'
        )

    config = world.config
    starts = range(0, len(targets), config.chunk_size)

    def run(start: int) -> SimWorld:
        indices = numpy.arange(start, min(start + config.chunk_size, len(targets)))
        chunk, _ = rollout_target(
            world.select(indices),
            targets[indices],
            control_steps=control_steps,
            raise_on_divergence=False,
        )
        return chunk

    if config.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as executor:
            chunks = list(executor.map(run, starts))
    else:
        chunks = [run(start) for start in starts]
    return SimWorld.concatenate(chunks)


def write_trace(path: PathLike, trace: RolloutTrace, frame_rate: float, index: int = 0):
    """
    write one world of a rollout trace in the motion-file format, one row of ``[q, qdot]`` per control step

    :param path: output file
    :param trace: rollout trace
    :param frame_rate: control frequency in Hz
    :param index: world index in the batch
    """

    rows = numpy.concatenate([trace.poses[:, index], trace.velocities[:, index]], axis=1)
    write_motion_file(path, trace.times, rows, frame_rate)
