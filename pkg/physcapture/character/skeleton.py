from dataclasses import dataclass
from dataclasses import field
from functools import lru_cache
from os import PathLike
from pathlib import Path
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy
import toml
import typepigeon

from physcapture.character.const import BONE_GROUPS
from physcapture.character.const import END_EFFECTORS
from physcapture.character.const import FOOT_JOINTS
from physcapture.character.const import GeometryType
from physcapture.character.const import JointType
from physcapture.character.const import PELVIS_JOINTS
from physcapture.utilities import as_batch
from physcapture.utilities import right_jacobian
from physcapture.utilities import rotation_matrices
from physcapture.utilities import ROOT_DOF
from physcapture.utilities import skew

DEFAULT_CHARACTER_FILENAME = Path(__file__).parent / "data" / "character.toml"

FOOT_KEYPOINT_NAMES = ("heel_inner", "heel_outer", "toe_inner", "toe_outer")


@dataclass(frozen=True)
class Geometry:
    """
    collision and mass-distribution primitive of a link, in the link frame

    dimensions are ``[radius]`` for a sphere, ``[radius, length]`` for a capsule (length between cap centers along
    ``axis``) and ``[x, y, z]`` full extents for an axis-aligned box
    """

    geometry_type: GeometryType
    dimensions: Tuple[float, ...]
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not isinstance(self.geometry_type, GeometryType):
            object.__setattr__(
                self,
                "geometry_type",
                typepigeon.convert_value(self.geometry_type, GeometryType),
            )
        expected = {GeometryType.SPHERE: 1, GeometryType.CAPSULE: 2, GeometryType.BOX: 3}[
            self.geometry_type
        ]
        if len(self.dimensions) != expected or any(
            value <= 0 for value in self.dimensions
        ):
            raise ValueError(
                f'{self.geometry_type.value} needs {expected} positive dimensions, not "{self.dimensions}"'
            )
        object.__setattr__(self, "dimensions", tuple(float(value) for value in self.dimensions))
        object.__setattr__(self, "center", tuple(float(value) for value in self.center))
        axis = numpy.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", tuple((axis / numpy.linalg.norm(axis)).tolist()))

    def scaled(self, multiplier: float) -> "Geometry":
        """
        stretch the geometry along its length by the given multiplier; radii are unchanged

        :param multiplier: length multiplier
        :return: scaled geometry
        """

        dimensions = list(self.dimensions)
        if self.geometry_type == GeometryType.CAPSULE:
            dimensions[1] *= multiplier
        elif self.geometry_type == GeometryType.BOX:
            dimensions[int(numpy.argmax(numpy.abs(self.center)))] *= multiplier
        return Geometry(
            geometry_type=self.geometry_type,
            dimensions=tuple(dimensions),
            center=tuple(numpy.asarray(self.center) * multiplier),
            axis=self.axis,
        )

    def contact_candidates(self) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """
        sphere-swept points approximating the surface; spheres give their center, capsules both cap centers and boxes
        their eight corners with zero radius

        :return: local centers ``(n, 3)`` and radii ``(n,)``
        """

        center = numpy.asarray(self.center)
        if self.geometry_type == GeometryType.SPHERE:
            return center[None, :], numpy.array([self.dimensions[0]])
        elif self.geometry_type == GeometryType.CAPSULE:
            radius, length = self.dimensions
            axis = numpy.asarray(self.axis)
            points = numpy.stack([center - axis * length / 2, center + axis * length / 2])
            return points, numpy.full(2, radius)
        else:
            half = numpy.asarray(self.dimensions) / 2
            signs = numpy.array(
                [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
                dtype=float,
            )
            return center + signs * half, numpy.zeros(8)


@dataclass(frozen=True)
class JointSpec:
    """
    one link of the character together with the joint attaching it to its parent; ``parent`` is the index of the
    parent joint, or ``-1`` for the root link
    """

    name: str
    joint_type: JointType
    geometry: Geometry
    mass: float
    kp: float = 0.0
    kd: float = 0.0
    torque_limit: float = 0.0
    inertia: Tuple[Tuple[float, ...], ...] = ((0.001, 0, 0), (0, 0.001, 0), (0, 0, 0.001))
    parent: int = -1
    local_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    bone: str = None
    segment: str = None

    def __post_init__(self):
        if not isinstance(self.joint_type, JointType):
            object.__setattr__(
                self, "joint_type", typepigeon.convert_value(self.joint_type, JointType)
            )
        if not self.mass > 0:
            raise ValueError(f'mass of "{self.name}" must be positive, not "{self.mass}"')
        for gain in ("kp", "kd", "torque_limit"):
            if getattr(self, gain) < 0:
                raise ValueError(
                    f'{gain} of "{self.name}" must be non-negative, not "{getattr(self, gain)}"'
                )
        inertia = numpy.asarray(self.inertia, dtype=float)
        if inertia.shape != (3, 3) or not numpy.allclose(inertia, inertia.T):
            raise ValueError(f'inertia of "{self.name}" must be a symmetric 3x3 tensor')
        if numpy.linalg.eigvalsh(inertia).min() < -1e-12:
            raise ValueError(f'inertia of "{self.name}" is not positive semi-definite')
        object.__setattr__(self, "inertia", tuple(tuple(row) for row in inertia.tolist()))
        object.__setattr__(
            self, "local_offset", tuple(float(value) for value in self.local_offset)
        )

    @property
    def movable(self) -> bool:
        return self.joint_type == JointType.SPHERICAL


@dataclass(frozen=True)
class SkeletonScale:
    """
    per-bone length multipliers; left and right bones belong to the same group and share a multiplier

    >>> SkeletonScale.uniform(1.2).multipliers['thigh']
    1.2
    """

    multipliers: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        multipliers = {group: 1.0 for group in BONE_GROUPS}
        for group, value in self.multipliers.items():
            if group not in multipliers:
                raise ValueError(f'unknown bone group "{group}"')
            if not numpy.isfinite(value) or value <= 0:
                raise ValueError(
                    f'skeleton scale "{group}" must be positive, not "{value}"'
                )
            multipliers[group] = float(value)
        object.__setattr__(self, "multipliers", multipliers)

    @classmethod
    def uniform(cls, multiplier: float) -> "SkeletonScale":
        return cls({group: multiplier for group in BONE_GROUPS})

    @classmethod
    def from_array(cls, values: numpy.ndarray) -> "SkeletonScale":
        return cls(dict(zip(BONE_GROUPS, numpy.asarray(values, dtype=float).tolist())))

    @classmethod
    def from_bone_lengths(
        cls,
        lengths: Dict[str, Union[float, Tuple[float, float]]],
        reference: "CharacterModel" = None,
    ) -> "SkeletonScale":
        """
        build multipliers from measured bone lengths; symmetric pairs given as ``(left, right)`` are averaged

        :param lengths: measured length per bone group, in meters
        :param reference: unit-scale model providing the default lengths
        :return: skeleton scale
        """

        if reference is None:
            reference = build_character()
        multipliers = {}
        for group, length in lengths.items():
            length = numpy.mean(numpy.atleast_1d(numpy.asarray(length, dtype=float)))
            multipliers[group] = float(length / reference.bone_length(group))
        return cls(multipliers)

    def as_array(self) -> numpy.ndarray:
        return numpy.array([self.multipliers[group] for group in BONE_GROUPS])


@dataclass
class CharacterState:
    """
    pose ``q`` (root translation, root rotation, joint rotations) and velocity ``qdot`` (root linear velocity in the
    world frame, root angular velocity in the root frame, joint angular velocities in the child frames)
    """

    q: numpy.ndarray
    qdot: numpy.ndarray

    def __post_init__(self):
        self.q = numpy.array(self.q, dtype=float)
        self.qdot = numpy.array(self.qdot, dtype=float)
        if self.q.shape != self.qdot.shape:
            raise ValueError(
                f'pose and velocity shapes differ ("{self.q.shape}" != "{self.qdot.shape}")'
            )
        if not numpy.all(numpy.isfinite(self.q)):
            raise ValueError("pose is not finite")

    @property
    def vector(self) -> numpy.ndarray:
        return numpy.concatenate([self.q, self.qdot], axis=-1)

    @classmethod
    def from_vector(cls, vector: numpy.ndarray) -> "CharacterState":
        vector = numpy.asarray(vector, dtype=float)
        half = vector.shape[-1] // 2
        return cls(vector[..., :half], vector[..., half:])


@dataclass(frozen=True)
class TargetPose:
    """setpoints of the movable joints, axis-angle per joint"""

    values: numpy.ndarray

    def __post_init__(self):
        values = numpy.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.shape[0] % 3 != 0:
            raise ValueError(f'target pose must hold 3 values per joint, not "{values.shape}"')
        object.__setattr__(self, "values", values)


class CharacterModel:
    """
    immutable articulated character; body ``0`` is the root link and body ``j + 1`` is the link of joint ``j``

    derived arrays (read-only):

    * ``parents``: parent body per body, ``-1`` for the root
    * ``offsets`` / ``unit_offsets``: joint origin in the parent frame, scaled and at unit scale
    * ``bone_groups``: index into ``BONE_GROUPS`` per body, ``-1`` when unscaled
    * ``movable``: whether the body has a 3-DOF joint
    * ``dof_index``: first pose / velocity column of the body, ``-1`` when it has none
    * ``masses``, ``centers``, ``inertias``, ``spatial_inertias``: mass properties in link frames
    * ``kp``, ``kd``, ``torque_limits``: gains per movable joint
    * ``ancestors``: ``ancestors[b, a]`` is true when ``a`` is ``b`` or one of its ancestors
    """

    def __init__(
        self,
        joints: Sequence[JointSpec],
        root: JointSpec,
        scale: SkeletonScale = None,
        fixed_base: bool = False,
    ):
        if len(joints) == 0:
            raise ValueError("character needs at least one joint")
        if scale is None:
            scale = SkeletonScale()

        for index, joint in enumerate(joints):
            if not -1 <= joint.parent < index:
                raise ValueError(
                    f'joint "{joint.name}" must follow its parent in tree order (parent index "{joint.parent}")'
                )
            for group in (joint.bone, joint.segment):
                if group is not None and group not in BONE_GROUPS:
                    raise ValueError(f'unknown bone group "{group}" on joint "{joint.name}"')

        self.__joints = tuple(joints)
        self.__root = root
        self.__scale = scale
        self.__fixed_base = bool(fixed_base)

        links = [root] + list(joints)
        body_count = len(links)
        multipliers = scale.multipliers

        self.names = tuple(link.name for link in links)
        self.parents = numpy.array([-1] + [joint.parent + 1 for joint in joints])
        self.unit_offsets = numpy.array([link.local_offset for link in links], dtype=float)
        self.bone_groups = numpy.array(
            [-1 if link.bone is None else BONE_GROUPS.index(link.bone) for link in links]
        )
        self.offsets = self.unit_offsets * numpy.array(
            [1.0 if link.bone is None else multipliers[link.bone] for link in links]
        )[:, None]

        geometries = [
            link.geometry
            if link.segment is None
            else link.geometry.scaled(multipliers[link.segment])
            for link in links
        ]
        self.geometries = tuple(geometries)

        self.movable = numpy.array([False] + [joint.movable for joint in joints])
        self.movable_bodies = numpy.flatnonzero(self.movable)
        self.dof_index = numpy.full(body_count, -1)
        self.dof_index[0] = 0
        self.dof_index[self.movable_bodies] = ROOT_DOF + 3 * numpy.arange(
            len(self.movable_bodies)
        )

        self.masses = numpy.array([link.mass for link in links], dtype=float)
        self.centers = numpy.array([geometry.center for geometry in geometries])
        self.inertias = numpy.array([link.inertia for link in links], dtype=float)
        self.spatial_inertias = numpy.zeros((body_count, 6, 6))
        for body in range(body_count):
            mass = self.masses[body]
            cross = skew(self.centers[body])
            self.spatial_inertias[body, :3, :3] = self.inertias[body] + mass * (
                cross @ cross.T
            )
            self.spatial_inertias[body, :3, 3:] = mass * cross
            self.spatial_inertias[body, 3:, :3] = mass * cross.T
            self.spatial_inertias[body, 3:, 3:] = mass * numpy.eye(3)

        movable_links = [links[body] for body in self.movable_bodies]
        self.kp = numpy.array([link.kp for link in movable_links], dtype=float)
        self.kd = numpy.array([link.kd for link in movable_links], dtype=float)
        self.torque_limits = numpy.array(
            [link.torque_limit for link in movable_links], dtype=float
        )

        self.ancestors = numpy.zeros((body_count, body_count), dtype=bool)
        for body in range(body_count):
            ancestor = body
            while ancestor >= 0:
                self.ancestors[body, ancestor] = True
                ancestor = self.parents[ancestor]

        candidate_links = []
        candidate_centers = []
        candidate_radii = []
        for body, geometry in enumerate(geometries):
            centers, radii = geometry.contact_candidates()
            candidate_links.extend([body] * len(radii))
            candidate_centers.append(centers)
            candidate_radii.append(radii)
        self.contact_links = numpy.array(candidate_links)
        self.contact_centers = numpy.concatenate(candidate_centers)
        self.contact_radii = numpy.concatenate(candidate_radii)

        keypoint_links = []
        keypoint_points = []
        for name in FOOT_JOINTS:
            if name not in self.names:
                continue
            body = self.names.index(name)
            geometry = geometries[body]
            if geometry.geometry_type == GeometryType.BOX:
                center = numpy.asarray(geometry.center)
                half = numpy.asarray(geometry.dimensions) / 2
                lateral = self.unit_offsets[self.ancestors[body]][:, 0].sum()
                outward = 1.0 if lateral >= 0 else -1.0
                for heel_or_toe in (1.0, -1.0):
                    for inner_or_outer in (-outward, outward):
                        keypoint_links.append(body)
                        keypoint_points.append(
                            center
                            + half * numpy.array([inner_or_outer, heel_or_toe, -1.0])
                        )
        self.foot_keypoint_links = numpy.array(keypoint_links, dtype=int)
        self.foot_keypoints = numpy.array(keypoint_points, dtype=float).reshape(-1, 3)

        self.end_effector_joints = numpy.array(
            [self.joint_index(name) for name in END_EFFECTORS if name in self.names[1:]],
            dtype=int,
        )
        self.foot_joints = numpy.array(
            [self.joint_index(name) for name in FOOT_JOINTS if name in self.names[1:]],
            dtype=int,
        )
        self.pelvis_joints = numpy.array(
            [self.joint_index(name) for name in PELVIS_JOINTS if name in self.names[1:]],
            dtype=int,
        )

        for name, value in list(vars(self).items()):
            if isinstance(value, numpy.ndarray):
                value.setflags(write=False)

    @classmethod
    def from_joints(
        cls,
        joints: Sequence[JointSpec],
        root: JointSpec,
        fixed_base: bool = False,
    ) -> "CharacterModel":
        """
        build an arbitrary tree, for instance a single link or a short chain

        :param joints: joints in tree order
        :param root: root link
        :param fixed_base: pin the root link to the world
        :return: character model
        """

        return cls(joints=joints, root=root, fixed_base=fixed_base)

    @property
    def joints(self) -> Tuple[JointSpec, ...]:
        return self.__joints

    @property
    def root(self) -> JointSpec:
        return self.__root

    @property
    def scale(self) -> SkeletonScale:
        return self.__scale

    @property
    def fixed_base(self) -> bool:
        return self.__fixed_base

    @property
    def body_count(self) -> int:
        return len(self.names)

    @property
    def movable_count(self) -> int:
        return len(self.movable_bodies)

    @property
    def fixed_count(self) -> int:
        return len(self.joints) - self.movable_count

    @property
    def dof(self) -> int:
        return ROOT_DOF + 3 * self.movable_count

    @property
    def target_dof(self) -> int:
        return 3 * self.movable_count

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def joint_index(self, name: str) -> int:
        """
        :param name: joint name
        :return: index of the joint (its body index minus one)
        """

        if name not in self.names[1:]:
            raise ValueError(f'joint "{name}" not in character')
        return self.names.index(name) - 1

    def bone_length(self, group: str) -> float:
        """
        :param group: bone group
        :return: unit-scale length of the bones in the group
        """

        if group not in BONE_GROUPS:
            raise ValueError(f'unknown bone group "{group}"')
        bodies = numpy.flatnonzero(self.bone_groups == BONE_GROUPS.index(group))
        if len(bodies) == 0:
            raise ValueError(f'no bone of group "{group}" in character')
        return float(numpy.linalg.norm(self.unit_offsets[bodies[0]]))

    def rest_pose(self, height: float = None) -> numpy.ndarray:
        """
        :param height: root height; defaults to the height putting the lowest contact candidate on ``z = 0``
        :return: zero pose with the root at the given height
        """

        pose = numpy.zeros(self.dof)
        if height is None:
            kinematics = link_transforms(self, pose)
            points = kinematics.points(self.contact_links, self.contact_centers)[0]
            height = -float((points[:, 2] - self.contact_radii).min())
        pose[2] = height
        return pose

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(joints={len(self.joints)}, dof={self.dof}, total_mass={self.total_mass!r}, fixed_base={self.fixed_base})"


def read_character_file(
    filename: PathLike,
) -> Tuple[JointSpec, List[JointSpec]]:
    """
    read a character-definition file

    :param filename: path to TOML character definition
    :return: root link and joints in tree order
    """

    if not isinstance(filename, Path):
        filename = Path(filename)
    if not filename.exists():
        raise FileNotFoundError(f'character file "{filename}" does not exist')

    with open(filename) as input_file:
        definition = toml.load(input_file)

    def link_from_entry(entry: dict, parent: int) -> JointSpec:
        geometry = entry["geometry"]
        return JointSpec(
            name=entry["name"],
            joint_type=entry["joint_type"],
            geometry=Geometry(
                geometry_type=geometry["type"],
                dimensions=tuple(geometry["dimensions"]),
                center=tuple(geometry.get("center", (0.0, 0.0, 0.0))),
                axis=tuple(geometry.get("axis", (0.0, 0.0, 1.0))),
            ),
            mass=entry["mass"],
            kp=entry.get("kp", 0.0),
            kd=entry.get("kd", 0.0),
            torque_limit=entry.get("torque_limit", 0.0),
            inertia=tuple(tuple(row) for row in entry["inertia"]),
            parent=parent,
            local_offset=tuple(entry.get("local_offset", (0.0, 0.0, 0.0))),
            bone=entry.get("bone"),
            segment=entry.get("segment"),
        )

    root = link_from_entry(definition["root"], -1)
    names = []
    joints = []
    for entry in definition["joints"]:
        parent_name = entry["parent"]
        if parent_name == root.name:
            parent = -1
        elif parent_name in names:
            parent = names.index(parent_name)
        else:
            raise ValueError(
                f'parent "{parent_name}" of joint "{entry["name"]}" must be listed before it'
            )
        joints.append(link_from_entry(entry, parent))
        names.append(entry["name"])

    return root, joints


def write_character_file(
    filename: PathLike,
    root: JointSpec,
    joints: Sequence[JointSpec],
    overwrite: bool = False,
):
    """
    write a character-definition file

    :param filename: path to TOML output
    :param root: root link
    :param joints: joints in tree order
    :param overwrite: overwrite existing file
    """

    if not isinstance(filename, Path):
        filename = Path(filename)
    if filename.exists() and not overwrite:
        raise FileExistsError(f'character file "{filename}" already exists')

    def entry_from_link(link: JointSpec) -> dict:
        entry = {
            "name": link.name,
            "joint_type": link.joint_type.value,
            "mass": link.mass,
            "kp": link.kp,
            "kd": link.kd,
            "torque_limit": link.torque_limit,
            "inertia": [list(row) for row in link.inertia],
            "local_offset": list(link.local_offset),
            "geometry": {
                "type": link.geometry.geometry_type.value,
                "dimensions": list(link.geometry.dimensions),
                "center": list(link.geometry.center),
                "axis": list(link.geometry.axis),
            },
        }
        if link.bone is not None:
            entry["bone"] = link.bone
        if link.segment is not None:
            entry["segment"] = link.segment
        return entry

    joint_entries = []
    for joint in joints:
        entry = entry_from_link(joint)
        entry["parent"] = root.name if joint.parent < 0 else joints[joint.parent].name
        joint_entries.append(entry)

    with open(filename, "w") as output_file:
        toml.dump({"root": entry_from_link(root), "joints": joint_entries}, output_file)


@lru_cache(maxsize=None)
def _character_definition(filename: str) -> Tuple[JointSpec, Tuple[JointSpec, ...]]:
    root, joints = read_character_file(filename)
    return root, tuple(joints)


def build_character(
    scale: SkeletonScale = None, filename: PathLike = None
) -> CharacterModel:
    """
    build the articulated character from a character-definition file with bone lengths multiplied by the given scale;
    masses are independent of scale

    :param scale: bone length multipliers
    :param filename: character-definition file, defaults to the shipped character
    :return: character model

    >>> model = build_character()
    >>> model.dof, model.movable_count, model.fixed_count, model.total_mass
    (57, 17, 2, 53.5)
    """

    if scale is None:
        scale = SkeletonScale()
    elif not isinstance(scale, SkeletonScale):
        raise ValueError(f'scale must be a skeleton scale, not "{type(scale)}"')
    if filename is None:
        filename = DEFAULT_CHARACTER_FILENAME

    root, joints = _character_definition(str(Path(filename).resolve()))
    return CharacterModel(joints=joints, root=root, scale=scale)


class TreeKinematics(NamedTuple):
    """world placement of every body of a batch of poses"""

    local_rotations: numpy.ndarray
    rotations: numpy.ndarray
    origins: numpy.ndarray
    offsets: numpy.ndarray

    @property
    def batch_size(self) -> int:
        return self.origins.shape[0]

    def points(self, links: numpy.ndarray, local_points: numpy.ndarray) -> numpy.ndarray:
        """
        :param links: body index per point, shape ``(P,)`` or ``(B, P)``
        :param local_points: points in their link frames, shape ``(P, 3)`` or ``(B, P, 3)``
        :return: world points ``(B, P, 3)``
        """

        links = numpy.asarray(links)
        batch = numpy.arange(self.batch_size)[:, None]
        rotations = self.rotations[batch, links]
        origins = self.origins[batch, links]
        local_points = numpy.broadcast_to(local_points, origins.shape)
        return origins + (rotations @ local_points[..., None])[..., 0]


def link_transforms(
    model: CharacterModel, pose: numpy.ndarray, offsets: numpy.ndarray = None
) -> TreeKinematics:
    """
    chain the parent transforms of a batch of poses

    :param model: character model
    :param pose: pose(s) of shape ``(..., dof)``
    :param offsets: joint offsets overriding the model's, shape ``(bodies, 3)`` or ``(B, bodies, 3)``
    :return: tree kinematics with batch dimension ``B``
    """

    pose, _ = as_batch(pose, model.dof)
    batch_size = len(pose)
    body_count = model.body_count

    if offsets is None:
        offsets = model.offsets
    offsets = numpy.broadcast_to(numpy.asarray(offsets, dtype=float), (batch_size, body_count, 3))

    blocks = rotation_matrices(pose[:, 3:].reshape(batch_size, -1, 3))
    local = numpy.broadcast_to(numpy.eye(3), (batch_size, body_count, 3, 3)).copy()
    local[:, 0] = blocks[:, 0]
    local[:, model.movable_bodies] = blocks[:, 1:]

    rotations = numpy.empty((batch_size, body_count, 3, 3))
    origins = numpy.empty((batch_size, body_count, 3))
    rotations[:, 0] = local[:, 0]
    origins[:, 0] = pose[:, :3]
    for body in range(1, body_count):
        parent = model.parents[body]
        origins[:, body] = (
            origins[:, parent] + (rotations[:, parent] @ offsets[:, body, :, None])[..., 0]
        )
        rotations[:, body] = rotations[:, parent] @ local[:, body]

    return TreeKinematics(local, rotations, origins, offsets)


def forward_kinematics(
    model: CharacterModel, pose: numpy.ndarray
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    joint positions and center of mass of the given pose(s)

    :param model: character model
    :param pose: pose(s) of shape ``(..., dof)``
    :return: joint positions ``(..., joints, 3)`` and center of mass ``(..., 3)``
    """

    pose = numpy.asarray(pose, dtype=float)
    if not numpy.all(numpy.isfinite(pose)):
        raise ValueError("pose is not finite")
    leading = pose.shape[:-1]
    kinematics = link_transforms(model, pose)
    joints = kinematics.origins[:, 1:]
    com = center_of_mass(model, kinematics)
    return (
        joints.reshape(leading + joints.shape[1:]),
        com.reshape(leading + (3,)),
    )


def center_of_mass(model: CharacterModel, kinematics: TreeKinematics) -> numpy.ndarray:
    centers = kinematics.origins + (kinematics.rotations @ model.centers[..., None])[..., 0]
    return (model.masses[:, None] * centers).sum(axis=1) / model.total_mass


def link_velocities(
    model: CharacterModel, kinematics: TreeKinematics, velocity: numpy.ndarray
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    world angular velocity and world origin velocity of every body

    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param velocity: velocities ``(B, dof)``
    :return: angular velocities ``(B, bodies, 3)`` and origin velocities ``(B, bodies, 3)``
    """

    velocity, _ = as_batch(velocity, model.dof)
    rotations = kinematics.rotations
    origins = kinematics.origins
    angular = numpy.empty(origins.shape)
    linear = numpy.empty(origins.shape)
    angular[:, 0] = (rotations[:, 0] @ velocity[:, 3:6, None])[..., 0]
    linear[:, 0] = velocity[:, :3]
    for body in range(1, model.body_count):
        parent = model.parents[body]
        angular[:, body] = angular[:, parent]
        if model.movable[body]:
            column = model.dof_index[body]
            angular[:, body] = angular[:, body] + (
                rotations[:, body] @ velocity[:, column : column + 3, None]
            )[..., 0]
        linear[:, body] = linear[:, parent] + numpy.cross(
            angular[:, parent], origins[:, body] - origins[:, parent]
        )
    return angular, linear


def point_velocities(
    kinematics: TreeKinematics,
    angular: numpy.ndarray,
    linear: numpy.ndarray,
    links: numpy.ndarray,
    points: numpy.ndarray,
) -> numpy.ndarray:
    """
    :param kinematics: tree kinematics of the batch
    :param angular: body angular velocities from ``link_velocities``
    :param linear: body origin velocities from ``link_velocities``
    :param links: body index per point, shape ``(P,)``
    :param points: world points ``(B, P, 3)``
    :return: world velocities of the points ``(B, P, 3)``
    """

    links = numpy.asarray(links)
    return linear[:, links] + numpy.cross(
        angular[:, links], points - kinematics.origins[:, links]
    )


def point_jacobian(
    model: CharacterModel,
    kinematics: TreeKinematics,
    links: numpy.ndarray,
    points: numpy.ndarray,
) -> numpy.ndarray:
    """
    linear velocity Jacobian of world points rigidly attached to links, in velocity coordinates

    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param links: body index per point, shape ``(P,)`` or ``(B, P)``
    :param points: world points ``(B, P, 3)``
    :return: Jacobian ``(B, P, 3, dof)``
    """

    points = numpy.asarray(points, dtype=float)
    batch_size, point_count = points.shape[:2]
    mask = numpy.broadcast_to(
        model.ancestors[numpy.asarray(links)], (batch_size, point_count, model.body_count)
    )

    jacobian = numpy.zeros((batch_size, point_count, 3, model.dof))
    jacobian[..., :, 0:3] = numpy.eye(3)
    for body in [0] + model.movable_bodies.tolist():
        column = 3 if body == 0 else model.dof_index[body]
        lever = points - kinematics.origins[:, None, body]
        block = -skew(lever) @ kinematics.rotations[:, None, body]
        if body != 0:
            block = block * mask[:, :, body, None, None]
        jacobian[..., column : column + 3] = block
    return jacobian


def angular_jacobian(
    model: CharacterModel, kinematics: TreeKinematics, links: numpy.ndarray
) -> numpy.ndarray:
    """
    world angular velocity Jacobian of links, in velocity coordinates

    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param links: body indices, shape ``(P,)`` or ``(B, P)``
    :return: Jacobian ``(B, P, 3, dof)``
    """

    links = numpy.asarray(links)
    batch_size = kinematics.batch_size
    point_count = links.shape[-1]
    mask = numpy.broadcast_to(
        model.ancestors[links], (batch_size, point_count, model.body_count)
    )

    jacobian = numpy.zeros((batch_size, point_count, 3, model.dof))
    jacobian[..., 3:6] = kinematics.rotations[:, None, 0]
    for body in model.movable_bodies:
        column = model.dof_index[body]
        jacobian[..., column : column + 3] = (
            kinematics.rotations[:, None, body] * mask[:, :, body, None, None]
        )
    return jacobian


def tangent_to_coordinates(
    model: CharacterModel, pose: numpy.ndarray, jacobian: numpy.ndarray
) -> numpy.ndarray:
    """
    convert a Jacobian in velocity coordinates into a Jacobian in pose coordinates by right-multiplying every
    rotation block with the right Jacobian of its axis-angle vector

    :param model: character model
    :param pose: poses ``(B, dof)``
    :param jacobian: Jacobian ``(B, ..., dof)`` in velocity coordinates
    :return: Jacobian of the same shape in pose coordinates
    """

    pose, _ = as_batch(pose, model.dof)
    batch_size = len(pose)
    blocks = right_jacobian(pose[:, 3:].reshape(batch_size, -1, 3))
    converted = numpy.array(jacobian, dtype=float)
    rotational = converted[..., 3:].reshape(jacobian.shape[:-1] + (-1, 3))
    expand = (slice(None),) + (None,) * (jacobian.ndim - 2)
    rotational = (rotational[..., None, :] @ blocks[expand])[..., 0, :]
    converted[..., 3:] = rotational.reshape(jacobian.shape[:-1] + (-1,))
    return converted


def pose_jacobian(
    model: CharacterModel,
    pose: numpy.ndarray,
    links: numpy.ndarray = None,
    local_points: numpy.ndarray = None,
    offsets: numpy.ndarray = None,
) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    positions of points attached to links and their derivative with respect to the pose coordinates;
    defaults to the joint origins

    :param model: character model
    :param pose: poses ``(B, dof)``
    :param links: body index per point, defaults to every joint body
    :param local_points: points in their link frames, defaults to the link origins
    :param offsets: joint offsets overriding the model's
    :return: world points ``(B, P, 3)`` and Jacobian ``(B, P, 3, dof)``
    """

    pose, _ = as_batch(pose, model.dof)
    if links is None:
        links = numpy.arange(1, model.body_count)
    links = numpy.asarray(links)
    if local_points is None:
        local_points = numpy.zeros((len(links), 3))
    kinematics = link_transforms(model, pose, offsets)
    points = kinematics.points(links, local_points)
    jacobian = point_jacobian(model, kinematics, links, points)
    return points, tangent_to_coordinates(model, pose, jacobian)


def scale_jacobian(
    model: CharacterModel, kinematics: TreeKinematics, links: numpy.ndarray
) -> numpy.ndarray:
    """
    derivative of points attached to links with respect to the bone group multipliers, for offsets equal to
    ``unit_offsets * multiplier``

    :param model: character model
    :param kinematics: tree kinematics of the batch
    :param links: body index per point, shape ``(P,)``
    :return: Jacobian ``(B, P, 3, groups)``
    """

    links = numpy.asarray(links)
    batch_size = kinematics.batch_size
    jacobian = numpy.zeros((batch_size, len(links), 3, len(BONE_GROUPS)))
    for body in range(1, model.body_count):
        group = model.bone_groups[body]
        if group < 0:
            continue
        direction = (
            kinematics.rotations[:, model.parents[body]] @ model.unit_offsets[body]
        )
        mask = model.ancestors[links, body]
        jacobian[:, :, :, group] += mask[None, :, None] * direction[:, None, :]
    return jacobian
