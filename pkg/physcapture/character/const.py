from enum import Enum

import pandas


class JointType(Enum):
    SPHERICAL = "spherical"
    FIXED = "fixed"
    FREE = "free"


class GeometryType(Enum):
    CAPSULE = "capsule"
    BOX = "box"
    SPHERE = "sphere"


ROOT_NAME = "pelvis"

# tree order; body index of a joint is its position here plus one (body 0 is the pelvis)
JOINT_NAMES = (
    "lower_back",
    "upper_back",
    "chest",
    "lower_neck",
    "upper_neck",
    "left_clavicle",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_clavicle",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
)

FOOT_JOINTS = ("left_ankle", "right_ankle")
END_EFFECTORS = ("left_ankle", "right_ankle", "left_wrist", "right_wrist")
PELVIS_JOINTS = ("left_hip", "right_hip")

# bone groups scaled by a single multiplier; left and right share a group
BONE_GROUPS = (
    "spine_lower",
    "spine_middle",
    "spine_upper",
    "neck_base",
    "neck",
    "clavicle_root",
    "clavicle",
    "upper_arm",
    "forearm",
    "pelvis",
    "thigh",
    "shank",
)

TOTAL_MASS = 53.5

# per-DOF rotation limits of target poses (radians), (-x, +x, -y, +y, -z, +z)
JOINT_ROTATION_BOUNDS = pandas.DataFrame(
    [
        ["lower_back", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["upper_back", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["chest", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["lower_neck", -0.57, 0.57, 0.0, 0.0, 0.0, 0.0],
        ["upper_neck", -0.57, 0.57, -0.57, 0.57, 0.0, 0.0],
        ["left_clavicle", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["left_shoulder", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["left_elbow", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["right_clavicle", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["right_shoulder", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["right_elbow", -1.57, 1.57, -1.57, 1.57, -1.57, 1.57],
        ["left_hip", -2.0, 2.0, -0.57, 0.57, -0.27, 0.27],
        ["left_knee", -0.3, 1.57, -0.27, 0.27, 0.0, 0.0],
        ["left_ankle", -0.57, 0.57, -0.57, 1.2, -0.57, 0.57],
        ["right_hip", -2.0, 2.0, -0.57, 0.57, -0.27, 0.27],
        ["right_knee", -0.3, 1.57, -0.27, 0.27, 0.0, 0.0],
        ["right_ankle", -0.57, 0.57, -1.2, 0.57, -0.57, 0.57],
    ],
    columns=["joint", "min_x", "max_x", "min_y", "max_y", "min_z", "max_z"],
).set_index("joint")

# kinematic optimization weights per stage, coarse to fine
STAGE_WEIGHTS = pandas.DataFrame(
    [
        [1, 1.0, 4040.0, 100.0, 1000.0, 0.0],
        [2, 1.0, 404.0, 50.0, 500.0, 0.0],
        [3, 1.0, 57.4, 10.0, 250.0, 0.0],
        [4, 1.0, 1.78, 5.0, 200.0, 4500.0],
    ],
    columns=["stage", "data", "latent", "shape", "kinetic", "interaction"],
).set_index("stage")
