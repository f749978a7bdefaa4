from physcapture.character.const import GeometryType
from physcapture.character.const import JointType
from physcapture.character.motion import interpolate_reference
from physcapture.character.motion import ReferenceMotion
from physcapture.character.skeleton import build_character
from physcapture.character.skeleton import CharacterModel
from physcapture.character.skeleton import CharacterState
from physcapture.character.skeleton import forward_kinematics
from physcapture.character.skeleton import Geometry
from physcapture.character.skeleton import JointSpec
from physcapture.character.skeleton import read_character_file
from physcapture.character.skeleton import SkeletonScale
from physcapture.character.skeleton import TargetPose
from physcapture.character.skeleton import write_character_file
