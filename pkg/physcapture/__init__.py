from physcapture.capture import MotionCapture
from physcapture.character.skeleton import build_character
