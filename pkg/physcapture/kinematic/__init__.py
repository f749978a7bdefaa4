from physcapture.kinematic.camera import Camera
from physcapture.kinematic.camera import ObservationSequence
from physcapture.kinematic.camera import reproject
from physcapture.kinematic.camera import synthesize_observations
from physcapture.kinematic.optimize import fit_reference
from physcapture.kinematic.optimize import KinematicConfig
from physcapture.kinematic.optimize import loss_data
from physcapture.kinematic.optimize import loss_prior
from physcapture.kinematic.optimize import loss_scene
from physcapture.kinematic.optimize import optimize_reference
from physcapture.kinematic.optimize import OptVariables
