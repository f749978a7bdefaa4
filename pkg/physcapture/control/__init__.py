from physcapture.control.cmaes import cma_optimize
from physcapture.control.cmaes import cma_track_frame
from physcapture.control.cmaes import CmaConfig
from physcapture.control.cmaes import PoseDistribution
from physcapture.control.cmaes import resample_bounded
from physcapture.control.losses import detect_failure
from physcapture.control.losses import loss_ban
from physcapture.control.losses import loss_dyn
from physcapture.control.losses import loss_reproj
from physcapture.control.losses import loss_total
from physcapture.control.losses import loss_tra
from physcapture.control.losses import LossWeights
from physcapture.control.losses import TrackingFrame
from physcapture.control.sampling import build_provider
from physcapture.control.sampling import capture_frame
from physcapture.control.sampling import capture_motion
from physcapture.control.sampling import CaptureResult
from physcapture.control.sampling import FrameFailureError
from physcapture.control.sampling import SampleBeam
from physcapture.control.sampling import SamplerConfig
from physcapture.control.sampling import SamplingMode
