from physcapture.prior.distribution import decode_pose
from physcapture.prior.distribution import DistributionEncoder
from physcapture.prior.distribution import DistributionPrior
from physcapture.prior.distribution import encode_distribution
from physcapture.prior.distribution import evaluate_sampling_loss
from physcapture.prior.distribution import generate_training_data
from physcapture.prior.distribution import PoseDecoder
from physcapture.prior.distribution import pretrain_kl
from physcapture.prior.distribution import read_dataset
from physcapture.prior.distribution import train_two_branch
from physcapture.prior.distribution import TrainConfig
from physcapture.prior.distribution import TrainingSet
from physcapture.prior.distribution import write_dataset
from physcapture.prior.net import adamw_step
from physcapture.prior.net import AdamWConfig
from physcapture.prior.net import kl_diag_gaussian
from physcapture.prior.net import load_checkpoint
from physcapture.prior.net import Mlp
from physcapture.prior.net import mlp_forward
from physcapture.prior.net import MlpSpec
from physcapture.prior.net import NonFiniteLossError
from physcapture.prior.net import reparam_sample
from physcapture.prior.net import save_checkpoint
