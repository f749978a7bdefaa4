from physcapture.evaluation.experiments import evaluate_capture
from physcapture.evaluation.experiments import evaluate_motion
from physcapture.evaluation.experiments import run_success_experiment
from physcapture.evaluation.metrics import compute_metrics
from physcapture.evaluation.metrics import foot_z_error
from physcapture.evaluation.metrics import MetricsReport
from physcapture.evaluation.metrics import mpjpe
from physcapture.evaluation.metrics import pa_mpjpe
from physcapture.evaluation.metrics import smoothness_error
from physcapture.evaluation.metrics import wilson_interval
from physcapture.evaluation.tasks import corrupt_motion
from physcapture.evaluation.tasks import synthesize_task
from physcapture.evaluation.tasks import SyntheticTask
from physcapture.evaluation.tasks import TaskGenerationError
from physcapture.evaluation.tasks import TaskName
