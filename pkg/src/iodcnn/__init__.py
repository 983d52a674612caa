"""Multi-task CNN joining event recognition with rigid and non-rigid object detection."""
from .tensor import make_rng, gaussian_init, finite_diff_check
from .kernels import BACKEND
from .network import NetworkSpec, Network, make_spec, build, load, save
from .data import Dataset, SyntheticSpec, generate_synthetic, load_manifest
from .training import StageConfig, cascaded_train, train_stages, desk_spec, desk_stages, single_task_stages
from .evaluation import average_precision, detection_map, evaluate_network, score_fusion

__version__ = "0.1.0"
