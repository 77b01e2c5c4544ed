"""Unsupervised cross-modal homography estimation with interleaved modality transfer."""
from .config import TrainConfig, load_config
from .data import PairedImages, load_paired_dataset, make_eval_sample, make_training_sample, synth_toy_modality
from .errors import InterNetError
from .estimator import HomographyEstimator
from .evaluation import EvalReport, corner_error, evaluate
from .geometry import displacement_from_homography, project_points, solve_dlt, warp_image
from .model import InterNet
from .transfer import ModalityTransfer

__version__ = "0.1.0"
