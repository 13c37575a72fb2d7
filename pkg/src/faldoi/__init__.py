"""Dense optical flow grown from sparse seed matches by local patch
minimization of a variational energy, at the finest scale only."""
from .energy import EnergyConfig, Rect, eval_energy, nltv_weights, prepare
from .flowio import EMPTY, FILLED, FIXED, FlowField, MatchSet, flow_to_color, read_flo, read_matches, write_flo, write_matches
from .grow import CandidateQueue, basic_faldoi_growing, bilateral_fillin, laplace_interpolate
from .imgproc import bicubic_warp, centered_gradient, load_image, to_grayscale, to_lab
from .metrics import FlowMetrics, compute_metrics
from .pipeline import PipelineConfig, fb_prune, run_faldoi, run_iterated_faldoi, saliency_prune
from .solver import csad_data_step, l1_data_step, nltv_reg_step, refine_flow, tv_reg_step
from .synthetic import Sprite, SyntheticSpec, generate_synthetic, inject_outliers

__version__ = "0.1.0"
