"""Filter attribution by parameter-space integrated gradients for blind SR networks."""

from .degrade import DegradationSpec, PairedSample, downsample_bicubic, gaussian_kernel
from .model import FilterId, FilterSet, ModelParams, ModelSpec, build, enumerate_filters, forward, grad_params, loss
from .attrib import (AttributionTable, DegradationScoreTable, abs_delta_scores, discriminative_scores,
                     faig_per_param, ig_input_space_scores, random_filterset, select_top)
from .evaluation import (Thresholds, calibrate_thresholds, filter_distribution, gradient_mse, mask_filters,
                         mask_sweep, overlap_score, predict_degradation, psnr_rgb, retrain_report)
from .train import TrainConfig, finetune_target, retrain_selected, train_baseline

__version__ = "0.1.0"
