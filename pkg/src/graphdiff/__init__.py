"""Graph-structured denoising diffusion for single-frame 2D-to-3D pose lifting."""

from .data import NormalizationSpec, PoseDataset, load_dataset, save_dataset, synth_toy_dataset
from .denoiser import DenoiserConfig, GraphDenoiser, build_denoiser
from .diffusion import SamplerConfig, sample, sample_hypotheses
from .evaluation import evaluate, mpjpe, p_mpjpe, procrustes_align
from .schedule import NoiseSchedule, cosine_schedule, linear_schedule
from .skeleton import SkeletonSpec, build_skeleton, h36m17
from .training import LossConfig, TrainConfig, diffusion_loss, train

__version__ = "0.1.0"
