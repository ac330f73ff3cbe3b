"""Semantic-label-to-image synthesis guided by learned edge maps and optical flow."""
from .core import EncodingError, TrainingAbort, ValidationError
from .datakit import DatasetManifest, PairedSample, load_paired_dataset, load_sequences, synth_toy_dataset
from .dned import DnedNetwork, dned_forward, dned_loss, ensemble_edges, sample_ensemble_weights
from .edges import LaplacianConfig, laplacian_edge_map
from .flow import FlowConfig, estimate_flow, warp
from .metrics import fid, frechet_distance, fvd, gaussian_stats, segmentation_scores
from .synthesis import Discriminator, Generator, cg2real_objective, gan_losses
from .training import TrainConfig, load_checkpoint, train_cg2real
from .video import VideoConfig, finetune_video, flow_loss, generate_sequence

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "Discriminator", "DnedNetwork", "EncodingError", "FlowConfig", "Generator",
    "LaplacianConfig", "PairedSample", "TrainConfig", "TrainingAbort", "ValidationError", "VideoConfig",
    "cg2real_objective", "dned_forward", "dned_loss", "ensemble_edges", "estimate_flow", "fid",
    "finetune_video", "flow_loss", "frechet_distance", "fvd", "gan_losses", "gaussian_stats",
    "generate_sequence", "laplacian_edge_map", "load_checkpoint", "load_paired_dataset", "load_sequences",
    "sample_ensemble_weights", "segmentation_scores", "synth_toy_dataset", "train_cg2real", "warp",
]
