"""EEG-conditioned latent diffusion with saliency-map control, at desk scale."""

from .checkpoint import Checkpoint, content_hash, load_checkpoint, save_checkpoint
from .controlnet import ControlBranch, control_forward, hint_encode, init_control
from .datasets import (
    EEGEpoch,
    PairedDataset,
    StimulusRecord,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split,
)
from .diffusion import (
    Autoencoder,
    AutoencoderConfig,
    NoiseSchedule,
    UNet,
    UNetConfig,
    add_noise,
    ae_decode,
    ae_encode,
    build_schedule,
    ddim_sample,
    training_loss,
    unet_forward,
)
from .eeg_encoder import EEGEncoder, EncoderConfig, channel_attention, encode, init_encoder
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    EegSalError,
    IngestionError,
    MetricError,
    TrainingError,
)
from .evaluation import (
    MetricReport,
    ToyExtractor,
    evaluate_run,
    pixcorr,
    saliency_cc,
    saliency_kl,
    saliency_sim,
    ssim,
    swav_distance,
    two_way_identification,
)
from .lora import LoRAConfig, adapted_forward, inject, merge, merge_into
from .pipeline import ModelConfig, Pipeline, desk_model_config
from .saliency import SaliencyMap, normalize, resize_map, spectral_residual
from .training import (
    PretrainConfig,
    StageConfig,
    lr_at,
    pipeline_from_checkpoint,
    pretrain_base,
    run_stage1,
    run_stage2,
    synthetic_base,
)

__version__ = "0.1.0"
