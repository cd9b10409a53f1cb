"""Local mutual-information explanations for a prototypical few-shot encoder, on numpy."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    EstimationError,
    FormatError,
    GenerationError,
    IngestionError,
    MilrError,
    NonFiniteError,
    SamplingError,
    TrainingError,
)
from .tensor import Tensor, no_grad
from .nn import Encoder, EncoderConfig, EncoderOutput, build_encoder, encoder_forward, freeze
from .data import Dataset, Episode, generate_dataset, load_dataset, sample_episode, save_dataset
from .protonet import ProtonetConfig, compute_prototypes, classify_query, episode_loss, train_protonet
from .estimators import (
    BottleneckHead,
    Critic,
    ScoreBlock,
    gaussian_pair_oracle,
    infonce_lower_bound,
    score_matrix,
    vib_upper_bound,
)
from .milr import (
    FeatureCache,
    MilrConfig,
    MilrState,
    decision_information_map,
    explain_sample,
    redundancy_map,
    stage1_collect,
    total_information_map,
    train_milr,
)
from .viz import InfoMap, RenderedImage, blend, colorize, normalize_map, upsample_bilinear, write_png

__all__ = [name for name in dir() if not name.startswith("_")]
