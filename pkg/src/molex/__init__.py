"""Mixture of LoRA experts (MoLEx) on a small numpy transformer, for spoof detection."""

from .backbone import BONAFIDE, SPOOF, Encoder, ModelConfig
from .checkpoint import ModelCheckpoint, load_encoder, save_encoder
from .data import Dataset, SynthSpec, Utterance, generate
from .errors import ConfigError, ContractError, FormatError, GradientError, MolexError, NumericError, ShapeError
from .freeze import FreezeMask
from .layer import GatingNetwork, LoRAExpert, MoLExLayer, extend_experts, molex_forward, route
from .losses import count_params, eer, effective_rank, orth_loss
from .tensor import Tensor
from .training import TrainConfig, adapt, pretrain, train

__version__ = "0.1.0"
