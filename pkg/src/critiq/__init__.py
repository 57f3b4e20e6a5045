"""critiq: desk-scale image aesthetics learned from user comments.

Two stages: (1) contrastive + caption pretraining of a miniature
dual-encoder/decoder on image-comment pairs, (2) a rank-based adapter that
finetunes a single residual projection against a frozen text anchor for
aesthetic scoring. Zero-shot prompt scoring and the full metric suite
(SRCC/PLCC/mAP/BLEU/ROUGE-L/CIDEr) ride along.
"""

from .autodiff import (DegenerateInputError, FiniteDiffReport, ShapeError, Tensor,
                       backward, finite_diff_check, no_grad)
from .config import TrainConfig
from .model import ModelConfig, ModelParams, generate_caption
from .objectives import (AdapterState, LossWeights, adapt_embedding, adapter_score,
                         contrastive_loss, generative_loss, pretraining_loss,
                         rank_adapter_loss)
from .prompts import PromptBank
from .tokenizer import Vocabulary, decode, encode
from .zsl import zsl_iaa_ensemble, zsl_iaa_single, zsl_style_scores

__version__ = "0.1.0"

__all__ = [
    "AdapterState", "DegenerateInputError", "FiniteDiffReport", "LossWeights",
    "ModelConfig", "ModelParams", "PromptBank", "ShapeError", "Tensor",
    "TrainConfig", "Vocabulary", "adapt_embedding", "adapter_score", "backward",
    "contrastive_loss", "decode", "encode", "finite_diff_check", "generate_caption",
    "generative_loss", "no_grad", "pretraining_loss", "rank_adapter_loss",
    "zsl_iaa_ensemble", "zsl_iaa_single", "zsl_style_scores",
]
