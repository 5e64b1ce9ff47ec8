"""Fixed-size stylebook voice conversion on a synthetic feature corpus."""

from .corpus import CorpusSpec, Utterance, generate_corpus, split_corpus
from .content import Codebook, fit_codebook, quantize, encode_content
from .attention import MultiHeadAttention, mha_forward, softmax_rows
from .gradcheck import grad_check
from .stylebook import (
    Stylebook,
    QuerySet,
    attention_profile,
    build_stylebook,
    encode_style,
    retrieve_styles,
)
from .diffusion import DiffusionSchedule, ScoreNetwork, cfg_score, forward_perturb, sample, training_loss
from .knn import TargetBank, bank_memory_bytes, knn_match
from .model import ConversionModel, ModelConfig, load_checkpoint, save_checkpoint
from .harness import (
    EvalReport,
    RunConfig,
    TrainingConfig,
    analyze_attention,
    convert,
    enroll,
    evaluate,
    memory_model,
    train,
)

__version__ = "0.1.0"
