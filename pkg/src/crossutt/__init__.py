"""Cross-utterance CTC decoding with a transformer language model."""

__version__ = "0.1.0"

from .ctc import AMPosterior, FusionParams, Hypothesis, UtteranceInput, decode_conversation, decode_utterance
from .model import ModelConfig, WeightStore, forward_full, generate_weights
from .session import LMState, SpecialTokens, advance, end_utterance, initial_token_distribution, truncate

__all__ = [
    "AMPosterior", "FusionParams", "Hypothesis", "UtteranceInput", "decode_conversation", "decode_utterance",
    "ModelConfig", "WeightStore", "forward_full", "generate_weights",
    "LMState", "SpecialTokens", "advance", "end_utterance", "initial_token_distribution", "truncate",
]
