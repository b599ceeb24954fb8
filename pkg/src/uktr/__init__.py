"""Multi-modality Khmer text-line recognizer.

ResNet + Transformer visual encoder, modality-aware adapter routing, and two
decoders sharing one encoder: a CTC head and an autoregressive Transformer.
"""

from .model import ModelConfig, ModelOutput, UKTR
from .tokenizer import Vocabulary, build_vocab, decode, encode, segment

__all__ = ["ModelConfig", "ModelOutput", "UKTR", "Vocabulary", "build_vocab", "decode", "encode", "segment"]
__version__ = "0.1.0"
