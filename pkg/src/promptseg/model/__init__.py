from .attention import FeedForward, MultiHeadCrossAttention
from .decoder import ExistenceHead, PyramidDecoder
from .encoder import FusionEncoder, StageFeatures
from .fusion import MultiModalFusionBlock, SelectiveGate
from .network import (
    EPS,
    ClassPrediction,
    ModelConfig,
    Outputs,
    PromptSegmenter,
    bce,
    images_to_tensor,
    segmentation_loss,
    vocab_for_lexicon,
)
from .text import LanguageFeatures, TextEncoder, Tokenizer, build_vocab, normalize
