from zerocon.denoiser.attention import attention
from zerocon.denoiser.text import TextEmbedding, ToyTextEncoder, WordTokenizer
from zerocon.denoiser.unet import (
    CROSS_LAYERS,
    DEFAULT_TAPS,
    LAYER_IDS,
    AttentionMapSet,
    Denoiser,
    DenoiserOutput,
    FeatureStack,
    Record,
    ToyDenoiser,
    UNetConfig,
    predict,
)

__all__ = [
    "CROSS_LAYERS",
    "DEFAULT_TAPS",
    "LAYER_IDS",
    "AttentionMapSet",
    "Denoiser",
    "DenoiserOutput",
    "FeatureStack",
    "Record",
    "TextEmbedding",
    "ToyDenoiser",
    "ToyTextEncoder",
    "UNetConfig",
    "WordTokenizer",
    "attention",
    "predict",
]
