"""Minimal numpy network runtime with manual backpropagation."""
from .layers import (
    Conv2d,
    Embedding,
    FeedForward,
    Flatten,
    LayerNorm,
    Linear,
    MaxPool2d,
    Module,
    MultiHeadAttention,
    Param,
    ReLU,
    cross_entropy,
    softmax,
)
from .network import BuildError, Sequential, TaskShape, build, cnn_param_count, param_count, propagate_shapes
from .seq2seq import CharVocab, Seq2Seq, TokenPairs, build_seq2seq, make_batch, seq2seq_param_count
from .training import (
    Adam,
    ArrayData,
    DeadlineExceeded,
    DivergenceError,
    TrainConfig,
    TrainReport,
    accuracy,
    train,
)
