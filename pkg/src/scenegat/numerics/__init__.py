from .kernels import BACKEND, segment_max, segment_sum
from .ops import (
    check_finite,
    cross_entropy_with_logits,
    elu,
    leaky_relu,
    matmul,
    segment_softmax,
    segment_softmax_backward,
    softmax,
)
from .params import AdamState, ParameterStore, adam_step, finite_difference_check, make_rng

__all__ = [
    "BACKEND",
    "AdamState",
    "ParameterStore",
    "adam_step",
    "check_finite",
    "cross_entropy_with_logits",
    "elu",
    "finite_difference_check",
    "leaky_relu",
    "make_rng",
    "matmul",
    "segment_max",
    "segment_softmax",
    "segment_softmax_backward",
    "segment_sum",
    "softmax",
]
