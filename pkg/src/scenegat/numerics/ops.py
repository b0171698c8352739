"""Dense kernels and their hand-written backward passes.

Matrices are plain numpy arrays, float64 unless a caller deliberately
passes another float dtype (which is preserved). Every backward function takes the
upstream gradient plus whatever the forward pass cached and returns the
gradient with respect to the forward inputs.
"""
from __future__ import annotations

import numpy as np

from ..errors import DataError, NumericError
from .kernels import segment_max, segment_sum


def _floats(x) -> np.ndarray:
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(np.float64)


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _floats(a)
    b = _floats(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    if slope < 0:
        raise ValueError("leaky_relu slope must be non-negative")
    x = _floats(x)
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(grad: np.ndarray, x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x >= 0, grad, slope * grad)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad, grad * np.exp(np.minimum(x, 0.0)))


def segment_softmax(scores, segments, num_segments: int | None = None) -> np.ndarray:
    """Softmax of ``scores`` within each segment, column-wise for 2-D input.

    Segments are identified by non-negative ids; only ids that occur are
    normalized, so there are no empty segments.
    """
    scores = _floats(scores)
    segments = np.asarray(segments, dtype=np.intp)
    check_finite(scores, "softmax scores")
    if num_segments is None:
        num_segments = int(segments.max()) + 1 if segments.size else 0
    shifted = scores - segment_max(scores, segments, num_segments)[segments]
    ex = np.exp(shifted)
    return ex / segment_sum(ex, segments, num_segments)[segments]


def segment_softmax_backward(grad, alpha, segments, num_segments: int) -> np.ndarray:
    dot = segment_sum(alpha * grad, segments, num_segments)[segments]
    return alpha * (grad - dot)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def cross_entropy_with_logits(logits, labels, class_weights=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    With ``class_weights`` the mean is weighted: sum(w_y * l) / sum(w_y).
    """
    logits = _floats(logits)
    labels = np.asarray(labels, dtype=np.intp)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {labels.shape}")
    if batch and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes})")
    check_finite(logits, "logits")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    per_sample = log_norm - z[rows, labels]
    probs = np.exp(z - log_norm[:, None])
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    if class_weights is None:
        loss = per_sample.sum() / batch
        dlogits = (probs - onehot) / batch
    else:
        w = np.asarray(class_weights, dtype=logits.dtype)[labels]
        total = w.sum()
        loss = (w * per_sample).sum() / total
        dlogits = (probs - onehot) * (w / total)[:, None]
    # keep extended precision if the logits carry it
    return (float(loss) if logits.dtype == np.float64 else loss), dlogits
