"""Pure-numpy segment kernels.

Accumulation is unbuffered and runs in input order, so results are
bit-identical to the compiled kernels in ``_ckernels``.
"""
import numpy as np


def _segments(segments, num_segments, n):
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape != (n,):
        raise ValueError("segments must align with rows of values")
    if n and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexError("segment id out of range")
    return seg


def _floats(values):
    values = np.asarray(values)
    return values if values.dtype.kind == "f" else values.astype(np.float64)


def segment_sum(values, segments, num_segments):
    values = _floats(values)
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, _segments(segments, num_segments, len(values)), values)
    return out


def segment_max(values, segments, num_segments):
    values = _floats(values)
    out = np.full((num_segments,) + values.shape[1:], -np.inf, dtype=values.dtype)
    np.maximum.at(out, _segments(segments, num_segments, len(values)), values)
    return out
