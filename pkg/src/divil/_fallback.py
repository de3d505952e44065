"""Pure-numpy implementations of the hot kernels.

Same signatures as the compiled ``_ckernels`` module; selected by
:mod:`divil.kernels` when the extension is unavailable.
"""

import numpy as np


def softmax_rows_inplace(logits):
    """Row-softmax ``logits`` in place; returns the per-row log-sum-exp.

    ``logits`` must be a C-contiguous float64 matrix.
    """
    shift = logits.max(axis=1, keepdims=True)
    logits -= shift
    np.exp(logits, out=logits)
    total = logits.sum(axis=1, keepdims=True)
    logits /= total
    return (np.log(total) + shift).reshape(-1)


def distance_logits_inplace(gram, sq, pos, scale):
    """Turn a Gram matrix into ``scale * ||a_i - a_j||^2`` with ``scale * pos`` on the diagonal."""
    gram *= -2.0 * scale
    gram += (scale * sq)[:, None]
    gram += (scale * sq)[None, :]
    np.fill_diagonal(gram, scale * pos)


def distance_softmax_inplace(gram, sq, pos, scale):
    """``distance_logits_inplace`` followed by ``softmax_rows_inplace``."""
    distance_logits_inplace(gram, sq, pos, scale)
    return softmax_rows_inplace(gram)
