"""Training objectives: prediction loss, invariance penalties and the
unsupervised contrastive loss with feature masking.

Every function accepts tape-bound Tensors (and then returns a Tensor that
can be differentiated) or plain arrays (and then returns plain values).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import kernels

__all__ = [
    "LossBreakdown",
    "UclConfig",
    "LossError",
    "cross_entropy",
    "irmv1_penalty",
    "irmv1_penalty_grad",
    "irmv1_cotangent",
    "vrex_penalty",
    "classifier_grad_stat",
    "fishr_penalty",
    "feature_mask",
    "dropout_mask",
    "ucl_loss",
    "divil_total",
]


class LossError(ValueError):
    pass


def _scalar(x):
    return float(np.asarray(ag.as_array(x)).reshape(()))


@dataclass
class LossBreakdown:
    pred: object
    il: object
    ucl: object
    total: object
    lam: float = 0.0
    beta: float = 0.0
    per_env_losses: list = field(default_factory=list)

    def as_floats(self):
        return LossBreakdown(_scalar(self.pred), _scalar(self.il), _scalar(self.ucl),
                             _scalar(self.total), self.lam, self.beta,
                             [_scalar(v) for v in self.per_env_losses])


@dataclass(frozen=True)
class UclConfig:
    temperature: float = 1.0
    sign_mode: str = "standard"
    mask_fraction: float = 0.0
    normalize: bool = True
    mask_mode: str = "prefix"
    reduction: str = "sum"

    def __post_init__(self):
        if not self.temperature > 0:
            raise LossError(f"temperature must be positive, got {self.temperature}")
        if self.sign_mode not in ("standard", "paper_literal"):
            raise LossError(f"unknown sign_mode {self.sign_mode!r}")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise LossError("mask_fraction must be in [0, 1]")
        if self.mask_mode not in ("prefix", "dropout"):
            raise LossError(f"unknown mask_mode {self.mask_mode!r}")
        if self.reduction not in ("sum", "mean"):
            raise LossError(f"unknown reduction {self.reduction!r}")


# ---------------------------------------------------------------------------
# prediction loss


def _binary_column(logits):
    shape = ag.as_array(logits).shape
    if len(shape) == 2 and shape[1] == 1:
        return logits
    if len(shape) == 1:
        return ag.reshape(logits, (-1, 1))
    raise LossError(f"binary logits must have shape (n,) or (n, 1), got {shape}")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood.

    One logit per row means a binary task with labels in {0, 1}; otherwise
    labels are integer class ids.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    shape = ag.as_array(logits).shape
    if shape[0] == 0:
        raise LossError("cross_entropy: empty batch")
    if len(shape) == 1 or shape[1] == 1:
        if not np.all((labels == 0) | (labels == 1)):
            raise LossError("binary labels must be 0 or 1")
        o = _binary_column(logits)
        y = labels[:, None]
        return ag.mean(ag.sub(ag.softplus(o), ag.mul(o, y)))
    n_cls = shape[1]
    if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= n_cls:
        raise LossError(f"labels must be class ids in [0, {n_cls})")
    onehot = np.eye(n_cls)[labels.astype(int)]
    return ag.neg(ag.mean(ag.sum(ag.mask(ag.log_softmax(logits, axis=1), onehot), axis=1)))


# ---------------------------------------------------------------------------
# IRMv1


def _sig(o):
    return 0.5 * (1.0 + np.tanh(0.5 * o))


def _irm_parts(o, y):
    if o.size == 0:
        raise LossError("irmv1_penalty: empty batch")
    s = _sig(o)
    g = float(np.mean((s - y) * o))
    return s, g


def irmv1_cotangent(logits, labels):
    """d(penalty)/d(logit_i) = 2 g / n * (sigmoid'(o_i) o_i + sigmoid(o_i) - y_i)."""
    o = np.asarray(ag.as_array(logits), dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    s, g = _irm_parts(o, y)
    return 2.0 * g / o.size * (s * (1.0 - s) * o + s - y)


def irmv1_penalty_grad(logits, labels):
    """IRMv1 penalty as a single tape node with an analytic vector-Jacobian product.

    The penalty is ``g**2`` where ``g`` is the derivative of the mean binary
    cross-entropy of ``w * logits`` with respect to the scalar ``w`` at 1.
    Differentiating it would normally need a second backward pass; here the
    cotangent of the logits is written in closed form, so one ordinary
    reverse sweep yields the exact parameter gradient.
    """
    o = np.asarray(ag.as_array(logits), dtype=np.float64)
    shape = o.shape
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if o.reshape(-1).size != y.size:
        raise LossError("irmv1_penalty: logits and labels differ in length")
    _, g = _irm_parts(o.reshape(-1), y)
    cot = irmv1_cotangent(o, y).reshape(shape)
    return ag.custom("irmv1_penalty", np.array(g * g), (logits,),
                     (lambda gout: gout * cot,))


def irmv1_penalty(logits, labels):
    """Squared gradient of the environment risk w.r.t. a dummy scale at 1.0."""
    return irmv1_penalty_grad(logits, labels)


# ---------------------------------------------------------------------------
# VREx / Fishr


def vrex_penalty(per_env_losses):
    """Population variance of the environment risks."""
    if len(per_env_losses) == 0:
        raise LossError("vrex_penalty: no environments")
    vals = [ag.reshape(v, ()) if isinstance(v, ag.Tensor) else np.asarray(v, float).reshape(())
            for v in per_env_losses]
    return ag.variance(ag.stack(vals))


def classifier_grad_stat(features, logits, labels, statistic="mean"):
    """Per-environment statistic of per-sample classifier-layer gradients.

    For a binary head the per-sample gradient of the loss w.r.t. ``(W, b)``
    is ``(sigmoid(o) - y) * [h, 1]``.  ``statistic`` is ``"mean"`` (average
    gradient) or ``"variance"`` (coordinate-wise population variance).
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    r = ag.sub(ag.sigmoid(_binary_column(logits)), y)
    n = y.shape[0]
    if n == 0:
        raise LossError("classifier_grad_stat: empty batch")
    h = ag.concat([features, np.ones((n, 1))], axis=1)
    per_sample = ag.mul(h, r)
    if statistic == "mean":
        return ag.mean(per_sample, axis=0)
    if statistic == "variance":
        return ag.variance(per_sample, axis=0)
    raise LossError(f"unknown statistic {statistic!r}")


def fishr_penalty(per_env_stats):
    """Mean squared distance of each environment's statistic to their average."""
    if len(per_env_stats) == 0:
        raise LossError("fishr_penalty: no environments")
    shapes = {ag.as_array(g).shape for g in per_env_stats}
    if len(shapes) != 1:
        raise LossError(f"fishr_penalty: mismatched gradient shapes {sorted(shapes)}")
    stacked = ag.stack(list(per_env_stats))
    centered = ag.sub(stacked, ag.mean(stacked, axis=0, keepdims=True))
    return ag.div(ag.sqnorm(centered), float(len(per_env_stats)))


# ---------------------------------------------------------------------------
# contrastive loss


def _prefix_len(p, m):
    return min(m, int(math.floor(p * m + 1e-9)))


def feature_mask(z, p):
    """Zero the first ``floor(p * m)`` columns of every row."""
    if not 0.0 <= p <= 1.0:
        raise LossError(f"mask fraction must be in [0, 1], got {p}")
    m = ag.as_array(z).shape[-1]
    keep = np.ones(m)
    keep[:_prefix_len(p, m)] = 0.0
    return ag.mask(z, keep)


def dropout_mask(z, p, rng):
    """Zero each coordinate independently with probability ``p`` (ablation)."""
    if not 0.0 <= p <= 1.0:
        raise LossError(f"mask fraction must be in [0, 1], got {p}")
    keep = (rng.random(ag.as_array(z).shape) >= p).astype(np.float64)
    return ag.mask(z, keep)


def _normalize_rows(z):
    norm = ag.sqrt(ag.add(ag.sqnorm(z, axis=1, keepdims=True), 1e-24))
    return ag.div(z, norm)


def _sq_dists(a, b):
    sa = ag.sqnorm(a, axis=1, keepdims=True)
    sb = ag.reshape(ag.sqnorm(b, axis=1), (1, -1))
    cross = ag.matmul(a, ag.transpose(b))
    return ag.sub(ag.add(sa, sb), ag.mul(cross, 2.0))


def ucl_loss(z, z_pos, cfg=UclConfig(), rng=None, fused=True):
    """InfoNCE-style loss over squared Euclidean distances.

    Row ``i`` of ``z_pos`` is the positive for anchor ``z[i]``; the other
    anchors ``z[j], j != i`` are its negatives.  With ``sign_mode="standard"``
    the similarity is ``-||a - b||^2 / T``; ``"paper_literal"`` flips the sign.
    ``rng`` is only needed for ``mask_mode="dropout"``; ``fused=False``
    builds the loss from primitive ops instead of the single fused node.
    """
    shape = ag.as_array(z).shape
    if len(shape) != 2 or shape[0] == 0:
        raise LossError(f"ucl_loss: need a non-empty (N, m) batch, got {shape}")
    if ag.as_array(z_pos).shape != shape:
        raise LossError("ucl_loss: anchors and positives differ in shape")
    if cfg.normalize:
        z, z_pos = _normalize_rows(z), _normalize_rows(z_pos)
    if cfg.mask_fraction > 0:
        if cfg.mask_mode == "prefix":
            z, z_pos = feature_mask(z, cfg.mask_fraction), feature_mask(z_pos, cfg.mask_fraction)
        else:
            if rng is None:
                raise LossError("dropout masking needs an rng")
            z = dropout_mask(z, cfg.mask_fraction, rng)
            z_pos = dropout_mask(z_pos, cfg.mask_fraction, rng)
    sign = -1.0 if cfg.sign_mode == "standard" else 1.0
    scale = sign / cfg.temperature
    if fused:
        per_row = _contrastive_rows(z, z_pos, scale)
    else:
        per_row = _contrastive_rows_composed(z, z_pos, scale)
    if cfg.reduction == "mean":
        return ag.mean(per_row)
    return ag.sum(per_row)


def _contrastive_rows_composed(z, z_pos, scale):
    # reference path built from primitive tape ops; O(N^2) temporaries per op
    n = ag.as_array(z).shape[0]
    eye = np.eye(n)
    anchors = ag.mul(_sq_dists(z, z), scale)
    pos = ag.mul(ag.sqnorm(ag.sub(z, z_pos), axis=1, keepdims=True), scale)
    logits = ag.add(ag.mask(anchors, 1.0 - eye), ag.mul(pos, eye))
    return ag.neg(ag.sum(ag.mask(ag.log_softmax(logits, axis=1), eye), axis=1))


def _contrastive_rows(z, z_pos, scale):
    """Per-anchor losses as one tape node.

    Row i of the logit matrix holds ``scale * ||a_i - a_j||^2`` for j != i and
    ``scale * ||a_i - b_i||^2`` on the diagonal; the loss is ``lse_i - L_ii``.
    With ``G = softmax(L) - I`` the cotangents are

        da = 2 s [(rowsum(G_off) + colsum(G_off)) a - (G_off + G_off^T) a]
             + 2 s g_diag (a - b)
        db = -2 s g_diag (a - b)

    scaled per row by the incoming cotangent.
    """
    a, b = ag.as_array(z), ag.as_array(z_pos)
    sq = np.einsum("ij,ij->i", a, a)
    diff = a - b
    pos = np.einsum("ij,ij->i", diff, diff)
    probs = np.ascontiguousarray(a @ a.T)
    lse = kernels.distance_softmax_inplace(probs, sq, pos, float(scale))
    rows = lse - scale * pos
    diag = np.diag_indices(a.shape[0])
    g_diag = probs[diag] - 1.0
    probs[diag] = 0.0

    def vjp_a(g):
        # W = P * g[:, None]; rowsum(W) = -g * g_diag since rows of P sum to 1
        ga = g[:, None] * a
        r = probs.T @ g - g * g_diag
        out = r[:, None] * a - g[:, None] * (probs @ a) - probs.T @ ga
        out += (g * g_diag)[:, None] * diff
        return 2.0 * scale * out

    def vjp_b(g):
        return -2.0 * scale * (g * g_diag)[:, None] * diff

    return ag.custom("ucl_rows", rows, (z, z_pos), (vjp_a, vjp_b))


def divil_total(pred, il, ucl, lam, beta, per_env_losses=()):
    """``pred + lam * il + beta * ucl`` with its breakdown."""
    if lam < 0 or beta < 0:
        raise LossError("loss weights must be non-negative")
    total = ag.add(ag.add(pred, ag.mul(il, float(lam))), ag.mul(ucl, float(beta)))
    return LossBreakdown(pred, il, ucl, total, float(lam), float(beta), list(per_env_losses))
