"""Loss and similarity primitives with hand-derived gradients.

Everything here is a pure function of numpy arrays: no state, no global
randomness. Each differentiable operation has a *_grad companion whose
output is checked against central finite differences in the test suite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

NORM_EPS = 1e-12
IGNORE_LABEL = 255


def _as_vec(x, name="input"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise InvalidParameterError(f"{name} must be a 1-d vector, got shape {a.shape}")
    return a


def cosine_similarity(u, v):
    """Cosine of the angle between u and v, epsilon-guarded against zero norms."""
    u = _as_vec(u, "u")
    v = _as_vec(v, "v")
    if u.shape != v.shape:
        raise InvalidParameterError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 and nv == 0.0:
        warnings.warn("cosine_similarity: both inputs are zero vectors", RuntimeWarning)
        return 0.0
    return float(np.dot(u, v) / ((nu + NORM_EPS) * (nv + NORM_EPS)))


def _cos_pair_grads(u, v):
    """cos(u, v) and its gradients with respect to u and v."""
    nu = np.linalg.norm(u) + NORM_EPS
    nv = np.linalg.norm(v) + NORM_EPS
    c = np.dot(u, v) / (nu * nv)
    du = v / (nu * nv) - c * u / (nu * nu)
    dv = u / (nu * nv) - c * v / (nv * nv)
    return c, du, dv


def softmax(logits, axis=-1):
    """Overflow-safe softmax along the given axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_sharpen(logits, temperature):
    """softmax(logits / temperature); temperature < 1 peaks the distribution."""
    if not temperature > 0:
        raise InvalidParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise InvalidParameterError("logits must be finite")
    return softmax(z / temperature)


def consistency_loss(yhat_weak, yhat_strong):
    """1 - cos between the two predicted probability vectors.

    The weak argument is a stop-gradient target; only the gradient with
    respect to yhat_strong is defined (see consistency_grad).
    """
    w = _as_vec(yhat_weak, "yhat_weak")
    s = _as_vec(yhat_strong, "yhat_strong")
    if w.shape != s.shape:
        raise InvalidParameterError(f"dimension mismatch: {w.shape} vs {s.shape}")
    return 1.0 - cosine_similarity(w, s)


def consistency_grad(yhat_weak, yhat_strong):
    """Gradient of consistency_loss with respect to yhat_strong only."""
    w = _as_vec(yhat_weak, "yhat_weak")
    s = _as_vec(yhat_strong, "yhat_strong")
    if w.shape != s.shape:
        raise InvalidParameterError(f"dimension mismatch: {w.shape} vs {s.shape}")
    _, _, ds = _cos_pair_grads(w, s)
    return -ds


def _contrastive_sims(anchor, positive, negatives, tau):
    anchor = _as_vec(anchor, "anchor")
    positive = _as_vec(positive, "positive")
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim == 1:
        negatives = negatives[None, :]
    if negatives.shape[0] < 1:
        raise InvalidParameterError("need at least one negative")
    if negatives.shape[1] != anchor.shape[0] or positive.shape[0] != anchor.shape[0]:
        raise InvalidParameterError("all vectors must share one dimension")
    if not tau > 0:
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    return anchor, positive, negatives


def pixel_contrastive_loss(anchor, positive, negatives, tau=0.07):
    """InfoNCE over cosine similarities: anchor vs positive against N negatives.

    Evaluated in log-sum-exp form; strictly positive for every valid input.
    """
    anchor, positive, negatives = _contrastive_sims(anchor, positive, negatives, tau)
    others = np.vstack([positive[None, :], negatives])
    na = np.linalg.norm(anchor) + NORM_EPS
    no = np.linalg.norm(others, axis=1) + NORM_EPS
    sims = (others @ anchor) / (na * no)
    k = sims / tau
    m = k.max()
    return float(m + np.log(np.exp(k - m).sum()) - k[0])


def pixel_contrastive_loss_and_grad(anchor, positive, negatives, tau=0.07):
    """Loss value plus gradients wrt anchor, positive and each negative."""
    anchor, positive, negatives = _contrastive_sims(anchor, positive, negatives, tau)
    others = np.vstack([positive[None, :], negatives])  # (N+1, D)
    na = np.linalg.norm(anchor) + NORM_EPS
    no = np.linalg.norm(others, axis=1) + NORM_EPS
    dots = others @ anchor
    sims = dots / (na * no)
    s = softmax(sims / tau)
    dsim = s / tau
    dsim[0] -= 1.0 / tau  # d loss / d cos_k
    # chain through the cosine for each pair (anchor, others[k])
    # d cos / d anchor = o/(na*no) - cos * a/na^2
    # d cos / d o      = a/(na*no) - cos * o/no^2
    d_anchor = (dsim / no) @ others / na - (dsim @ sims) * anchor / (na * na)
    d_others = (dsim / no)[:, None] * (anchor[None, :] / na - (sims / no)[:, None] * others)
    k = sims / tau
    m = k.max()
    loss = float(m + np.log(np.exp(k - m).sum()) - k[0])
    return loss, d_anchor, d_others[0], d_others[1:]


def pixel_contrastive_grad(anchor, positive, negatives, tau=0.07):
    """Gradients of pixel_contrastive_loss wrt anchor, positive and each negative."""
    _, d_anchor, d_positive, d_negatives = pixel_contrastive_loss_and_grad(
        anchor, positive, negatives, tau)
    return d_anchor, d_positive, d_negatives


def supervised_ce(logits, label):
    """Per-pixel cross-entropy; IGNORE_LABEL pixels contribute 0."""
    z = _as_vec(logits, "logits")
    if label == IGNORE_LABEL:
        return 0.0
    if not (isinstance(label, (int, np.integer)) and 0 <= label < z.shape[0]):
        raise InvalidParameterError(f"label {label} out of range for {z.shape[0]} classes")
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[label])


def supervised_ce_grad(logits, label):
    """Gradient of supervised_ce with respect to the logits."""
    z = _as_vec(logits, "logits")
    if label == IGNORE_LABEL:
        return np.zeros_like(z)
    if not (isinstance(label, (int, np.integer)) and 0 <= label < z.shape[0]):
        raise InvalidParameterError(f"label {label} out of range for {z.shape[0]} classes")
    g = softmax(z)
    g[label] -= 1.0
    return g


def cross_entropy_map(logits, labels):
    """Mean cross-entropy over a map of logits (..., C) against integer labels.

    IGNORE_LABEL pixels are excluded from both the sum and the denominator.
    Returns (loss, d_logits).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape[:-1] != y.shape:
        raise InvalidParameterError(f"shape mismatch: logits {z.shape} vs labels {y.shape}")
    valid = y != IGNORE_LABEL
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(z)
    p = softmax(z, axis=-1)
    ysafe = np.where(valid, y, 0).astype(int)
    picked = np.take_along_axis(z, ysafe[..., None], axis=-1)[..., 0]
    m = z.max(axis=-1)
    lse = m + np.log(np.exp(z - m[..., None]).sum(axis=-1))
    loss = float(((lse - picked) * valid).sum() / n)
    grad = p.copy()
    np.put_along_axis(grad, ysafe[..., None],
                      np.take_along_axis(grad, ysafe[..., None], axis=-1) - 1.0, axis=-1)
    grad *= valid[..., None] / n
    return loss, grad


@dataclass
class LossBreakdown:
    supervised_ce: float
    contrastive: float
    consistency: float
    total: float
    lambda1: float
    lambda2: float


def combine_losses(sup, contrast, consist, lambda1, lambda2):
    """Total = sup + lambda1 * contrast + lambda2 * consist."""
    if lambda1 < 0 or lambda2 < 0:
        raise InvalidParameterError("loss coefficients must be nonnegative")
    total = sup + lambda1 * contrast + lambda2 * consist
    return LossBreakdown(sup, contrast, consist, total, lambda1, lambda2)


def image_contrastive_loss(weak_pooled, strong_pooled, negatives, tau=0.07):
    """InfoNCE on spatially pooled per-image vectors; same form as the pixel loss."""
    return pixel_contrastive_loss(weak_pooled, strong_pooled, negatives, tau)


def pixel_feature_consistency(z_weak, z_strong):
    """1 - cos between pixel features; stop-gradient on the weak side."""
    return 1.0 - cosine_similarity(z_weak, z_strong)


def pixel_feature_consistency_grad(z_weak, z_strong):
    """Gradient of pixel_feature_consistency with respect to z_strong."""
    return consistency_grad(z_weak, z_strong)


def output_ce_consistency(yhat_weak, strong_logits):
    """Cross-entropy of the strong logits against the weak soft target."""
    w = _as_vec(yhat_weak, "yhat_weak")
    z = _as_vec(strong_logits, "strong_logits")
    if w.shape != z.shape:
        raise InvalidParameterError(f"dimension mismatch: {w.shape} vs {z.shape}")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return float(lse - np.dot(w, z))


def output_ce_consistency_grad(yhat_weak, strong_logits):
    """Gradient of output_ce_consistency with respect to the strong logits."""
    w = _as_vec(yhat_weak, "yhat_weak")
    z = _as_vec(strong_logits, "strong_logits")
    if w.shape != z.shape:
        raise InvalidParameterError(f"dimension mismatch: {w.shape} vs {z.shape}")
    return softmax(z) - w
