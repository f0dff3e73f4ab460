"""Training objectives with closed-form gradients.

Every loss returns a :class:`LossValue` whose ``gradients`` dict maps an
input name to an array of the same shape as that input.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericalError, RejectedInputError
from .labels import NUM_STATES
from .numerics import gaussian_sample

__all__ = [
    "PROB_FLOOR",
    "DEFAULT_GAMMA",
    "DEFAULT_LAMBDA",
    "DEFAULT_TAU",
    "DEFAULT_SIGMA",
    "LossValue",
    "ProbabilityFloorWarning",
    "make_positive",
    "similarity",
    "infonce_ircp",
    "group_softmax",
    "group_log_softmax",
    "focal_loss",
    "focal_loss_logits",
    "cross_entropy_logits",
    "report_nll",
    "report_nll_logits",
    "total_loss",
]

PROB_FLOOR = 1e-12
DEFAULT_GAMMA = 2.0
DEFAULT_LAMBDA = 1.0
DEFAULT_TAU = 0.5
DEFAULT_SIGMA = 0.1


class ProbabilityFloorWarning(RuntimeWarning):
    """A probability below ``PROB_FLOOR`` was clamped before taking a log."""


@dataclass
class LossValue:
    value: float
    gradients: dict = field(default_factory=dict)
    clamped: int = 0

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericalError(f"loss value is not finite: {self.value}")


def _floor(p, floor):
    below = p < floor
    n = int(np.count_nonzero(below))
    if n:
        warnings.warn(
            f"{n} probabilities clamped to {floor:g} before log", ProbabilityFloorWarning, stacklevel=3
        )
    return np.where(below, floor, p), below, n


def make_positive(anchor, sigma, rng):
    """Noisy positive key: ``anchor + N(0, sigma^2 I)``."""
    anchor = np.asarray(anchor, dtype=np.float64)
    noise = gaussian_sample(rng, anchor.size, 0.0, sigma)
    return anchor + noise.reshape(anchor.shape)


# -- similarities ------------------------------------------------------------

def similarity(a, b, kind="neg_euclidean"):
    """Scalar similarity of two vectors. Larger means more alike."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kind == "neg_euclidean":
        return -float(np.linalg.norm(a - b))
    if kind == "cosine":
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    raise RejectedInputError(f"unknown similarity {kind!r}")


def _sim_and_grads(X, Y, kind):
    """Elementwise similarity of paired rows ``X[..., :]`` and ``Y[..., :]``.

    Returns ``(s, ds_dx, ds_dy)`` with the gradients shaped like X and Y.
    """
    if kind == "neg_euclidean":
        diff = X - Y
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        # subgradient 0 at coincident points
        safe = np.where(dist > 0, dist, 1.0)
        unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
        return -dist, -unit, unit
    if kind == "cosine":
        nx = np.linalg.norm(X, axis=-1)
        ny = np.linalg.norm(Y, axis=-1)
        if np.any(nx == 0) or np.any(ny == 0):
            raise RejectedInputError("cosine similarity of a zero vector")
        s = np.sum(X * Y, axis=-1) / (nx * ny)
        dx = Y / (nx * ny)[..., None] - s[..., None] * X / (nx * nx)[..., None]
        dy = X / (nx * ny)[..., None] - s[..., None] * Y / (ny * ny)[..., None]
        return s, dx, dy
    raise RejectedInputError(f"unknown similarity {kind!r}")


def _normalize_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise RejectedInputError("cannot normalize a zero embedding")
    return X / norms, norms


def _normalize_backward(Xn, norms, grad):
    # d(x/|x|) = (I - xn xn^T) / |x|
    return (grad - Xn * np.sum(Xn * grad, axis=1, keepdims=True)) / norms


def infonce_ircp(anchors, positives, tau=DEFAULT_TAU, sim="neg_euclidean", normalize=False):
    """InfoNCE loss with in-batch negatives.

    For anchor ``a_i`` the positive is ``positives[i]`` and the negatives
    are the other anchors of the batch. The loss is the mean over anchors of
    ``-log softmax`` of the positive logit, logits being ``sim / tau``.

    Parameters
    ----------
    anchors, positives : array-like, shape (B, D)
    tau : float
        Temperature, > 0.
    sim : {'neg_euclidean', 'cosine'}
        ``'neg_euclidean'`` is minus the Euclidean distance, so closer
        pairs score higher.
    normalize : bool
        L2-normalise embeddings before computing similarities.

    Returns
    -------
    LossValue
        Gradients under keys ``'anchors'`` and ``'positives'``.
    """
    if not tau > 0:
        raise RejectedInputError(f"tau must be positive, got {tau}")
    A = np.asarray(anchors, dtype=np.float64)
    P = np.asarray(positives, dtype=np.float64)
    if A.ndim != 2 or A.shape != P.shape or A.shape[0] < 1:
        raise RejectedInputError(f"anchors {A.shape} and positives {P.shape} must match and be nonempty")
    B = A.shape[0]
    if normalize:
        A_in, P_in = A, P
        A, a_norms = _normalize_rows(A_in)
        P, p_norms = _normalize_rows(P_in)

    s_pos, dpos_da, dpos_dp = _sim_and_grads(A, P, sim)
    s_neg, dneg_di, dneg_dk = _sim_and_grads(A[:, None, :], A[None, :, :], sim)

    logits = np.empty((B, B))
    logits[:, 0] = s_pos / tau
    off = ~np.eye(B, dtype=bool)
    # row i: column 0 is the positive, columns 1.. are anchors k != i
    logits[:, 1:] = (s_neg[off].reshape(B, B - 1) / tau) if B > 1 else np.empty((B, 0))
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    lse = np.log(z[:, 0]) + m[:, 0]
    value = float(np.mean(lse - logits[:, 0]))
    soft = e / z

    w_pos = (soft[:, 0] - 1.0) / (B * tau)
    w_neg = np.zeros((B, B))
    if B > 1:
        w_neg[off] = (soft[:, 1:] / (B * tau)).reshape(-1)
    gA = w_pos[:, None] * dpos_da
    gP = w_pos[:, None] * dpos_dp
    gA += np.einsum("ik,ikd->id", w_neg, dneg_di)
    gA += np.einsum("ik,ikd->kd", w_neg, dneg_dk)
    if normalize:
        gA = _normalize_backward(A, a_norms, gA)
        gP = _normalize_backward(P, p_norms, gP)
    return LossValue(value, {"anchors": gA, "positives": gP})


# -- label classification ------------------------------------------------------

def _groups(x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % NUM_STATES:
        raise RejectedInputError(f"last axis {x.shape[-1]} is not a multiple of {NUM_STATES}")
    return x.reshape(x.shape[:-1] + (x.shape[-1] // NUM_STATES, NUM_STATES))


def group_log_softmax(logits):
    """Log of a 4-way normalised exponential over each disease group."""
    g = _groups(logits)
    m = g.max(axis=-1, keepdims=True)
    shifted = g - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return out.reshape(np.shape(logits))


def group_softmax(logits):
    return np.exp(group_log_softmax(logits))


def _check_label_batch(preds, truths):
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.shape != truths.shape or preds.shape[0] == 0:
        raise RejectedInputError(f"preds {preds.shape} and truths {truths.shape} must match")
    return preds, truths


def _focal_scale(ell, gamma):
    """Return ``(f(ell), f'(ell))`` for ``f(l) = (1 - e^-l)^gamma * l``."""
    q = -np.expm1(-ell)
    if gamma == 0:
        return ell.copy(), np.ones_like(ell)
    with np.errstate(divide="ignore", invalid="ignore"):
        qg = q**gamma
        first = np.where(q > 0, gamma * q ** (gamma - 1.0) * np.exp(-ell) * ell, 0.0)
    return qg * ell, first + qg


def focal_loss(preds, truths, gamma=DEFAULT_GAMMA, floor=PROB_FLOOR):
    """Focal loss over per-group normalised predictions.

    Per sample ``l = -sum_i truth_i log pred_i`` over all entries; the loss
    is ``mean((1 - exp(-l))^gamma * l)``. With ``gamma = 0`` this is the
    mean cross-entropy. Predictions below ``floor`` at entries with nonzero
    truth are clamped (counted in ``LossValue.clamped``).
    """
    if gamma < 0:
        raise RejectedInputError(f"gamma must be nonnegative, got {gamma}")
    preds, truths = _check_label_batch(preds, truths)
    n = preds.shape[0]
    # only entries with truth weight enter the loss; zeros elsewhere are harmless
    used = truths != 0
    pc, below, clamped = _floor(np.where(used, preds, 1.0), floor)
    ell = -np.sum(np.where(used, truths * np.log(pc), 0.0), axis=1)
    f, fprime = _focal_scale(ell, gamma)
    grad = (fprime / n)[:, None] * np.where(below | ~used, 0.0, -truths / pc)
    return LossValue(float(np.mean(f)), {"preds": grad}, clamped)


def _ce_logit_terms(logits, truths):
    logp = group_log_softmax(logits)
    ell = -np.sum(truths * logp, axis=1)
    p = np.exp(logp)
    tsum = _groups(truths).sum(axis=-1, keepdims=True)
    dell = (_groups(p) * tsum - _groups(truths)).reshape(logits.shape)
    return ell, dell


def focal_loss_logits(logits, truths, gamma=DEFAULT_GAMMA):
    """Focal loss taking raw logits; predictions are their group softmax.

    Gradients under ``'logits'``. No probability floor is needed since
    logs are computed as log-softmax.
    """
    if gamma < 0:
        raise RejectedInputError(f"gamma must be nonnegative, got {gamma}")
    logits, truths = _check_label_batch(logits, truths)
    n = logits.shape[0]
    ell, dell = _ce_logit_terms(logits, truths)
    f, fprime = _focal_scale(ell, gamma)
    grad = (fprime / n)[:, None] * dell
    return LossValue(float(np.mean(f)), {"logits": grad})


def cross_entropy_logits(logits, truths):
    """Mean grouped cross-entropy; same arithmetic as gamma-0 focal loss."""
    logits, truths = _check_label_batch(logits, truths)
    n = logits.shape[0]
    ell, dell = _ce_logit_terms(logits, truths)
    grad = (np.ones_like(ell) / n)[:, None] * dell
    return LossValue(float(np.mean(ell)), {"logits": grad})


# -- report generation -----------------------------------------------------------

def _check_targets(targets, vocab, steps):
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.size < 1:
        raise RejectedInputError("target sequence must be 1-D with length >= 1")
    if targets.size > steps:
        raise RejectedInputError(f"{targets.size} targets but only {steps} distributions")
    if np.any(targets < 0) or np.any(targets >= vocab):
        bad = targets[(targets < 0) | (targets >= vocab)][0]
        raise RejectedInputError(f"target token {bad} outside vocabulary of size {vocab}")
    return targets.astype(np.int64)


def report_nll(probs, targets, floor=PROB_FLOOR):
    """``-sum_t log probs[t, targets[t]]``.

    ``probs`` may have more rows than ``targets``; the extra rows are
    padding and are ignored.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise RejectedInputError("probs must be (steps, vocab)")
    targets = _check_targets(targets, probs.shape[1], probs.shape[0])
    T = targets.size
    picked = probs[np.arange(T), targets]
    pc, below, clamped = _floor(picked, floor)
    grad = np.zeros_like(probs)
    grad[np.arange(T), targets] = np.where(below, 0.0, -1.0 / pc)
    return LossValue(float(-np.sum(np.log(pc))), {"probs": grad}, clamped)


def report_nll_logits(logits, targets):
    """Report NLL from unnormalised step logits; gradients under ``'logits'``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise RejectedInputError("logits must be (steps, vocab)")
    targets = _check_targets(targets, logits.shape[1], logits.shape[0])
    T = targets.size
    z = logits[:T]
    m = z.max(axis=1, keepdims=True)
    logp = z - m - np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))
    grad = np.zeros_like(logits)
    grad[:T] = np.exp(logp)
    grad[np.arange(T), targets] -= 1.0
    return LossValue(float(-np.sum(logp[np.arange(T), targets])), {"logits": grad})


def total_loss(l_rg, d_ot, lam=DEFAULT_LAMBDA):
    """Combined objective ``l_rg + lam * d_ot``."""
    if lam < 0:
        raise RejectedInputError(f"lambda must be nonnegative, got {lam}")
    return l_rg + lam * d_ot
