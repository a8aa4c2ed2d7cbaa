"""Numeric kernels: tempered softmax, entropy, divergences.

All kernels act on the last axis, so a single logit vector of shape ``(C,)``
and a batch of shape ``(N, C)`` are both accepted. Logs are natural logs.
"""

import numpy as np

from .exceptions import DomainError, InvalidInputError, NumericError

PROB_FLOOR = 1e-12


def _as_logits(logits):
    z = np.asarray(logits)
    z = z.astype(np.float32 if z.dtype == np.float32 else np.float64, copy=True)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError(f"need at least 2 classes on the last axis, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain NaN or Inf")
    return z


def _check_tau(tau):
    if not np.isfinite(tau) or tau <= 0:
        raise DomainError(f"temperature must be positive and finite, got {tau}")


def uniform(n_classes):
    """The uniform distribution over ``n_classes`` outcomes."""
    if n_classes < 1:
        raise DomainError("n_classes must be >= 1")
    return np.full(n_classes, 1.0 / n_classes)


def log_softmax(logits, tau=1.0):
    z = _as_logits(logits)
    _check_tau(tau)
    s = z / tau
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def tempered_softmax(logits, tau=1.0):
    """``exp(z_k / tau) / sum_j exp(z_j / tau)`` along the last axis.

    Raises InvalidInputError for non-finite logits and DomainError for
    ``tau <= 0``.
    """
    z = _as_logits(logits)
    _check_tau(tau)
    s = z / tau
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def kl_divergence(target, approx):
    """KL(target || approx) = sum_k target_k (log target_k - log approx_k).

    ``approx`` is floored at 1e-12 before the log so one-hot approximations
    stay finite.
    """
    t = np.asarray(target, dtype=float)
    a = np.asarray(approx, dtype=float)
    if t.shape != a.shape:
        raise InvalidInputError(f"shape mismatch: {t.shape} vs {a.shape}")
    log_a = np.log(np.maximum(a, PROB_FLOOR))
    with np.errstate(divide="ignore", invalid="ignore"):
        log_t = np.log(np.where(t > 0, t, 1.0))
    terms = np.where(t > 0, t * (log_t - log_a), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` at unit temperature.

    With batched logits ``label`` is an integer array and the per-row losses
    are returned.
    """
    z = _as_logits(logits)
    C = z.shape[-1]
    y = np.asarray(label)
    if not np.issubdtype(y.dtype, np.integer):
        raise InvalidInputError("labels must be integers")
    if np.any(y < 0) or np.any(y >= C):
        raise InvalidInputError(f"label out of range [0, {C})")
    lsm = log_softmax(z)
    if z.ndim == 1:
        return float(-lsm[int(y)])
    return -np.take_along_axis(lsm, y.reshape(-1, 1), axis=-1)[:, 0]


def cross_entropy_grad(logits, label):
    """Gradient of :func:`cross_entropy` with respect to the logits."""
    z = _as_logits(logits)
    p = tempered_softmax(z)
    y = np.asarray(label)
    if z.ndim == 1:
        p[int(y)] -= 1.0
    else:
        p[np.arange(len(y)), y] -= 1.0
    return p


def entropy_temp_gradient(logits, tau):
    """Derivative of ``entropy(tempered_softmax(logits, tau))`` w.r.t. ``tau``.

    With ``q_j = exp(z_j / tau)`` and ``S = sum q_j`` the derivative is
    ``(S * sum q log^2 q - (sum q log q)^2) / (tau * S^2)``, i.e. the variance
    of ``log q`` under the tempered distribution divided by ``tau``. That
    quantity is unchanged by shifting ``log q``, so it is evaluated on
    max-shifted logs in centered form, which is never negative.
    """
    z = _as_logits(logits).astype(np.float64)
    _check_tau(tau)
    log_q = z / tau
    log_q = log_q - log_q.max(axis=-1, keepdims=True)
    q = np.exp(log_q)
    p = q / q.sum(axis=-1, keepdims=True)
    mean = (p * log_q).sum(axis=-1, keepdims=True)
    var = (p * (log_q - mean) ** 2).sum(axis=-1)
    out = var / tau
    if not np.all(np.isfinite(out)):
        raise NumericError("entropy-temperature gradient overflowed")
    return out if out.ndim else float(out)


def numerical_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g
