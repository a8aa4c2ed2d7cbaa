"""Temperature-scaled distillation losses and the two-teacher composite."""

from dataclasses import dataclass

import numpy as np

from . import nets
from .exceptions import InvalidInputError
from .numeric import kl_divergence, tempered_softmax


@dataclass(frozen=True)
class DistillLossParts:
    l_nat: float
    l_adv: float

    def __post_init__(self):
        for name in ("l_nat", "l_adv"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")


def _check_pair(student_logits, teacher_logits):
    s = np.atleast_2d(np.asarray(student_logits, dtype=float))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=float))
    if s.shape != t.shape:
        raise InvalidInputError(f"student logits {s.shape} vs teacher logits {t.shape}")
    return s, t


def kd_loss(student_logits, teacher_logits, tau_s, tau_t, tau_squared=False):
    """Batch mean of KL(teacher_tau_t || student_tau_s).

    The teacher's tempered distribution is the target. ``tau_squared``
    multiplies the result by ``tau_t**2`` (classic Hinton scaling).
    """
    s, t = _check_pair(student_logits, teacher_logits)
    loss = float(np.mean(kl_divergence(tempered_softmax(t, tau_t), tempered_softmax(s, tau_s))))
    return loss * tau_t ** 2 if tau_squared else loss


def kd_loss_grad(student_logits, teacher_logits, tau_s, tau_t, tau_squared=False):
    """Gradient of :func:`kd_loss` w.r.t. the student logits.

    ``(softmax(s / tau_s) - softmax(t / tau_t)) / (tau_s * N)``; exact
    wherever the student probability floor is not active.
    """
    s, t = _check_pair(student_logits, teacher_logits)
    p_s = tempered_softmax(s, tau_s)
    p_t = tempered_softmax(t, tau_t)
    g = (p_s - p_t) / (tau_s * s.shape[0])
    if tau_squared:
        g = g * tau_t ** 2
    return g.reshape(np.shape(student_logits))


def mtard_total(parts, w_nat, w_adv):
    """``w_nat * l_nat + w_adv * l_adv``."""
    if not (np.isfinite(w_nat) and np.isfinite(w_adv)):
        raise InvalidInputError("loss weights must be finite")
    return w_nat * parts.l_nat + w_adv * parts.l_adv


def mtard_objective(student, x_nat, x_adv, t_nat_logits, t_adv_logits, *,
                    w_nat, w_adv, tau_s, tau_nat, tau_adv, tau_squared=False):
    """Composite two-teacher loss and its exact gradients.

    Teacher logits are treated as constants. Returns
    ``(total, parts, param_grads, grad_x_nat, grad_x_adv)``.
    """
    z_nat, c_nat = nets.forward(student, x_nat, return_cache=True)
    z_adv, c_adv = nets.forward(student, x_adv, return_cache=True)
    parts = DistillLossParts(kd_loss(z_nat, t_nat_logits, tau_s, tau_nat, tau_squared),
                             kd_loss(z_adv, t_adv_logits, tau_s, tau_adv, tau_squared))
    total = mtard_total(parts, w_nat, w_adv)
    g_nat = w_nat * kd_loss_grad(z_nat, t_nat_logits, tau_s, tau_nat, tau_squared)
    g_adv = w_adv * kd_loss_grad(z_adv, t_adv_logits, tau_s, tau_adv, tau_squared)
    pg_nat, gx_nat = nets.backward(student, x_nat, g_nat, cache=c_nat)
    pg_adv, gx_adv = nets.backward(student, x_adv, g_adv, cache=c_adv)
    grads = pg_nat.with_arrays([a + b for a, b in zip(pg_nat.arrays(), pg_adv.arrays())])
    return total, parts, grads, gx_nat, gx_adv
