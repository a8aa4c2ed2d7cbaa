"""Relative-loss weight balancing between the clean and adversarial terms."""

from dataclasses import asdict, dataclass, replace

import numpy as np

from .exceptions import ConfigError, DomainError

LOSS_FLOOR = 1e-8


@dataclass(frozen=True)
class LossBalanceState:
    l_nat_0: float
    l_adv_0: float
    w_nat: float = 0.5
    w_adv: float = 0.5
    beta: float = 1.0
    r_w: float = 0.025

    def to_dict(self):
        return asdict(self)


class NormalizationLossBalance:
    """Holds the balance state for one run.

    ``record_initial`` may be called once; later batches go through
    :meth:`step`, which returns the weights for the current update.
    """

    def __init__(self, beta=1.0, r_w=0.025, state=None):
        if beta < 0:
            raise DomainError("beta must be >= 0")
        if not 0 <= r_w <= 1:
            raise DomainError("r_w must lie in [0, 1]")
        self.beta = beta
        self.r_w = r_w
        self.state = state

    def record_initial(self, l_nat, l_adv):
        if self.state is not None:
            raise ConfigError("initial losses already recorded for this run")
        self.state = record_initial(l_nat, l_adv, beta=self.beta, r_w=self.r_w)
        return self.state

    def step(self, l_nat, l_adv):
        rel = relative_losses(self.state, l_nat, l_adv)
        r = relative_weights(*rel, self.state.beta)
        self.state = update_weights(self.state, *r)
        return self.state.w_nat, self.state.w_adv


def record_initial(l_nat, l_adv, beta=1.0, r_w=0.025):
    """Initial state with denominators ``(l_nat, l_adv)`` and weights 0.5/0.5."""
    for name, v in (("l_nat", l_nat), ("l_adv", l_adv)):
        if not np.isfinite(v) or v <= LOSS_FLOOR:
            raise ConfigError(
                f"initial {name}={v} is not above {LOSS_FLOOR}; teacher and student already agree", field=name)
    return LossBalanceState(float(l_nat), float(l_adv), 0.5, 0.5, float(beta), float(r_w))


def relative_losses(state, l_nat, l_adv):
    return l_nat / state.l_nat_0, l_adv / state.l_adv_0


def relative_weights(l_rel_nat, l_rel_adv, beta):
    """Normalized ``beta`` powers of the relative losses; sums to exactly 1.

    Both losses zero gives (0.5, 0.5).
    """
    if l_rel_nat < 0 or l_rel_adv < 0:
        raise DomainError("relative losses must be >= 0")
    a = l_rel_nat ** beta
    b = l_rel_adv ** beta
    if a + b == 0:
        return 0.5, 0.5
    r_nat = a / (a + b)
    return r_nat, 1.0 - r_nat


def update_weights(state, r_nat, r_adv):
    """Exponential smoothing of the weights towards ``(r_nat, r_adv)``."""
    r_w = state.r_w
    w_nat = r_w * r_nat + (1 - r_w) * state.w_nat
    w_adv = r_w * r_adv + (1 - r_w) * state.w_adv
    return replace(state, w_nat=w_nat, w_adv=w_adv)
