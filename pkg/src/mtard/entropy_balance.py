"""Entropy-based temperature balancing between the clean and robust teacher.

Each batch the mean prediction entropy of both teachers is measured and
their temperatures move one ``r_tau`` step in opposite directions, towards
equal entropy, using the sign rule (entropy slope in tau estimated as 1).
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from .exceptions import DomainError, InvalidInputError
from .numeric import entropy, tempered_softmax


@dataclass(frozen=True)
class TemperatureState:
    tau_nat: float = 1.0
    tau_adv: float = 1.0
    r_tau: float = 0.001
    tau_min: float = 1.0
    tau_max: float = 10.0
    tau_s: float = 1.0

    def __post_init__(self):
        if not (0 < self.tau_min <= self.tau_max):
            raise DomainError(f"need 0 < tau_min <= tau_max, got [{self.tau_min}, {self.tau_max}]")
        if self.r_tau <= 0:
            raise DomainError("r_tau must be positive")
        if self.tau_s <= 0:
            raise DomainError("tau_s must be positive")
        for name in ("tau_nat", "tau_adv"):
            v = getattr(self, name)
            if not self.tau_min <= v <= self.tau_max:
                raise DomainError(f"{name}={v} outside [{self.tau_min}, {self.tau_max}]")

    def to_dict(self):
        return asdict(self)


def batch_mean_entropy(teacher_logits, tau):
    """Mean over rows of the entropy of the tempered teacher prediction."""
    z = np.atleast_2d(np.asarray(teacher_logits, dtype=float))
    if z.shape[0] == 0:
        raise InvalidInputError("empty batch")
    return float(np.mean(entropy(tempered_softmax(z, tau))))


def update_temperatures(state, h_nat, h_adv):
    """One sign-rule step; the higher-entropy teacher is cooled, the other
    warmed, each clamped to ``[tau_min, tau_max]``. ``sign(0) = 0``."""
    step = state.r_tau * np.sign(h_nat - h_adv)
    tau_nat = float(np.clip(state.tau_nat - step, state.tau_min, state.tau_max))
    tau_adv = float(np.clip(state.tau_adv + step, state.tau_min, state.tau_max))
    return replace(state, tau_nat=tau_nat, tau_adv=tau_adv)
