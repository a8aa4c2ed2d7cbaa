"""White-box L-infinity attacks: FGSM, PGD and CW-margin PGD.

All attacks read the model parameters only and return a new array; the
input batch is left untouched. Inputs are assumed to live in ``[0, 1]``.
"""

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import nets
from .exceptions import InvalidInputError
from .numeric import cross_entropy_grad

LOSS_KINDS = ("cross-entropy", "cw-margin")


def parse_fraction(value):
    """Accept floats, ints or strings such as ``"8/255"``."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start_scale: float = 0.001
    loss_kind: str = "cross-entropy"

    def __post_init__(self):
        for name in ("epsilon", "step_size", "random_start_scale"):
            v = parse_fraction(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)
        if int(self.steps) != self.steps or self.steps < 0:
            raise InvalidInputError(f"steps must be a non-negative integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidInputError(f"loss_kind must be one of {LOSS_KINDS}")

    def replace(self, **changes):
        return replace(self, **changes)


def training_attack():
    """Inner-maximization PGD: 10 steps of 2/255, random start 0.001, eps 8/255."""
    return AttackConfig()


def eval_attacks(epsilon=8 / 255):
    """Evaluation suite keyed by attack name."""
    return {
        "fgsm": AttackConfig(epsilon, epsilon, 1, 0.0),
        "pgd_sat": AttackConfig(epsilon, 2 / 255, 20, 0.001),
        "pgd_trades": AttackConfig(epsilon, 0.003, 20, 0.001),
        "cw_inf": AttackConfig(epsilon, 2 / 255, 30, 0.001, "cw-margin"),
    }


def margin_loss(logits, y):
    """Per-row ``max_{k != y} z_k - z_y``."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(y)
    rows = np.arange(len(y))
    others = z.copy()
    others[rows, y] = -np.inf
    return others.max(axis=1) - z[rows, y]


def margin_loss_grad(logits, y):
    """Gradient of the summed margin loss w.r.t. logits (ties -> lowest index)."""
    z = np.asarray(logits)
    y = np.asarray(y)
    rows = np.arange(len(y))
    others = z.astype(float, copy=True)
    others[rows, y] = -np.inf
    g = np.zeros_like(z)
    g[rows, others.argmax(axis=1)] = 1.0
    g[rows, y] -= 1.0
    return g


def input_gradient(params, x, y, loss_kind="cross-entropy"):
    """Gradient of the summed per-example loss w.r.t. the input batch."""
    logits, cache = nets.forward(params, x, return_cache=True)
    if loss_kind == "cross-entropy":
        up = cross_entropy_grad(logits, y)
    else:
        up = margin_loss_grad(logits, y)
    _, gx = nets.backward(params, x, up, cache=cache)
    return gx


def _check_batch(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) != len(y):
        raise InvalidInputError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def fgsm(params, x, y, epsilon):
    """``clip(x + eps * sign(grad_x CE), 0, 1)``."""
    x, y = _check_batch(x, y)
    epsilon = parse_fraction(epsilon)
    if epsilon == 0:
        return x.copy()
    g = input_gradient(params, x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0).astype(x.dtype, copy=False)


def _projected_ascent(params, x, y, cfg, rng):
    eps = cfg.epsilon
    if eps == 0:
        return x.copy()
    if cfg.random_start_scale > 0:
        rng = np.random.default_rng(rng)
        delta = rng.uniform(-cfg.random_start_scale, cfg.random_start_scale, size=x.shape)
    else:
        delta = np.zeros(x.shape)
    delta = np.clip(delta, -eps, eps)
    delta = np.clip(x + delta, 0.0, 1.0) - x
    for _ in range(cfg.steps):
        g = input_gradient(params, x + delta, y, cfg.loss_kind)
        delta = np.clip(delta + cfg.step_size * np.sign(g), -eps, eps)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return np.clip(x + delta, 0.0, 1.0).astype(x.dtype, copy=False)


def pgd(params, x, y, cfg, rng=None):
    """L-inf PGD on the cross-entropy loss with uniform random start.

    ``rng`` is a seed or Generator; the same seed gives the same output.
    """
    x, y = _check_batch(x, y)
    if cfg.loss_kind != "cross-entropy":
        raise InvalidInputError("pgd expects loss_kind='cross-entropy'; use cw_margin_pgd")
    return _projected_ascent(params, x, y, cfg, rng)


def cw_margin_pgd(params, x, y, cfg, rng=None):
    """PGD ascent on the margin loss ``max_{k != y} z_k - z_y``."""
    x, y = _check_batch(x, y)
    if cfg.loss_kind != "cw-margin":
        raise InvalidInputError("cw_margin_pgd expects loss_kind='cw-margin'")
    return _projected_ascent(params, x, y, cfg, rng)


def run_attack(params, x, y, cfg, rng=None):
    """Dispatch on the config: one-step zero-start CE attacks are FGSM."""
    if cfg.loss_kind == "cw-margin":
        return cw_margin_pgd(params, x, y, cfg, rng)
    if cfg.steps == 1 and cfg.random_start_scale == 0 and cfg.step_size == cfg.epsilon:
        return fgsm(params, x, y, cfg.epsilon)
    return pgd(params, x, y, cfg, rng)
