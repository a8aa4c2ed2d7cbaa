"""Accuracy, robust accuracy, weighted robust accuracy, checkpoint selection."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nets
from .attacks import run_attack
from .exceptions import InvalidInputError


@dataclass
class MetricRecord:
    epoch: int
    clean_acc: float
    robust_acc: dict
    w_robust: float
    attack: str = "pgd_sat"
    pi_nat: float = 0.5
    pi_adv: float = 0.5
    controller: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def recomputed_w_robust(self):
        return w_robust(self.clean_acc, self.robust_acc[self.attack], self.pi_nat, self.pi_adv)


def predict(params, X, batch_size=1024):
    """Argmax class per row; ties go to the lowest index."""
    return np.argmax(nets.predict_logits(params, X, batch_size), axis=1)


def accuracy(params, X, y):
    y = np.asarray(y)
    if len(y) == 0:
        raise InvalidInputError("empty dataset")
    if params.spec.n_classes <= y.max():
        raise InvalidInputError("dataset labels exceed model class count")
    return float(np.mean(predict(params, X) == y))


def robust_accuracy(params, X, y, cfg, seed=0, batch_size=512):
    """White-box accuracy: each batch is attacked against ``params`` itself.

    Batch ``i`` draws its random start from the stream ``(seed, i)`` so
    results do not depend on evaluation order.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    if len(y) == 0:
        raise InvalidInputError("empty dataset")
    if cfg.epsilon == 0:
        return accuracy(params, X, y)
    correct = 0
    for i, start in enumerate(range(0, len(y), batch_size)):
        xb, yb = X[start:start + batch_size], y[start:start + batch_size]
        x_adv = run_attack(params, xb, yb, cfg, rng=np.random.default_rng([seed, i]))
        correct += int(np.sum(predict(params, x_adv) == yb))
    return correct / len(y)


def w_robust(clean_acc, robust_acc, pi_nat=0.5, pi_adv=0.5):
    """``pi_nat * clean + pi_adv * robust``; the weights must sum to 1."""
    if pi_nat < 0 or pi_adv < 0 or abs(pi_nat + pi_adv - 1) > 1e-12:
        raise InvalidInputError(f"pi weights must be >= 0 and sum to 1, got {pi_nat}, {pi_adv}")
    return pi_nat * clean_acc + pi_adv * robust_acc


def select_best_checkpoint(history):
    """Epoch with the highest ``w_robust``; earliest wins ties."""
    if not history:
        raise InvalidInputError("empty metric history")
    best = history[0]
    for rec in history[1:]:
        if rec.w_robust > best.w_robust:
            best = rec
    return best.epoch


def evaluate(params, X, y, attacks, epoch=0, select="pgd_sat", pi_nat=0.5, pi_adv=0.5,
             seed=0, controller=None):
    """Clean accuracy plus robust accuracy for every named attack config."""
    clean = accuracy(params, X, y)
    robust = {name: robust_accuracy(params, X, y, cfg, seed=seed) for name, cfg in attacks.items()}
    if select not in robust:
        raise InvalidInputError(f"selection attack {select!r} not among {sorted(robust)}")
    return MetricRecord(epoch, clean, robust, w_robust(clean, robust[select], pi_nat, pi_adv),
                        select, pi_nat, pi_adv, dict(controller or {}))


def read_jsonl(path):
    with open(path) as f:
        return [MetricRecord.from_json(line) for line in f if line.strip()]


def write_jsonl(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")
