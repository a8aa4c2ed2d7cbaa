"""Teacher pretraining (natural, SAT) and two-teacher distillation loops.

Randomness is derived from ``(seed, epoch, batch)`` streams rather than a
single running generator, so a run resumed at an epoch boundary replays
exactly what an uninterrupted run would have done.
"""

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import nets
from .attacks import AttackConfig, pgd, training_attack
from .entropy_balance import TemperatureState, batch_mean_entropy, update_temperatures
from .exceptions import ConfigError, InvalidInputError, NumericError, TrainingDivergedError
from .loss_balance import LOSS_FLOOR, LossBalanceState, NormalizationLossBalance, relative_losses
from .losses import DistillLossParts, kd_loss, kd_loss_grad, mtard_total
from .metrics import MetricRecord, evaluate
from .numeric import cross_entropy, cross_entropy_grad

log = logging.getLogger(__name__)

MODES = ("natural", "sat", "mtard", "mtard-no-ebb", "mtard-no-nlb", "baseline-fixed")
DISTILL_MODES = MODES[2:]
RUN_STATE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mtard"
    epochs: int = 60
    batch_size: int = 128
    seed: int = 0
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_decay_epochs: tuple = (40, 50)
    lr_decay_factor: float = 0.1
    attack: AttackConfig = field(default_factory=training_attack)
    tau_nat: float = 1.0
    tau_adv: float = 1.0
    tau_s: float = 1.0
    tau_min: float = 1.0
    tau_max: float = 10.0
    r_tau: float = 0.001
    beta: float = 1.0
    r_w: float = 0.025
    alpha: float = 0.5
    tau_squared: bool = False
    dtype: str = "float64"
    # per-epoch evaluation (distillation only)
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig(8 / 255, 2 / 255, 20, 0.001))
    eval_name: str = "pgd_sat"
    pi_nat: float = 0.5
    pi_adv: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}", field="mode")
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 0:
            raise ConfigError("must be >= 0", field="epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", field="batch_size")
        for name in ("lr", "r_tau", "r_w", "lr_decay_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", field=name)
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be >= 0", field="momentum")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 0 for e in d):
            raise ConfigError(f"decay epochs {d} must be strictly increasing and < epochs={self.epochs}",
                              field="lr_decay_epochs")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("must lie in [0, 1]", field="alpha")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("must be float64 or float32", field="dtype")

    @property
    def uses_nlb(self):
        return self.mode in ("mtard", "mtard-no-ebb")

    @property
    def uses_ebb(self):
        return self.mode in ("mtard", "mtard-no-nlb")

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("attack", "eval_attack"):
            if isinstance(d.get(key), dict):
                d[key] = AttackConfig(**d[key])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def learning_rate(cfg, epoch):
    """Step schedule: multiply by ``lr_decay_factor`` at each decay epoch."""
    n = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay_factor ** n


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Heavy-ball SGD with coupled L2 decay.

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr * v``.
    Returns ``(new_params, new_velocity)``; inputs are not modified.
    """
    ps = params.arrays()
    gs = grads.arrays()
    if [p.shape for p in ps] != [g.shape for g in gs]:
        raise InvalidInputError("gradient shapes do not match parameter shapes")
    vs = [np.zeros_like(p) for p in ps] if velocity is None else velocity
    new_v = [momentum * v + (g + weight_decay * p) for p, g, v in zip(ps, gs, vs)]
    new_p = [(p - lr * v).astype(p.dtype, copy=False) for p, v in zip(ps, new_v)]
    return params.with_arrays(new_p), new_v


def batch_indices(n, batch_size, seed, epoch):
    """Shuffled index batches for one epoch; the last partial batch is kept."""
    perm = np.random.default_rng([seed, epoch, 0]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _attack_rng(seed, epoch, b):
    return np.random.default_rng([seed, epoch, b, 1])


def _dtype(cfg):
    return np.float32 if cfg.dtype == "float32" else np.float64


def _check_finite(values, where):
    if not all(np.isfinite(v) for v in values):
        raise TrainingDivergedError(f"non-finite loss {values} at {where}")


def _check_params(params, where):
    if not all(np.all(np.isfinite(a)) for a in params.arrays()):
        raise TrainingDivergedError(f"parameters became non-finite at {where}; lower the learning rate")


@contextmanager
def _divergence_guard(where):
    # inputs are validated up front, so a kernel rejecting values mid-run means overflow
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except (InvalidInputError, NumericError) as e:
        raise TrainingDivergedError(f"training diverged at {where}: {e}") from e


def _train_ce(spec, dataset, cfg, adversarial, init=None, losses=None, role="student"):
    dtype = _dtype(cfg)
    params = (init if init is not None else nets.init_params(spec, cfg.seed, role=role)).astype(dtype)
    X = np.asarray(dataset.features, dtype=dtype)
    y = np.asarray(dataset.labels)
    velocity = None
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        total = 0.0
        for b, idx in enumerate(batch_indices(len(y), cfg.batch_size, cfg.seed, epoch)):
            with _divergence_guard(f"epoch {epoch} batch {b}"):
                xb, yb = X[idx], y[idx]
                if adversarial:
                    xb = pgd(params, xb, yb, cfg.attack, _attack_rng(cfg.seed, epoch, b))
                logits, cache = nets.forward(params, xb, return_cache=True)
                loss = float(np.mean(cross_entropy(logits, yb)))
                _check_finite([loss], f"epoch {epoch} batch {b}")
                grads, _ = nets.backward(params, xb, cross_entropy_grad(logits, yb) / len(yb), cache=cache)
                params, velocity = sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, velocity)
                _check_params(params, f"epoch {epoch} batch {b}")
                total += loss * len(yb)
        if losses is not None:
            losses.append(total / len(y))
        log.debug("epoch %d ce %.5f", epoch, total / len(y))
    return params


def train_natural(spec, dataset, cfg, init=None, losses=None):
    """Mean cross-entropy training on clean inputs (clean-teacher role)."""
    return _train_ce(spec, dataset, cfg, False, init, losses, role="clean-teacher")


def train_sat(spec, dataset, cfg, init=None, losses=None):
    """Adversarial training: every batch is replaced by its PGD version
    (against the current model) before the cross-entropy step."""
    return _train_ce(spec, dataset, cfg, True, init, losses, role="robust-teacher")


@dataclass
class RunState:
    """Everything needed to continue a distillation run at an epoch boundary."""

    epoch: int
    t: int
    temperatures: TemperatureState
    balance: LossBalanceState = None
    history: list = field(default_factory=list)
    params: nets.NetworkParams = None
    velocity: list = None
    best_params: nets.NetworkParams = None
    best_epoch: int = None

    def to_json(self):
        def arrays(p):
            return None if p is None else [a.tolist() for a in p.arrays()]
        return json.dumps({
            "version": RUN_STATE_VERSION,
            "epoch": self.epoch,
            "t": self.t,
            "temperatures": self.temperatures.to_dict(),
            "balance": None if self.balance is None else self.balance.to_dict(),
            "history": [asdict(r) for r in self.history],
            "velocity": None if self.velocity is None else [v.tolist() for v in self.velocity],
            "best_params": arrays(self.best_params),
            "best_epoch": self.best_epoch,
        })

    @classmethod
    def from_json(cls, text, params):
        """Rebuild from :meth:`to_json` output plus the saved student params."""
        d = json.loads(text)
        if d.get("version") != RUN_STATE_VERSION:
            raise ConfigError(f"unsupported run-state version {d.get('version')}")
        dtype = params.dtype
        best = None
        if d["best_params"] is not None:
            best = params.with_arrays([np.array(a, dtype=dtype) for a in d["best_params"]])
        return cls(
            epoch=d["epoch"], t=d["t"],
            temperatures=TemperatureState(**d["temperatures"]),
            balance=None if d["balance"] is None else LossBalanceState(**d["balance"]),
            history=[MetricRecord(**r) for r in d["history"]],
            params=params,
            velocity=None if d["velocity"] is None else [np.array(v, dtype=dtype) for v in d["velocity"]],
            best_params=best, best_epoch=d["best_epoch"])


@dataclass
class DistillResult:
    params: nets.NetworkParams
    best_params: nets.NetworkParams
    best_epoch: int
    history: list
    state: RunState


def distill_mtard(student_spec, clean_teacher, robust_teacher, dataset, cfg, eval_dataset=None,
                  trace=None, resume=None, until_epoch=None, on_epoch=None, init=None):
    """Train a student from a frozen clean teacher and a frozen robust teacher.

    Per batch: PGD on the student with hard labels; clean and adversarial
    distillation losses; initial-loss record on the very first batch; loss
    weight update; SGD step on the weighted sum; temperature update.
    Ablation modes disable the weight and/or temperature controllers.

    ``trace`` (a list) receives ``(event, epoch, t)`` tuples. ``resume``
    continues a :class:`RunState`; ``until_epoch`` stops early at that epoch
    boundary. ``on_epoch(record, state)`` is called after every epoch.
    Evaluation uses ``eval_dataset`` (default: the training set).
    """
    if cfg.mode not in DISTILL_MODES:
        raise ConfigError(f"mode {cfg.mode!r} is not a distillation mode", field="mode")
    for name, teacher in (("clean", clean_teacher), ("robust", robust_teacher)):
        if teacher.spec.n_classes != student_spec.n_classes:
            raise InvalidInputError(
                f"{name} teacher has {teacher.spec.n_classes} classes, student has {student_spec.n_classes}")
        if teacher.spec.n_features != student_spec.n_features:
            raise InvalidInputError(f"{name} teacher input shape does not match the student")
    dtype = _dtype(cfg)
    emit = trace.append if trace is not None else (lambda ev: None)
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    X = np.asarray(dataset.features, dtype=dtype)
    y = np.asarray(dataset.labels)
    t_clean = clean_teacher.astype(dtype)
    t_robust = robust_teacher.astype(dtype)

    if resume is None:
        student = (init if init is not None else nets.init_params(student_spec, cfg.seed)).astype(dtype)
        state = RunState(0, 0, TemperatureState(cfg.tau_nat, cfg.tau_adv, cfg.r_tau,
                                                cfg.tau_min, cfg.tau_max, cfg.tau_s),
                         params=student)
    else:
        state = resume
    balancer = NormalizationLossBalance(cfg.beta, cfg.r_w, state=state.balance)
    fixed_w = (1.0 - cfg.alpha, cfg.alpha)
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)

    for epoch in range(state.epoch, stop):
        lr = learning_rate(cfg, epoch)
        sums = np.zeros(7)
        n_seen = 0
        for b, idx in enumerate(batch_indices(len(y), cfg.batch_size, cfg.seed, epoch)):
            with _divergence_guard(f"epoch {epoch} batch {b}"):
                student = state.params
                temps = state.temperatures
                x_nat, yb = X[idx], y[idx]
                x_adv = pgd(student, x_nat, yb, cfg.attack, _attack_rng(cfg.seed, epoch, b))
                emit(("attack", epoch, state.t))

                tz_nat = nets.forward(t_clean, x_nat)
                tz_adv = nets.forward(t_robust, x_adv)
                z_nat, c_nat = nets.forward(student, x_nat, return_cache=True)
                z_adv, c_adv = nets.forward(student, x_adv, return_cache=True)
                l_nat = kd_loss(z_nat, tz_nat, temps.tau_s, temps.tau_nat, cfg.tau_squared)
                l_adv = kd_loss(z_adv, tz_adv, temps.tau_s, temps.tau_adv, cfg.tau_squared)
                _check_finite([l_nat, l_adv], f"epoch {epoch} batch {b}")
                emit(("losses", epoch, state.t))

                if balancer.state is None and (cfg.uses_nlb or min(l_nat, l_adv) > LOSS_FLOOR):
                    balancer.record_initial(l_nat, l_adv)
                    emit(("record_initial", epoch, state.t))
                if cfg.uses_nlb:
                    w_nat, w_adv = balancer.step(l_nat, l_adv)
                    emit(("update_weights", epoch, state.t))
                else:
                    w_nat, w_adv = fixed_w
                state.balance = balancer.state

                parts = DistillLossParts(l_nat, l_adv)
                total = mtard_total(parts, w_nat, w_adv)
                g_nat, _ = nets.backward(student, x_nat, w_nat * kd_loss_grad(
                    z_nat, tz_nat, temps.tau_s, temps.tau_nat, cfg.tau_squared), cache=c_nat)
                g_adv, _ = nets.backward(student, x_adv, w_adv * kd_loss_grad(
                    z_adv, tz_adv, temps.tau_s, temps.tau_adv, cfg.tau_squared), cache=c_adv)
                grads = g_nat.with_arrays([a + c for a, c in zip(g_nat.arrays(), g_adv.arrays())])
                state.params, state.velocity = sgd_step(student, grads, lr, cfg.momentum,
                                                        cfg.weight_decay, state.velocity)
                _check_params(state.params, f"epoch {epoch} batch {b}")
                emit(("step", epoch, state.t))

                h_nat = batch_mean_entropy(tz_nat, temps.tau_nat)
                h_adv = batch_mean_entropy(tz_adv, temps.tau_adv)
                if cfg.uses_ebb:
                    state.temperatures = update_temperatures(temps, h_nat, h_adv)
                    emit(("update_temperatures", epoch, state.t))

                if balancer.state is not None:
                    rel_nat, rel_adv = relative_losses(balancer.state, l_nat, l_adv)
                else:
                    rel_nat = rel_adv = float("nan")
                n = len(idx)
                sums += n * np.array([l_nat, l_adv, total, h_nat, h_adv, rel_nat, rel_adv])
                n_seen += n
                state.t += 1

        means = sums / n_seen
        controller = {
            "l_nat": means[0], "l_adv": means[1], "l_total": means[2],
            "h_nat": means[3], "h_adv": means[4],
            "rel_nat": None if np.isnan(means[5]) else means[5],
            "rel_adv": None if np.isnan(means[6]) else means[6],
            "tau_nat": state.temperatures.tau_nat, "tau_adv": state.temperatures.tau_adv,
            "tau_s": state.temperatures.tau_s,
            "w_nat": balancer.state.w_nat if cfg.uses_nlb else fixed_w[0],
            "w_adv": balancer.state.w_adv if cfg.uses_nlb else fixed_w[1],
            "lr": lr,
        }
        controller = {k: (None if v is None else float(v)) for k, v in controller.items()}
        record = evaluate(state.params, eval_ds.features, eval_ds.labels, {cfg.eval_name: cfg.eval_attack},
                          epoch=epoch, select=cfg.eval_name, pi_nat=cfg.pi_nat, pi_adv=cfg.pi_adv,
                          seed=cfg.seed, controller=controller)
        state.history.append(record)
        if state.best_epoch is None or record.w_robust > state.history[state.best_epoch].w_robust:
            state.best_epoch = epoch
            state.best_params = state.params
        state.epoch = epoch + 1
        log.info("epoch %d clean %.4f robust %.4f w_robust %.4f tau (%.3f, %.3f) w (%.4f, %.4f)",
                 epoch, record.clean_acc, record.robust_acc[cfg.eval_name], record.w_robust,
                 controller["tau_nat"], controller["tau_adv"], controller["w_nat"], controller["w_adv"])
        if on_epoch is not None:
            on_epoch(record, state)

    best = state.best_params if state.best_params is not None else state.params
    return DistillResult(state.params, best, state.best_epoch, list(state.history), state)

