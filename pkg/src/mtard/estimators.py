"""scikit-learn compatible wrappers around the training loops.

``AdversarialTrainingClassifier`` fits a teacher (natural or PGD-adversarial)
and ``MTARDClassifier`` distills a student from two fitted teachers. Both
follow the estimator protocol (``get_params``/``set_params``, ``fit``,
``predict``, ``predict_proba``, ``score``) so they work with ``clone``,
pipelines and model-selection utilities.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nets, trainer
from .attacks import AttackConfig
from .data import Dataset
from .metrics import robust_accuracy, w_robust
from .numeric import tempered_softmax


def check_unit_interval(X):
    """Validate a feature matrix and require every entry in ``[0, 1]``."""
    X = check_array(X, dtype=[np.float64, np.float32])
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("features must lie in [0, 1]; rescale inputs before fitting")
    return X


def _as_network(teacher, name):
    if isinstance(teacher, nets.NetworkParams):
        return teacher
    if isinstance(teacher, BaseEstimator):
        check_is_fitted(teacher, "network_")
        return teacher.network_
    raise TypeError(f"{name} must be NetworkParams or a fitted AdversarialTrainingClassifier")


class _NetworkClassifierMixin(ClassifierMixin):

    def _validate_fit(self, X, y):
        X, y = check_X_y(X, y, dtype=[np.float64, np.float32])
        check_unit_interval(X)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        return X, y_enc

    def _spec(self, hidden, n_classes):
        if self.input_shape is None:
            return nets.mlp_spec(self.n_features_in_, tuple(hidden), n_classes)
        return nets.conv_spec(self.input_shape, tuple(hidden), n_classes, self.kernel)

    def _attack(self, steps):
        return AttackConfig(self.epsilon, self.step_size, steps, self.random_start)

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_unit_interval(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return nets.predict_logits(self.network_, X)

    def predict_proba(self, X):
        return tempered_softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def robust_score(self, X, y, attack=None, seed=0):
        """Accuracy under a white-box attack (default: 20-step PGD at ``epsilon``)."""
        check_is_fitted(self, "network_")
        X = check_unit_interval(X)
        cfg = attack if attack is not None else AttackConfig(self.epsilon, self.step_size, 20, self.random_start)
        y_enc = np.searchsorted(self.classes_, y)
        return robust_accuracy(self.network_, X, y_enc, cfg, seed=seed)

    def w_robust_score(self, X, y, attack=None, seed=0):
        return w_robust(self.score(X, y), self.robust_score(X, y, attack, seed))


class AdversarialTrainingClassifier(_NetworkClassifierMixin, BaseEstimator):
    """ReLU network trained by cross-entropy on clean (``adversarial=False``)
    or PGD-perturbed inputs.

    Parameters mirror :class:`mtard.trainer.TrainConfig`; fractions such as
    ``"8/255"`` are accepted for the attack settings. ``input_shape`` switches
    to a convolutional network with ``hidden_layer_sizes`` as channel counts.
    """

    def __init__(self, hidden_layer_sizes=(64, 64), adversarial=False, epsilon=8 / 255, step_size=2 / 255,
                 attack_steps=10, random_start=0.001, epochs=60, batch_size=128, lr=0.1, momentum=0.9,
                 weight_decay=2e-4, lr_decay_epochs=(40, 50), lr_decay_factor=0.1, random_state=0,
                 dtype="float64", input_shape=None, kernel=3):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.adversarial = adversarial
        self.epsilon = epsilon
        self.step_size = step_size
        self.attack_steps = attack_steps
        self.random_start = random_start
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay_factor = lr_decay_factor
        self.random_state = random_state
        self.dtype = dtype
        self.input_shape = input_shape
        self.kernel = kernel

    def _train_config(self):
        return trainer.TrainConfig(
            mode="sat" if self.adversarial else "natural", epochs=self.epochs, batch_size=self.batch_size,
            seed=self.random_state, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            lr_decay_epochs=self.lr_decay_epochs, lr_decay_factor=self.lr_decay_factor,
            attack=self._attack(self.attack_steps), dtype=self.dtype)

    def fit(self, X, y):
        X, y_enc = self._validate_fit(X, y)
        cfg = self._train_config()
        ds = Dataset(X, y_enc, len(self.classes_))
        spec = self._spec(self.hidden_layer_sizes, len(self.classes_))
        fit = trainer.train_sat if self.adversarial else trainer.train_natural
        self.loss_curve_ = []
        self.network_ = fit(spec, ds, cfg, losses=self.loss_curve_)
        return self


class MTARDClassifier(_NetworkClassifierMixin, BaseEstimator):
    """Student distilled from a clean teacher and a robust teacher.

    Teachers are fitted :class:`AdversarialTrainingClassifier` instances or
    raw :class:`~mtard.nets.NetworkParams`; they are never modified.
    ``mode`` selects the full method or one of the ablations
    (``mtard-no-ebb``, ``mtard-no-nlb``, ``baseline-fixed``).

    After ``fit``: ``network_`` is the checkpoint with the best weighted
    robust accuracy on the evaluation data, ``final_network_`` the last one,
    ``history_`` the per-epoch :class:`~mtard.metrics.MetricRecord` list.
    """

    def __init__(self, clean_teacher=None, robust_teacher=None, hidden_layer_sizes=(32, 32), mode="mtard",
                 epsilon=8 / 255, step_size=2 / 255, attack_steps=10, random_start=0.001, eval_steps=20,
                 epochs=60, batch_size=128, lr=0.1, momentum=0.9, weight_decay=2e-4, lr_decay_epochs=(40, 50),
                 lr_decay_factor=0.1, tau_init=1.0, tau_s=1.0, tau_min=1.0, tau_max=10.0, r_tau=0.001,
                 beta=1.0, r_w=0.025, alpha=0.5, tau_squared=False, random_state=0, dtype="float64",
                 input_shape=None, kernel=3):
        self.clean_teacher = clean_teacher
        self.robust_teacher = robust_teacher
        self.hidden_layer_sizes = hidden_layer_sizes
        self.mode = mode
        self.epsilon = epsilon
        self.step_size = step_size
        self.attack_steps = attack_steps
        self.random_start = random_start
        self.eval_steps = eval_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay_factor = lr_decay_factor
        self.tau_init = tau_init
        self.tau_s = tau_s
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.r_tau = r_tau
        self.beta = beta
        self.r_w = r_w
        self.alpha = alpha
        self.tau_squared = tau_squared
        self.random_state = random_state
        self.dtype = dtype
        self.input_shape = input_shape
        self.kernel = kernel

    def _train_config(self):
        return trainer.TrainConfig(
            mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
            lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            lr_decay_epochs=self.lr_decay_epochs, lr_decay_factor=self.lr_decay_factor,
            attack=self._attack(self.attack_steps), tau_nat=self.tau_init, tau_adv=self.tau_init,
            tau_s=self.tau_s, tau_min=self.tau_min, tau_max=self.tau_max, r_tau=self.r_tau, beta=self.beta,
            r_w=self.r_w, alpha=self.alpha, tau_squared=self.tau_squared, dtype=self.dtype,
            eval_attack=self._attack(self.eval_steps))

    def fit(self, X, y, X_eval=None, y_eval=None):
        """Distill on ``(X, y)``; checkpoints are scored on ``(X_eval, y_eval)``
        when given, else on the training data."""
        if self.mode not in trainer.DISTILL_MODES:
            raise ValueError(f"mode must be one of {trainer.DISTILL_MODES}")
        clean = _as_network(self.clean_teacher, "clean_teacher")
        robust = _as_network(self.robust_teacher, "robust_teacher")
        X, y_enc = self._validate_fit(X, y)
        n_classes = len(self.classes_)
        if clean.spec.n_classes != n_classes or robust.spec.n_classes != n_classes:
            raise ValueError(f"teachers predict {clean.spec.n_classes}/{robust.spec.n_classes} classes, "
                             f"data has {n_classes}")
        ds = Dataset(X, y_enc, n_classes)
        eval_ds = None
        if X_eval is not None:
            X_eval, y_eval = check_X_y(X_eval, y_eval)
            check_unit_interval(X_eval)
            eval_ds = Dataset(X_eval, np.searchsorted(self.classes_, y_eval), n_classes, "test")
        spec = self._spec(self.hidden_layer_sizes, n_classes)
        result = trainer.distill_mtard(spec, clean, robust, ds, self._train_config(), eval_dataset=eval_ds)
        self.network_ = result.best_params
        self.final_network_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.temperatures_ = result.state.temperatures
        self.loss_balance_ = result.state.balance
        return self


__all__ = ["AdversarialTrainingClassifier", "MTARDClassifier", "check_unit_interval"]
