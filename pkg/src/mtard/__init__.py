"""Multi-teacher adversarial robustness distillation at desk scale.

A student network learns clean behaviour from a naturally trained teacher
and robust behaviour from an adversarially trained teacher. Teacher
temperatures are balanced by prediction entropy and the two loss weights by
relative loss decrease.
"""

from .attacks import AttackConfig, cw_margin_pgd, fgsm, pgd
from .data import Dataset, gen_blobs, gen_two_moons, load_cifar_binary, load_idx
from .entropy_balance import TemperatureState, batch_mean_entropy, update_temperatures
from .estimators import AdversarialTrainingClassifier, MTARDClassifier
from .loss_balance import LossBalanceState, NormalizationLossBalance
from .losses import DistillLossParts, kd_loss, mtard_total
from .metrics import MetricRecord, accuracy, robust_accuracy, select_best_checkpoint, w_robust
from .nets import NetworkParams, NetworkSpec, init_params, load_checkpoint, mlp_spec, save_checkpoint
from .trainer import TrainConfig, distill_mtard, sgd_step, train_natural, train_sat

__version__ = "0.1.0"
