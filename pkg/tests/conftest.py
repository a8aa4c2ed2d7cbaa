import numpy as np
import pytest

from mtard import data, nets, trainer
from mtard.attacks import AttackConfig


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def moons():
    return data.gen_two_moons(400, 0.1, seed=0), data.gen_two_moons(400, 0.1, seed=1, split="test")


@pytest.fixture(scope="session")
def small_teachers(moons):
    """Natural and adversarially trained 2-16-16-2 teachers on two moons."""
    train, _ = moons
    spec = nets.mlp_spec(2, (16, 16), 2)
    atk = AttackConfig(0.1, 0.025, 5, 0.001)
    cfg = trainer.TrainConfig(mode="natural", epochs=20, batch_size=32, lr_decay_epochs=(15,), attack=atk)
    clean = trainer.train_natural(spec, train, cfg)
    robust = trainer.train_sat(spec, train, cfg.replace(mode="sat"))
    return clean, robust


# desk-scale two-moons setting shared by the trade-off, collapse and ablation checks
MOONS_EPS = 0.15
MOONS_TRAIN_ATTACK = AttackConfig(MOONS_EPS, MOONS_EPS / 4, 10, 0.001)
MOONS_EVAL_ATTACK = AttackConfig(MOONS_EPS, MOONS_EPS / 4, 20, 0.001)


def moons_config(mode, seed=0, epochs=60, **kw):
    return trainer.TrainConfig(mode=mode, epochs=epochs, batch_size=32, seed=seed,
                               lr_decay_epochs=(epochs * 2 // 3, epochs * 5 // 6),
                               attack=MOONS_TRAIN_ATTACK, eval_attack=MOONS_EVAL_ATTACK, **kw)


@pytest.fixture(scope="session")
def moons_large():
    return data.gen_two_moons(1000, 0.1, seed=0), data.gen_two_moons(2000, 0.1, seed=1, split="test")


@pytest.fixture(scope="session")
def moons_teachers(moons_large):
    train, _ = moons_large
    spec = nets.mlp_spec(2, (64, 64), 2)
    return (trainer.train_natural(spec, train, moons_config("natural")),
            trainer.train_sat(spec, train, moons_config("sat")))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
