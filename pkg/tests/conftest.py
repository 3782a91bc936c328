"""Shared, cached training runs (several test modules reuse them)."""
from __future__ import annotations

import numpy as np
import pytest

from dp3.env import Reach3DConfig, rollout_expert
from dp3.policy import PolicyConfig, TrainConfig, train_policy

OVERFIT_TARGET = (0.85, 0.35, 0.75)
OVERFIT_STEPS = 5000


@pytest.fixture(scope="session")
def overfit_demo():
    return [rollout_expert(Reach3DConfig(), OVERFIT_TARGET, seed=0)]


@pytest.fixture(scope="session")
def overfit_run(overfit_demo):
    """One demo, 5000 Adam steps (one batch per epoch), no early stop."""
    cfg = TrainConfig(epochs=OVERFIT_STEPS, early_stop_patience=None, save_every=0)
    return train_policy(overfit_demo, PolicyConfig(), cfg)


@pytest.fixture(scope="session")
def overfit_to_target(overfit_demo):
    """Same task, stopped once the 50-epoch mean loss is below 1e-3."""
    cfg = TrainConfig(epochs=OVERFIT_STEPS, early_stop_patience=None, save_every=0, target_loss=1e-3)
    return train_policy(overfit_demo, PolicyConfig(), cfg)


def window_means(losses, w=50):
    n = len(losses) // w
    return np.asarray(losses[: n * w]).reshape(n, w).mean(axis=1)


ACCEPTANCE: list[str] = []


def report(line: str) -> None:
    """Record a one-line acceptance verdict, echoed in the terminal summary."""
    print(line)
    ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
