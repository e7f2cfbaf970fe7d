"""Pinned protocol for the changing-priors benchmark runs.

Lambda values were chosen once by ``scripts/tune_lambdas.py`` on tuning seeds
disjoint from ``EVAL_SEEDS`` and are frozen here
(table in ``results/tuning_sweep.csv``).
"""

from __future__ import annotations

from .evaluation import Experiment
from .harness import TrainConfig
from .objective import RegularizerConfig
from .synthcp import default_cp_spec

WORLD_SEED = 0
N_TRAIN = 1000
N_TEST = 5000
EVAL_SEEDS = (0, 1, 2)
TUNING_SEEDS = (100, 101)

TUNING_GRID_Q = (0.01, 0.05, 0.15, 0.5)
TUNING_GRID_H = (0.01, 0.05, 0.25, 1.0)

# frozen output of scripts/tune_lambdas.py
TUNED_LAMBDA_Q = 0.15
TUNED_LAMBDA_H = 0.01

# spans 8x the tuned lambda_q
LAMBDA_Q_GRID = (0.05, 0.15, 0.4, 1.2)

BASELINE = RegularizerConfig(0.0, 0.0)
QADV = RegularizerConfig(TUNED_LAMBDA_Q, 0.0)
DOE = RegularizerConfig(0.0, TUNED_LAMBDA_H)
QADV_DOE = RegularizerConfig(TUNED_LAMBDA_Q, TUNED_LAMBDA_H)


def default_experiment(**train_overrides) -> Experiment:
    return Experiment(
        spec=default_cp_spec(WORLD_SEED),
        n_train=N_TRAIN,
        n_test=N_TEST,
        train_config=TrainConfig(**train_overrides),
    )
