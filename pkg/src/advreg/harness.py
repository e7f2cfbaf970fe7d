"""Deterministic training loop with a single shared Adam optimizer."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import ModelBundle
from .objective import Batch, LossTerms, RegularizerConfig, routed_gradients

TRACE_COLUMNS = [
    "epoch",
    "lr",
    "l_vqa",
    "l_qa",
    "l_h",
    "h_qonly",
    "h_vqa",
    "train_accuracy",
    "wall_seconds",
]


class TrainingError(RuntimeError):
    pass


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None):
        if set(grads) != set(params):
            raise ad.ContractError(
                f"gradient keys {sorted(set(grads) ^ set(params))} do not match parameters"
            )
        if self.m and set(self.m) != set(params):
            raise ad.ContractError("optimizer state was built for a different parameter set")
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ad.ContractError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            elif self.m[k].shape != p.shape:
                raise ad.ContractError(f"optimizer state for {k} has shape {self.m[k].shape}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state: Adam, lr=None):
    """Functional wrapper: returns ``(params, state)`` after one update."""
    state.step(params, grads, lr)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    learning_rate: float = 0.001
    batch_size: int = 150
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay_per_epoch: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ad.ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ad.ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ad.ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ad.ConfigError(f"lr_decay_per_epoch must be in (0, 1], got {self.lr_decay_per_epoch}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ad.ConfigError("adam betas must be in [0, 1) and eps positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        reg = d.pop("regularizer", {})
        return cls(regularizer=RegularizerConfig(**reg), **d)


@dataclass
class TrainTrace:
    config: dict
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row[k] for k in TRACE_COLUMNS})


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _check_finite(terms: LossTerms, epoch: int, step: int):
    for name, value in terms.as_dict().items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name}={value} at epoch {epoch}, step {step}")


def train(bundle: ModelBundle, dataset, config: TrainConfig, record_time: bool = False):
    """Train ``bundle`` in place on ``dataset`` and return ``(bundle, trace)``.

    ``dataset`` needs ``tokens``, ``features`` and ``answers`` arrays. The
    trace's train accuracy is scored on each batch before its update. Wall-clock
    is only recorded when ``record_time`` is set, so traces stay reproducible.
    """
    n = len(dataset.answers)
    if n == 0:
        raise ad.ContractError("cannot train on an empty dataset")
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    trace = TrainTrace(config=config.to_dict())
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay_per_epoch**epoch
        sums = dict.fromkeys(LossTerms.__dataclass_fields__, 0.0)
        correct = 0
        order = epoch_order(config.seed, epoch, n)
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            batch = Batch(dataset.tokens[idx], dataset.features[idx], dataset.answers[idx])
            grads, lg, _ = routed_gradients(bundle, batch, config.regularizer)
            terms = lg.terms()
            _check_finite(terms, epoch, step)
            opt.step(bundle.params, grads, lr)
            for k, v in terms.as_dict().items():
                sums[k] += v * len(idx)
            correct += int((np.argmax(lg.vqa_logits.value, axis=1) == batch.answers).sum())
        row = {k: v / n for k, v in sums.items()}
        row.update(
            epoch=epoch,
            lr=lr,
            train_accuracy=correct / n,
            wall_seconds=round(time.perf_counter() - start, 3) if record_time else 0.0,
        )
        trace.rows.append(row)
    return bundle, trace

