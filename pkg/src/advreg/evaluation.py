"""Accuracy, question-only probing, prior divergence, lambda sweeps and ensembles."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tag
from .harness import Adam, TrainConfig, epoch_order, train
from .models import ADVERSARY_HIDDEN, ModelBundle, ModelDims, predict
from .objective import RegularizerConfig
from .synthcp import WorldSpec, generate_split

KL_SMOOTHING = 1e-6
SWEEP_COLUMNS = [
    "lambda_q",
    "lambda_h",
    "seed",
    "test_accuracy",
    "probe_train_accuracy",
    "probe_test_accuracy",
    "error",
]


@dataclass
class MetricsReport:
    overall_accuracy: float
    per_type_accuracy: list[float]
    type_counts: list[int]
    predicted_marginals: list[list[float]]
    tv_vs_train_prior: list[float] | None = None
    tv_vs_test_prior: list[float] | None = None
    kl_vs_train_prior: list[float] | None = None
    kl_vs_test_prior: list[float] | None = None
    mean_h_vqa: float = math.nan
    mean_h_qonly: float = math.nan
    probe_train_accuracy: float | None = None
    probe_test_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def mean_tv_vs_train_prior(self) -> float:
        return float(np.nanmean(self.tv_vs_train_prior))


def _entropy_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(np.exp(lp) * lp).sum(axis=1)


def accuracy_by_type(pred, labels, types, num_types):
    pred, labels, types = map(np.asarray, (pred, labels, types))
    hit = pred == labels
    counts = np.bincount(types, minlength=num_types)
    per_type = np.full(num_types, np.nan)
    for t in range(num_types):
        if counts[t]:
            per_type[t] = hit[types == t].mean()
    return float(hit.mean()), per_type, counts


def predicted_marginals(pred, types, num_types, num_answers) -> np.ndarray:
    """Row ``t``: empirical distribution of predicted answers on type-``t`` questions."""
    out = np.full((num_types, num_answers), np.nan)
    for t in range(num_types):
        sel = pred[types == t]
        if len(sel):
            out[t] = np.bincount(sel, minlength=num_answers) / len(sel)
    return out


def _embed_prior(prior: np.ndarray, num_answers: int) -> np.ndarray:
    """Place a T×m per-type prior into T×|A| answer space (disjoint answer blocks)."""
    t, m = prior.shape
    out = np.zeros((t, num_answers))
    for row in range(t):
        out[row, row * m : (row + 1) * m] = prior[row]
    return out


def tv_distance(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def kl_to_smoothed(reference, predicted, eps=KL_SMOOTHING) -> np.ndarray:
    """KL(reference || predicted), with ``predicted`` smoothed additively by ``eps``."""
    reference = np.asarray(reference, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    k = predicted.shape[-1]
    smoothed = (predicted + eps) / (1.0 + k * eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(reference > 0, reference * np.log(reference / smoothed), 0.0)
    return terms.sum(axis=-1)


def distribution_divergence(pred, types, prior, num_answers):
    """Per-type TV and KL between predicted answer marginals and a T×m prior table."""
    prior = np.asarray(prior, dtype=np.float64)
    if (prior < 0).any() or not np.allclose(prior.sum(axis=1), 1.0, atol=1e-9):
        raise ad.ConfigError("reference prior rows must be probability distributions")
    marg = predicted_marginals(np.asarray(pred), np.asarray(types), prior.shape[0], num_answers)
    ref = _embed_prior(prior, num_answers)
    return tv_distance(marg, ref), kl_to_smoothed(ref, marg)


def evaluate(bundle: ModelBundle, dataset, spec: WorldSpec | None = None) -> MetricsReport:
    """Exact-match accuracy and answer-distribution statistics; probe fields stay empty."""
    if len(dataset.answers) == 0:
        raise ad.ContractError("cannot evaluate on an empty dataset")
    _, logits, qlogits = predict(bundle, dataset.tokens, dataset.features)
    pred = np.argmax(logits, axis=1)
    num_types = spec.num_types if spec else int(dataset.types.max()) + 1
    overall, per_type, counts = accuracy_by_type(pred, dataset.answers, dataset.types, num_types)
    marg = predicted_marginals(pred, dataset.types, num_types, bundle.dims.num_answers)
    report = MetricsReport(
        overall_accuracy=overall,
        per_type_accuracy=per_type.tolist(),
        type_counts=counts.tolist(),
        predicted_marginals=marg.tolist(),
        mean_h_vqa=float(_entropy_rows(logits).mean()),
        mean_h_qonly=float(_entropy_rows(qlogits).mean()),
    )
    if spec is not None:
        for split in ("train", "test"):
            tv, kl = distribution_divergence(pred, dataset.types, spec.prior(split), spec.num_answers)
            setattr(report, f"tv_vs_{split}_prior", tv.tolist())
            setattr(report, f"kl_vs_{split}_prior", kl.tolist())
    return report


# ---------------------------------------------------------------- probe


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 30
    learning_rate: float = 0.001
    batch_size: int = 150
    hidden: int = ADVERSARY_HIDDEN
    seed: int = 0


def _probe_logits(p, x):
    return ad.relu(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def train_probe(features: np.ndarray, labels: np.ndarray, num_answers: int, config: ProbeConfig):
    """Fit a fresh 2-layer classifier to fixed features; returns its parameter dict."""
    rng = np.random.default_rng([config.seed, 7])
    d, h = features.shape[1], config.hidden
    params = {
        "W1": rng.uniform(-1, 1, (d, h)) * np.sqrt(6.0 / (d + h)),
        "b1": np.zeros((1, h)),
        "W2": rng.uniform(-1, 1, (h, num_answers)) * np.sqrt(6.0 / (h + num_answers)),
        "b2": np.zeros((1, num_answers)),
    }
    opt = Adam(config.learning_rate)
    n = len(labels)
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, epoch, n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            g = ad.Graph()
            p = {k: g.leaf(v, Tag.FQ_PARAMS, k) for k, v in params.items()}
            loss = ad.cross_entropy(ad.log_softmax(_probe_logits(p, g.constant(features[idx]))), labels[idx])
            grads = ad.backward(loss, {Tag.FQ_PARAMS})
            opt.step(params, {k: grads[k] for k in params})
    return params


def probe_predict(params, features) -> np.ndarray:
    g = ad.Graph()
    p = {k: g.constant(v) for k, v in params.items()}
    return np.argmax(_probe_logits(p, g.constant(features)).value, axis=1)


def qonly_probe(bundle: ModelBundle, train_data, eval_data, config: ProbeConfig = ProbeConfig()):
    """Train a fresh question-only classifier on frozen encodings.

    Returns ``{"train": acc, <split>: acc, ...}`` where ``eval_data`` maps names to
    datasets. The bundle is checked to be bit-for-bit unchanged afterwards.
    """
    before = bundle.digest()
    q_train, _, _ = predict(bundle, train_data.tokens, train_data.features)
    params = train_probe(q_train, train_data.answers, bundle.dims.num_answers, config)
    out = {"train": float((probe_predict(params, q_train) == train_data.answers).mean())}
    for name, ds in eval_data.items():
        q, _, _ = predict(bundle, ds.tokens, ds.features)
        out[name] = float((probe_predict(params, q) == ds.answers).mean())
    if bundle.digest() != before:
        raise ad.ContractError("question-only probe modified the bundle")
    return out


# ---------------------------------------------------------------- ensembles


def ensembles(preds_a, preds_b, labels) -> tuple[float, float]:
    """Oracle accuracy (either member right) and accuracy of the averaged distribution."""
    a = np.asarray(preds_a, dtype=np.float64)
    b = np.asarray(preds_b, dtype=np.float64)
    labels = np.asarray(labels)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != len(labels):
        raise ad.ContractError(
            f"ensemble members {a.shape} and {b.shape} must match labels of length {len(labels)}"
        )
    hit_a = np.argmax(a, axis=1) == labels
    hit_b = np.argmax(b, axis=1) == labels
    oracle = float((hit_a | hit_b).mean())
    mean_ens = float((np.argmax((a + b) / 2.0, axis=1) == labels).mean())
    return oracle, mean_ens


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class Experiment:
    """One benchmark protocol: world, data sizes, training and probe settings."""

    spec: WorldSpec
    n_train: int
    n_test: int
    train_config: TrainConfig = field(default_factory=TrainConfig)
    probe_config: ProbeConfig = field(default_factory=ProbeConfig)

    def data(self, seed: int):
        return (
            generate_split(self.spec, "train", self.n_train, seed),
            generate_split(self.spec, "test", self.n_test, seed),
        )

    def dims(self) -> ModelDims:
        return ModelDims(self.spec.vocab_size, self.spec.num_answers, self.spec.feature_dim)


@dataclass
class RunResult:
    regularizer: RegularizerConfig
    seed: int
    bundle: ModelBundle
    trace: object
    report: MetricsReport


def run_once(exp: Experiment, regularizer: RegularizerConfig, seed: int, probe: bool = True) -> RunResult:
    """Generate data, train from scratch, evaluate on test and optionally probe."""
    train_ds, test_ds = exp.data(seed)
    config = replace(exp.train_config, regularizer=regularizer, seed=seed)
    bundle = ModelBundle.init(exp.dims(), seed)
    bundle, trace = train(bundle, train_ds, config)
    report = evaluate(bundle, test_ds, exp.spec)
    if probe:
        acc = qonly_probe(bundle, train_ds, {"test": test_ds}, replace(exp.probe_config, seed=seed))
        report.probe_train_accuracy = acc["train"]
        report.probe_test_accuracy = acc["test"]
    return RunResult(regularizer, seed, bundle, trace, report)


def _sweep_row(args) -> dict:
    exp, lq, lh, seed, probe = args
    row = dict.fromkeys(SWEEP_COLUMNS, "")
    row.update(lambda_q=lq, lambda_h=lh, seed=seed)
    try:
        rep = run_once(exp, RegularizerConfig(lq, lh), seed, probe).report
        row["test_accuracy"] = rep.overall_accuracy
        if probe:
            row["probe_train_accuracy"] = rep.probe_train_accuracy
            row["probe_test_accuracy"] = rep.probe_test_accuracy
    except Exception as exc:  # one failed grid point must not stop the sweep
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def lambda_sweep(exp: Experiment, grid, seeds, probe: bool = True, jobs: int = 1) -> list[dict]:
    """One train+evaluate per ``(lambda_q, lambda_h)`` grid point and seed, in grid order."""
    grid = [(float(lq), float(lh)) for lq, lh in grid]
    if not grid:
        raise ad.ConfigError("lambda grid is empty")
    tasks = [(exp, lq, lh, int(s), probe) for lq, lh in grid for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_row, tasks))
    return [_sweep_row(t) for t in tasks]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
