"""Synthetic changing-priors benchmark.

Each question is a type token followed by uniformly drawn distractor tokens, so
all question-side signal about the answer lives in the per-type prior table.
The image feature is the answer's prototype with probability ``beta`` (else the
prototype of a uniformly random answer) plus isotropic Gaussian noise.

Answers are disjoint across types: answer ``t * m + j`` is the ``j``-th answer
of type ``t``. Token ids ``0..T-1`` are type tokens, the rest are distractors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ConfigError

SPLITS = ("train", "test")
DATASET_FORMAT = "advreg-dataset"
SPEC_FORMAT = "advreg-worldspec"
FEATURE_DECIMALS = 9
ORACLE_SEED = 20240917


@dataclass(frozen=True, eq=False)
class WorldSpec:
    num_types: int
    answers_per_type: int
    vocab_size: int
    question_length: int
    train_prior: np.ndarray  # T×m
    test_prior: np.ndarray  # T×m
    beta: float
    sigma: float
    prototypes: np.ndarray  # |A|×r

    def __post_init__(self):
        t, m = self.num_types, self.answers_per_type
        if t < 1 or m < 1:
            raise ConfigError("num_types and answers_per_type must be positive")
        if self.vocab_size <= t:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no distractor tokens")
        if self.question_length < 1:
            raise ConfigError("question_length must be at least 1")
        object.__setattr__(self, "train_prior", np.asarray(self.train_prior, dtype=np.float64))
        object.__setattr__(self, "test_prior", np.asarray(self.test_prior, dtype=np.float64))
        object.__setattr__(self, "prototypes", np.asarray(self.prototypes, dtype=np.float64))
        for name in ("train_prior", "test_prior"):
            table = getattr(self, name)
            if table.shape != (t, m):
                raise ConfigError(f"{name} must be {t}×{m}, got {table.shape}")
            if (table < 0).any() or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9, rtol=0):
                raise ConfigError(f"{name} rows must be probability distributions")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if not self.sigma >= 0.0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] != t * m:
            raise ConfigError(f"prototypes must have {t * m} rows, got {self.prototypes.shape}")
        diffs = self.prototypes[:, None, :] - self.prototypes[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1)) + np.eye(t * m)
        if (dist == 0).any():
            raise ConfigError("answer prototypes must be pairwise distinct")

    @property
    def num_answers(self) -> int:
        return self.num_types * self.answers_per_type

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def prior(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.train_prior if split == "train" else self.test_prior

    def to_dict(self) -> dict:
        return {
            "format": SPEC_FORMAT,
            "num_types": self.num_types,
            "answers_per_type": self.answers_per_type,
            "vocab_size": self.vocab_size,
            "question_length": self.question_length,
            "train_prior": self.train_prior.tolist(),
            "test_prior": self.test_prior.tolist(),
            "beta": self.beta,
            "sigma": self.sigma,
            "prototypes": self.prototypes.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        fields = [
            "num_types", "answers_per_type", "vocab_size", "question_length",
            "train_prior", "test_prior", "beta", "sigma", "prototypes",
        ]  # fmt: skip
        if d.get("format", SPEC_FORMAT) != SPEC_FORMAT:
            raise ConfigError(f"not a world spec: format={d.get('format')!r}")
        missing = [f for f in fields if f not in d]
        if missing:
            raise ConfigError(f"world spec is missing field {missing[0]!r}")
        return cls(**{f: d[f] for f in fields})

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "WorldSpec":
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(doc)


@dataclass
class Dataset:
    tokens: np.ndarray  # n×L int
    features: np.ndarray  # n×r float
    answers: np.ndarray  # n int
    types: np.ndarray  # n int
    split: str
    seed: int
    spec_hash: str = ""

    def __len__(self):
        return len(self.answers)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.tokens[idx], self.features[idx], self.answers[idx], self.types[idx],
            self.split, self.seed, self.spec_hash,
        )  # fmt: skip


def default_cp_spec(seed: int = 0) -> WorldSpec:
    """The canonical benchmark: 8 types × 5 answers, majority answer flipped at test time."""
    t, m, r = 8, 5, 16
    rng = np.random.default_rng(seed)
    prototypes = rng.standard_normal((t * m, r))
    train = np.full((t, m), 0.045)
    test = np.full((t, m), 0.045)
    for row in range(t):
        major = rng.integers(m)
        train[row, major] = 0.82
        # the test majority is a different answer, the train majority becomes a minority
        test[row, (major + 1 + rng.integers(m - 1)) % m] = 0.82
    return WorldSpec(
        num_types=t,
        answers_per_type=m,
        vocab_size=64,
        question_length=6,
        train_prior=train,
        test_prior=test,
        beta=0.95,
        sigma=0.25,
        prototypes=prototypes,
    )


def _split_rng(split: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLITS.index(split)])


def generate_split(spec: WorldSpec, split: str, n: int, seed: int) -> Dataset:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    rng = _split_rng(split, seed)
    t, m, na = spec.num_types, spec.answers_per_type, spec.num_answers
    prior = spec.prior(split)

    types = rng.integers(t, size=n)
    u = rng.random(n)
    cdf = np.cumsum(prior, axis=1)
    local = (u[:, None] >= cdf[types]).sum(axis=1)
    local = np.minimum(local, m - 1)  # guards float round-off at the last bin
    answers = types * m + local

    distractors = rng.integers(t, spec.vocab_size, size=(n, spec.question_length - 1))
    tokens = np.concatenate([types[:, None], distractors], axis=1)

    grounded = rng.random(n) < spec.beta
    shown = np.where(grounded, answers, rng.integers(na, size=n))
    noise = rng.standard_normal((n, spec.feature_dim))
    features = spec.prototypes[shown] + spec.sigma * noise
    return Dataset(tokens, features, answers, types, split, int(seed), spec.digest())


def bayes_qonly_accuracy(spec: WorldSpec, eval_split: str = "test", train_split: str = "train") -> float:
    """Exact accuracy on ``eval_split`` of answering each type's ``train_split`` mode."""
    fit, target = spec.prior(train_split), spec.prior(eval_split)
    mode = np.argmax(fit, axis=1)
    return float(target[np.arange(spec.num_types), mode].mean())


def bayes_grounded_accuracy(spec: WorldSpec, split: str = "test", samples: int = 200_000) -> float:
    """Accuracy of nearest-prototype classification of the image feature.

    Closed form when ``sigma == 0``; otherwise a Monte Carlo estimate drawn from a
    fixed oracle stream that never touches dataset generation.
    """
    spec.prior(split)
    na = spec.num_answers
    if spec.sigma == 0:
        return spec.beta + (1.0 - spec.beta) / na
    rng = np.random.default_rng(ORACLE_SEED)
    correct = 0
    chunk = 20_000
    protos = spec.prototypes
    sq = (protos**2).sum(axis=1)
    for lo in range(0, samples, chunk):
        k = min(chunk, samples - lo)
        types = rng.integers(spec.num_types, size=k)
        u = rng.random(k)
        local = (u[:, None] >= np.cumsum(spec.prior(split), axis=1)[types]).sum(axis=1)
        answers = types * spec.answers_per_type + np.minimum(local, spec.answers_per_type - 1)
        shown = np.where(rng.random(k) < spec.beta, answers, rng.integers(na, size=k))
        x = protos[shown] + spec.sigma * rng.standard_normal((k, spec.feature_dim))
        d2 = sq[None, :] - 2.0 * x @ protos.T
        correct += int((np.argmin(d2, axis=1) == answers).sum())
    return correct / samples


# ---------------------------------------------------------------- dataset files


def save_dataset(ds: Dataset, path, spec: WorldSpec):
    """Write a JSON-lines dataset.

    The first line is a header ``{"format", "version", "spec_hash", "split",
    "seed", "n", "num_answers", "vocab_size", "feature_dim"}``; every later
    line is ``{"type", "tokens", "features", "answer"}`` with features rounded
    to nine decimals.
    """
    header = {
        "format": DATASET_FORMAT,
        "version": 1,
        "spec_hash": spec.digest(),
        "split": ds.split,
        "seed": ds.seed,
        "n": len(ds),
        "num_answers": spec.num_answers,
        "num_types": spec.num_types,
        "vocab_size": spec.vocab_size,
        "feature_dim": spec.feature_dim,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(ds)):
            feats = ",".join(f"{x:.{FEATURE_DECIMALS}f}" for x in ds.features[i])
            toks = ",".join(str(int(x)) for x in ds.tokens[i])
            fh.write(
                f'{{"answer":{int(ds.answers[i])},"features":[{feats}],'
                f'"tokens":[{toks}],"type":{int(ds.types[i])}}}\n'
            )
    tmp.replace(path)


def load_dataset(path) -> tuple[Dataset, dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ConfigError(f"{path}: not an {DATASET_FORMAT} file")
        recs = [json.loads(line) for line in fh if line.strip()]
    if len(recs) != header["n"]:
        raise ConfigError(f"{path}: header says {header['n']} records, found {len(recs)}")
    ds = Dataset(
        tokens=np.array([r["tokens"] for r in recs], dtype=np.int64),
        features=np.array([r["features"] for r in recs], dtype=np.float64),
        answers=np.array([r["answer"] for r in recs], dtype=np.int64),
        types=np.array([r["type"] for r in recs], dtype=np.int64),
        split=header["split"],
        seed=header["seed"],
        spec_hash=header["spec_hash"],
    )
    return ds, header
