"""Question encoder g, image encoder h, fusion answerer f and question-only adversary f_Q."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tag

CHECKPOINT_FORMAT = "advreg-checkpoint"
CHECKPOINT_VERSION = 1

ADVERSARY_HIDDEN = 256


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    num_answers: int
    feature_dim: int = 16
    embed_dim: int = 16
    question_dim: int = 32
    image_dim: int = 32
    fusion_hidden: int = 64
    adversary_hidden: int = ADVERSARY_HIDDEN


# (name, tag, shape-from-dims, is_bias)
def _layout(d: ModelDims):
    return [
        ("g.embed", Tag.G_PARAMS, (d.vocab_size, d.embed_dim), False),
        ("g.W", Tag.G_PARAMS, (d.embed_dim, d.question_dim), False),
        ("g.b", Tag.G_PARAMS, (1, d.question_dim), True),
        ("h.W", Tag.H_PARAMS, (d.feature_dim, d.image_dim), False),
        ("h.b", Tag.H_PARAMS, (1, d.image_dim), True),
        ("f.W1", Tag.F_PARAMS, (d.image_dim + d.question_dim, d.fusion_hidden), False),
        ("f.b1", Tag.F_PARAMS, (1, d.fusion_hidden), True),
        ("f.W2", Tag.F_PARAMS, (d.fusion_hidden, d.num_answers), False),
        ("f.b2", Tag.F_PARAMS, (1, d.num_answers), True),
        ("fq.W1", Tag.FQ_PARAMS, (d.question_dim, d.adversary_hidden), False),
        ("fq.b1", Tag.FQ_PARAMS, (1, d.adversary_hidden), True),
        ("fq.W2", Tag.FQ_PARAMS, (d.adversary_hidden, d.num_answers), False),
        ("fq.b2", Tag.FQ_PARAMS, (1, d.num_answers), True),
    ]


@dataclass
class ModelBundle:
    """All trainable tensors of the four maps, each tagged with exactly one partition."""

    dims: ModelDims
    params: dict[str, np.ndarray]
    tags: dict[str, Tag] = field(default_factory=dict)

    def __post_init__(self):
        expected = {name: (tag, shape) for name, tag, shape, _ in _layout(self.dims)}
        if not self.tags:
            self.tags = {name: tag for name, (tag, _) in expected.items()}
        if set(self.params) != set(expected) or set(self.tags) != set(expected):
            raise ad.ContractError("parameter set does not match the model layout")
        for name, (tag, shape) in expected.items():
            if self.tags[name] is not tag:
                raise ad.ContractError(f"{name} must be tagged {tag.value}")
            if self.params[name].shape != shape:
                raise ad.ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, dims: ModelDims, seed: int) -> "ModelBundle":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, _, shape, is_bias in _layout(dims):
            if is_bias:
                params[name] = np.zeros(shape)
            else:
                a = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-a, a, size=shape)
        return cls(dims, params)

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelBundle":
        return cls(dims, {name: np.zeros(shape) for name, _, shape, _ in _layout(dims)})

    def names(self, tag: Tag | None = None) -> list[str]:
        return [n for n, _, _, _ in _layout(self.dims) if tag is None or self.tags[n] is tag]

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.dims, {k: v.copy() for k, v in self.params.items()})

    def bind(self, graph: ad.Graph) -> dict[str, ad.Tensor]:
        """Create one tagged leaf per parameter in ``graph``."""
        return {n: graph.leaf(self.params[n], self.tags[n], n) for n in self.names()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def _check_inputs(dims: ModelDims, tokens, features):
    tokens = np.asarray(tokens)
    features = np.asarray(features, dtype=np.float64)
    if tokens.ndim != 2:
        raise ad.ShapeError(f"tokens must be m×L, got shape {tokens.shape}")
    if features.ndim != 2 or features.shape[1] != dims.feature_dim:
        raise ad.ShapeError(
            f"features must be m×{dims.feature_dim}, got shape {features.shape}"
        )
    if tokens.shape[0] != features.shape[0]:
        raise ad.ShapeError(f"{tokens.shape[0]} questions but {features.shape[0]} images")
    return tokens, features


def encode_question(p: dict[str, ad.Tensor], tokens) -> ad.Tensor:
    pooled = ad.mean_pool(ad.embedding_lookup(p["g.embed"], tokens))
    return ad.relu(pooled @ p["g.W"] + p["g.b"])


def encode_image(p: dict[str, ad.Tensor], features: ad.Tensor) -> ad.Tensor:
    return features @ p["h.W"] + p["h.b"]


def answer_logits(p: dict[str, ad.Tensor], v: ad.Tensor, q: ad.Tensor) -> ad.Tensor:
    hidden = ad.relu(ad.concat(v, q) @ p["f.W1"] + p["f.b1"])
    return hidden @ p["f.W2"] + p["f.b2"]


def adversary_logits(p: dict[str, ad.Tensor], q: ad.Tensor) -> ad.Tensor:
    hidden = ad.relu(q @ p["fq.W1"] + p["fq.b1"])
    return hidden @ p["fq.W2"] + p["fq.b2"]


def forward_vqa(bundle: ModelBundle, p: dict[str, ad.Tensor], tokens, features):
    """Return ``(q, v, logits)`` for a batch; ``p`` comes from ``bundle.bind``."""
    tokens, features = _check_inputs(bundle.dims, tokens, features)
    graph = p["g.embed"].graph
    q = encode_question(p, tokens)
    v = encode_image(p, graph.constant(features))
    return q, v, answer_logits(p, v, q)


def forward_qonly(p: dict[str, ad.Tensor], q: ad.Tensor, lambda_q: float) -> ad.Tensor:
    """Adversary logits on a gradient-reversed copy of ``q``."""
    return adversary_logits(p, ad.grad_reverse(q, lambda_q))


# ---------------------------------------------------------------- inference


def predict(bundle: ModelBundle, tokens, features):
    """Plain numpy forward pass: ``(q, vqa_logits, qonly_logits)`` as arrays."""
    g = ad.Graph()
    p = bundle.bind(g)
    q, _, logits = forward_vqa(bundle, p, tokens, features)
    qlogits = adversary_logits(p, q)
    return q.value, logits.value, qlogits.value


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> str:
    """Write a JSON checkpoint; returns its sha256.

    Layout: ``{"format", "version", "dims", "extra", "params": [{"name", "tag",
    "shape", "values"}]}`` with ``values`` row-major and floats written with
    round-trip precision.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": asdict(bundle.dims),
        "extra": extra or {},
        "params": [
            {
                "name": n,
                "tag": bundle.tags[n].value,
                "shape": list(bundle.params[n].shape),
                "values": bundle.params[n].ravel().tolist(),
            }
            for n in bundle.names()
        ],
    }
    data = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    dims = ModelDims(**doc["dims"])
    params, tags = {}, {}
    for entry in doc["params"]:
        params[entry["name"]] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tags[entry["name"]] = Tag(entry["tag"])
    return ModelBundle(dims, params, tags), doc.get("extra", {})
