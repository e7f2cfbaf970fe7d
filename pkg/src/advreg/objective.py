"""Regularized objective and its per-partition gradient routing.

Routing table (which loss reaches which parameters):

    F_PARAMS, H_PARAMS : L_VQA
    G_PARAMS           : L_VQA - lambda_q * L_QA - lambda_h * L_H
    FQ_PARAMS          : L_QA

The ``-lambda_q`` factor on G comes from a gradient-reversal node on the
question encoding; the L_H term flows through f and f_Q but only G is active
when it is back-propagated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tag
from .models import ModelBundle, adversary_logits, forward_qonly, forward_vqa


@dataclass(frozen=True)
class RegularizerConfig:
    lambda_q: float = 0.0
    lambda_h: float = 0.0

    def __post_init__(self):
        for key in ("lambda_q", "lambda_h"):
            value = getattr(self, key)
            if not (np.isfinite(value) and value >= 0):
                raise ad.ConfigError(f"{key} must be a finite non-negative number, got {value}")


@dataclass(frozen=True)
class LossTerms:
    l_vqa: float
    l_qa: float
    l_h: float
    h_qonly: float
    h_vqa: float

    def as_dict(self) -> dict[str, float]:
        return {
            "l_vqa": self.l_vqa,
            "l_qa": self.l_qa,
            "l_h": self.l_h,
            "h_qonly": self.h_qonly,
            "h_vqa": self.h_vqa,
        }


@dataclass
class Batch:
    tokens: np.ndarray
    features: np.ndarray
    answers: np.ndarray

    def __len__(self):
        return len(self.answers)


@dataclass
class LossGraph:
    """The graph nodes of one forward pass, kept so backward can be run per term."""

    l_vqa: ad.Tensor
    l_qa: ad.Tensor
    l_h: ad.Tensor
    h_qonly: ad.Tensor
    h_vqa: ad.Tensor
    vqa_logits: ad.Tensor

    def terms(self) -> LossTerms:
        h_q = float(self.h_qonly.value)
        h_v = float(self.h_vqa.value)
        return LossTerms(
            l_vqa=float(self.l_vqa.value),
            l_qa=float(self.l_qa.value),
            l_h=h_q - h_v,
            h_qonly=h_q,
            h_vqa=h_v,
        )


def build_losses(bundle: ModelBundle, batch: Batch, config: RegularizerConfig) -> LossGraph:
    if len(batch) == 0:
        raise ad.ContractError("empty batch")
    graph = ad.Graph()
    p = bundle.bind(graph)
    q, _, logits = forward_vqa(bundle, p, batch.tokens, batch.features)
    l_vqa = ad.cross_entropy(ad.log_softmax(logits), batch.answers)
    # reversed path: f_Q descends L_QA, g ascends it scaled by lambda_q
    l_qa = ad.cross_entropy(ad.log_softmax(forward_qonly(p, q, config.lambda_q)), batch.answers)
    # plain path for the entropy term: g receives the true gradient of L_H
    h_qonly = ad.mean(ad.entropy_of_softmax(adversary_logits(p, q)))
    h_vqa = ad.mean(ad.entropy_of_softmax(logits))
    l_h = h_qonly - h_vqa
    return LossGraph(l_vqa, l_qa, l_h, h_qonly, h_vqa, logits)


def compute_losses(bundle: ModelBundle, batch: Batch, config: RegularizerConfig) -> LossTerms:
    return build_losses(bundle, batch, config).terms()


def routed_gradients(
    bundle: ModelBundle, batch: Batch, config: RegularizerConfig
) -> tuple[dict[str, np.ndarray], LossGraph, dict[str, dict[str, np.ndarray]]]:
    """Per-parameter gradient of the routed objective.

    Returns ``(total, losses, parts)`` where ``parts`` holds the three masked
    contributions ``vqa``, ``qa`` (already reversed/scaled on G) and ``h``
    (already scaled by ``-lambda_h``) that sum to ``total``.
    """
    lg = build_losses(bundle, batch, config)
    parts = {
        "vqa": ad.backward(lg.l_vqa, {Tag.F_PARAMS, Tag.G_PARAMS, Tag.H_PARAMS}),
        "qa": ad.backward(lg.l_qa, {Tag.FQ_PARAMS, Tag.G_PARAMS}),
    }
    if config.lambda_h > 0:
        parts["h"] = {
            k: -config.lambda_h * v for k, v in ad.backward(lg.l_h, {Tag.G_PARAMS}).items()
        }
    else:
        parts["h"] = {k: np.zeros_like(v) for k, v in parts["vqa"].items()}
    names = bundle.names()
    total = {n: parts["vqa"][n] + parts["qa"][n] + parts["h"][n] for n in names}
    return total, lg, {k: {n: v[n] for n in names} for k, v in parts.items()}


def train_step(bundle: ModelBundle, batch: Batch, config: RegularizerConfig, optimizer, lr=None):
    """One routed gradient step; mutates ``bundle`` in place and returns ``(bundle, terms)``."""
    grads, lg, _ = routed_gradients(bundle, batch, config)
    optimizer.step(bundle.params, grads, lr)
    return bundle, lg.terms()
