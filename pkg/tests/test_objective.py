import math

import numpy as np
import pytest

from advreg import autodiff as ad
from advreg.autodiff import Tag
from advreg.harness import Adam
from advreg.models import ModelBundle, adversary_logits, forward_vqa
from advreg.objective import (
    Batch,
    RegularizerConfig,
    compute_losses,
    routed_gradients,
    train_step,
)

from conftest import numeric_grad, random_batch, random_bundle, rel_err

# ---------------------------------------------------------------- oracle


def _np_log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def straight_line_losses(params, batch):
    """Plain numpy forward pass, written independently of the graph engine."""
    emb = params["g.embed"][batch.tokens].mean(axis=1)
    q = np.maximum(emb @ params["g.W"] + params["g.b"], 0)
    v = batch.features @ params["h.W"] + params["h.b"]
    hid = np.maximum(np.hstack([v, q]) @ params["f.W1"] + params["f.b1"], 0)
    lp = _np_log_softmax(hid @ params["f.W2"] + params["f.b2"])
    qhid = np.maximum(q @ params["fq.W1"] + params["fq.b1"], 0)
    qlp = _np_log_softmax(qhid @ params["fq.W2"] + params["fq.b2"])
    rows = np.arange(len(batch.answers))
    l_vqa = -lp[rows, batch.answers].mean()
    l_qa = -qlp[rows, batch.answers].mean()
    h_vqa = -(np.exp(lp) * lp).sum(axis=1).mean()
    h_q = -(np.exp(qlp) * qlp).sum(axis=1).mean()
    return l_vqa, l_qa, h_q, h_vqa


# ---------------------------------------------------------------- losses


def test_zero_bundle_losses(small_dims):
    b = ModelBundle.zeros(small_dims)
    t = compute_losses(b, random_batch(small_dims, 5, 0), RegularizerConfig(0.2, 1.0))
    ln_a = math.log(small_dims.num_answers)
    for value in (t.l_vqa, t.l_qa, t.h_qonly, t.h_vqa):
        assert value == pytest.approx(ln_a, abs=1e-12)
    assert t.l_h == 0.0


def test_confident_vqa_and_uniform_adversary(small_dims):
    b = ModelBundle.zeros(small_dims)
    batch = random_batch(small_dims, 4, 1)
    batch.answers[:] = 2
    b.params["f.b2"][0, 2] = 60.0  # f puts ~all mass on answer 2 regardless of input
    t = compute_losses(b, batch, RegularizerConfig())
    ln_a = math.log(small_dims.num_answers)
    assert t.l_vqa < 1e-20 and t.h_vqa < 1e-20
    assert t.h_qonly == pytest.approx(ln_a, abs=1e-12)
    assert t.l_h == pytest.approx(ln_a, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_losses_match_straight_line_oracle(small_dims, seed):
    b = random_bundle(small_dims, seed)
    batch = random_batch(small_dims, 6, seed)
    t = compute_losses(b, batch, RegularizerConfig(0.3, 2.0))
    l_vqa, l_qa, h_q, h_v = straight_line_losses(b.params, batch)
    assert t.l_vqa == pytest.approx(l_vqa, abs=1e-10)
    assert t.l_qa == pytest.approx(l_qa, abs=1e-10)
    assert t.h_qonly == pytest.approx(h_q, abs=1e-10)
    assert t.h_vqa == pytest.approx(h_v, abs=1e-10)
    assert abs(t.l_h - (t.h_qonly - t.h_vqa)) <= 1e-12


def test_empty_batch_is_rejected(small_dims):
    b = ModelBundle.init(small_dims, 0)
    empty = Batch(np.zeros((0, 3), int), np.zeros((0, small_dims.feature_dim)), np.zeros(0, int))
    with pytest.raises(ad.ContractError):
        compute_losses(b, empty, RegularizerConfig())


def test_negative_lambda_is_rejected():
    with pytest.raises(ad.ConfigError):
        RegularizerConfig(-0.1, 0.0)
    with pytest.raises(ad.ConfigError):
        RegularizerConfig(0.0, -1.0)


# ---------------------------------------------------------------- routing


def routed_objective_fd(b, batch, lq, lh, name):
    """Finite-difference gradients of the quantity each partition should descend."""
    tag = b.tags[name]

    def objective():
        l_vqa, l_qa, h_q, h_v = straight_line_losses(b.params, batch)
        if tag is Tag.G_PARAMS:
            return l_vqa - lq * l_qa - lh * (h_q - h_v)
        if tag is Tag.FQ_PARAMS:
            return l_qa
        return l_vqa

    return numeric_grad(objective, b.params[name])


@pytest.mark.parametrize("seed", range(3))
def test_routing_matches_finite_differences(small_dims, seed):
    b = random_bundle(small_dims, seed)
    batch = random_batch(small_dims, 5, seed)
    lq, lh = 0.4, 1.3
    total, _, _ = routed_gradients(b, batch, RegularizerConfig(lq, lh))
    for name in b.names():
        fd = routed_objective_fd(b, batch, lq, lh, name)
        assert rel_err(total[name], fd) < 1e-4, name


def test_routing_table_exact_zeros(small_dims):
    b = random_bundle(small_dims, 11)
    batch = random_batch(small_dims, 5, 11)
    _, _, parts = routed_gradients(b, batch, RegularizerConfig(0.5, 2.0))
    allowed = {
        "vqa": {Tag.F_PARAMS, Tag.G_PARAMS, Tag.H_PARAMS},
        "qa": {Tag.FQ_PARAMS, Tag.G_PARAMS},
        "h": {Tag.G_PARAMS},
    }
    for term, grads in parts.items():
        for name, g in grads.items():
            if b.tags[name] in allowed[term]:
                assert np.abs(g).sum() > 0, (term, name)
            else:
                assert not g.any(), (term, name)


def test_g_update_decomposes_into_three_masked_terms(small_dims):
    b = random_bundle(small_dims, 12)
    batch = random_batch(small_dims, 5, 12)
    lq, lh = 0.25, 3.0
    total, _, _ = routed_gradients(b, batch, RegularizerConfig(lq, lh))
    # three independent graphs, each differentiated for G only
    separate = []
    for which in ("vqa", "qa", "h"):
        g = ad.Graph()
        p = b.bind(g)
        q, _, logits = forward_vqa(b, p, batch.tokens, batch.features)
        if which == "vqa":
            loss = ad.cross_entropy(ad.log_softmax(logits), batch.answers)
        elif which == "qa":
            loss = -lq * ad.cross_entropy(ad.log_softmax(adversary_logits(p, q)), batch.answers)
        else:
            loss = -lh * (
                ad.mean(ad.entropy_of_softmax(adversary_logits(p, q)))
                - ad.mean(ad.entropy_of_softmax(logits))
            )
        separate.append(ad.backward(loss, {Tag.G_PARAMS}))
    for name in b.names(Tag.G_PARAMS):
        np.testing.assert_allclose(
            total[name], sum(s[name] for s in separate), rtol=0, atol=1e-10
        )


def test_lh_step_leaves_adversary_untouched(small_dims):
    b = random_bundle(small_dims, 13)
    batch = random_batch(small_dims, 5, 13)
    _, _, parts = routed_gradients(b, batch, RegularizerConfig(0.0, 5.0))
    for name in b.names(Tag.FQ_PARAMS) + b.names(Tag.F_PARAMS) + b.names(Tag.H_PARAMS):
        assert not parts["h"][name].any()


def _g_only_step(b, grads, step):
    out = b.copy()
    for name in b.names(Tag.G_PARAMS):
        out.params[name] = b.params[name] - step * grads[name]
    return out


def test_entropy_step_ascends_l_h(small_dims):
    b = random_bundle(small_dims, 14)
    batch = random_batch(small_dims, 6, 14)
    _, _, parts = routed_gradients(b, batch, RegularizerConfig(0.0, 1.0))
    before = compute_losses(b, batch, RegularizerConfig()).l_h
    after = compute_losses(_g_only_step(b, parts["h"], 1e-4), batch, RegularizerConfig()).l_h
    assert after >= before


def test_reversal_step_ascends_l_qa(small_dims):
    b = random_bundle(small_dims, 15)
    batch = random_batch(small_dims, 6, 15)
    _, _, parts = routed_gradients(b, batch, RegularizerConfig(1.0, 0.0))
    before = compute_losses(b, batch, RegularizerConfig()).l_qa
    after = compute_losses(_g_only_step(b, parts["qa"], 1e-4), batch, RegularizerConfig()).l_qa
    assert after >= before


def test_regularizers_off_match_independent_baseline(small_dims):
    """With both lambdas at zero, f,g,h follow L_VQA alone and f_Q follows L_QA alone."""
    b = random_bundle(small_dims, 16)
    batch = random_batch(small_dims, 6, 16)
    total, _, _ = routed_gradients(b, batch, RegularizerConfig())
    g = ad.Graph()
    p = b.bind(g)
    q, _, logits = forward_vqa(b, p, batch.tokens, batch.features)
    vqa_loss = ad.cross_entropy(ad.log_softmax(logits), batch.answers)
    qa_loss = ad.cross_entropy(ad.log_softmax(adversary_logits(p, q)), batch.answers)
    vqa = ad.backward(vqa_loss, {Tag.F_PARAMS, Tag.G_PARAMS, Tag.H_PARAMS})
    qa = ad.backward(qa_loss, {Tag.FQ_PARAMS})
    for name in b.names():
        expected = qa[name] if b.tags[name] is Tag.FQ_PARAMS else vqa[name]
        assert total[name].tobytes() == (expected + 0.0).tobytes(), name


def test_train_step_updates_every_partition(small_dims):
    b = random_bundle(small_dims, 17)
    before = b.copy()
    opt = Adam()
    _, terms = train_step(b, random_batch(small_dims, 6, 17), RegularizerConfig(0.1, 0.1), opt)
    assert math.isfinite(terms.l_vqa)
    for name in b.names():
        assert not np.array_equal(before.params[name], b.params[name]), name


def test_optimizer_partition_mismatch(small_dims):
    b = random_bundle(small_dims, 18)
    opt = Adam()
    opt.step({"other": np.zeros(2)}, {"other": np.zeros(2)})
    with pytest.raises(ad.ContractError):
        train_step(b, random_batch(small_dims, 3, 18), RegularizerConfig(), opt)
