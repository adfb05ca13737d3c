import numpy as np
import pytest

from csialm import numerics as nx
from csialm.backbone import (
    Backbone, BackboneConfig, CorpusConfig, LoRALinear, OutputHead, StudentConfig, StudentModel,
    attention_weights, lora_apply, project_out, student_forward, surrogate_pretrain,
)
from csialm.errors import ConfigError, ContractError, LengthError
from csialm.numerics.gradcheck import gradcheck


@pytest.fixture
def f64():
    with nx.default_dtype(np.float64):
        yield


def small(layers=2, **kw):
    base = dict(layers=layers, hidden=16, heads=4, max_positions=12, vocab=64)
    base.update(kw)
    return BackboneConfig(**base)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_causal_perturbation_leaves_prefix_bit_identical(layers):
    rng = np.random.default_rng(layers)
    bb = Backbone(small(layers), rng)
    z = rng.normal(size=(2, 8, 16)).astype(np.float32)
    for t in range(8):
        z2 = z.copy()
        z2[:, t] += rng.normal(size=16).astype(np.float32)
        h1, _ = bb(z)
        h2, _ = bb(z2)
        assert np.array_equal(h1.data[:, :t], h2.data[:, :t])
        assert not np.array_equal(h1.data[:, t], h2.data[:, t])


def test_empty_stack_adds_positions():
    rng = np.random.default_rng(0)
    bb = Backbone(small(0), rng)
    z = rng.normal(size=(3, 5, 16)).astype(np.float32)
    h, _ = bb(z)
    assert np.array_equal(h.data, z + bb.wpe.data[:5])


def test_attention_rows_stochastic():
    rng = np.random.default_rng(1)
    bb = Backbone(small(2), rng)
    weights = []
    bb(rng.normal(size=(2, 6, 16)), weights=weights)
    assert len(weights) == 2
    for w in weights:
        assert w.shape == (2, 4, 6, 6)
        assert np.allclose(w.data.sum(-1), 1, atol=1e-6)
        assert np.all(np.triu(w.data[0, 0], 1) < 1e-12)


def test_overlong_sequence_is_rejected():
    bb = Backbone(small(1), np.random.default_rng(0))
    with pytest.raises(LengthError):
        bb(np.zeros((1, 13, 16)))


def test_trace_does_not_change_hidden_states():
    rng = np.random.default_rng(2)
    bb = Backbone(small(3), rng, with_lora=True)
    z = rng.normal(size=(2, 7, 16))
    h1, tr = bb(z, trace=True)
    h2, none = bb(z)
    assert np.array_equal(h1.data, h2.data) and none == []
    assert len(tr) == 3 and tr[-1].q.shape == (2, 7, 16)
    assert tr[-1].window(4).v.shape == (2, 4, 16)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(hidden=10, heads=4)
    with pytest.raises(ConfigError):
        BackboneConfig(lora_rank=0)
    with pytest.raises(ConfigError):
        StudentConfig(hidden=12, heads=8)


def test_lora_zero_init_and_freeze():
    rng = np.random.default_rng(3)
    bb = Backbone(small(2), rng, with_lora=True)
    bb.freeze_base()
    q = bb.blocks[0].attn.q_proj
    assert np.array_equal(q.effective_weight().data, q.weight.data)
    h, _ = bb(rng.normal(size=(2, 5, 16)))
    (h * h).sum().backward()
    for name, p in bb.named_parameters():
        if ".lora_" in name:
            assert p.grad is not None
        else:
            assert p.grad is None, name
    # lora_a only receives gradient once lora_b is non-zero; lora_b gets it immediately
    assert np.any(q.lora_b.grad != 0)
    assert len(bb.lora_parameters()) == 8


def test_lora_update_rank_bounded():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(12, 10))
    a, b = rng.normal(size=(12, 3)), rng.normal(size=(3, 10))
    delta = lora_apply(w, a, b, alpha=6.0, r=3).data - w
    s = np.linalg.svd(delta, compute_uv=False)
    assert np.sum(s > 1e-9 * s[0]) <= 3
    assert np.allclose(delta, 2.0 * a @ b)
    with pytest.raises(ConfigError):
        lora_apply(w, rng.normal(size=(12, 11)), rng.normal(size=(11, 10)), 1.0, 11)


def test_lora_merge_equivalence():
    rng = np.random.default_rng(5)
    layer = LoRALinear(8, 6, rng, rank=2, alpha=4.0)
    layer.lora_b.data[...] = rng.normal(size=(2, 6))
    x = rng.normal(size=(4, 8)).astype(np.float32)
    merged = x @ layer.effective_weight().data + layer.bias.data
    assert np.allclose(layer(x).data, merged, atol=1e-5)


def test_surrogate_pretraining_lowers_loss_and_is_deterministic():
    cfg = BackboneConfig(layers=1, hidden=16, heads=2, vocab=64, max_positions=32)
    corpus = CorpusConfig(seq_len=16, batch=8, lr=3e-3)
    r1 = surrogate_pretrain(cfg, corpus, steps=500, seed=1)
    r2 = surrogate_pretrain(cfg, corpus, steps=500, seed=1)
    assert r1.dictionary.shape == (64, 16)
    assert np.mean(r1.losses[-50:]) < np.mean(r1.losses[:10])
    assert all(np.array_equal(r1.weights[k], r2.weights[k]) for k in r1.weights)
    with pytest.raises(ConfigError):
        surrogate_pretrain(BackboneConfig(vocab=32), steps=1)


def test_output_head_identity_and_errors():
    rng = np.random.default_rng(6)
    head = OutputHead(6, 6, rng)
    head.linear.weight.data[...] = np.eye(6)
    head.linear.bias.data[...] = 0
    hidden = rng.normal(size=(2, 5, 6)).astype(np.float32)
    assert np.array_equal(project_out(hidden, head, 2).data, hidden[:, -1])
    with pytest.raises(ContractError):
        head(hidden, n_prompts=5)


def test_output_head_gradcheck(f64):
    rng = np.random.default_rng(7)
    head = OutputHead(5, 4, rng)
    h = nx.Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    assert gradcheck(lambda: head(h, 1), head.parameters() + [h]) < 1e-6


def test_student_shapes_and_prompt_reachability():
    rng = np.random.default_rng(8)
    cfg = StudentConfig(layers=2, hidden=16, heads=4, prompt_len=3, max_positions=16)
    model = StudentModel(4, cfg, seed=0)
    h = rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))
    pred, traces = student_forward(h, model, trace=True)
    assert pred.shape == (8,) and len(traces) == 2 and traces[0].q.shape == (1, 9, 16)
    model.soft_prompts.data[...] += 0.5
    pred2, _ = student_forward(h, model)
    assert np.linalg.norm(pred2.data - pred.data) > 0
    plain = StudentModel(4, StudentConfig(layers=1, hidden=16, heads=4, prompt_len=0), seed=0)
    out, _ = plain(rng.normal(size=(3, 8, 6)))
    assert out.shape == (3, 8) and plain.soft_prompts is None


def test_student_default_parameter_count_closed_form():
    f = 16
    d, layers, prompts, pos = 128, 3, 4, 64
    per_block = 2 * (2 * d) + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    expected = (2 * f * d + d) + prompts * d + pos * d + layers * per_block + (d * 2 * f + 2 * f)
    assert StudentModel(f).num_parameters() == expected


def test_qk_trace_matches_attention_weights():
    rng = np.random.default_rng(9)
    bb = Backbone(small(1, causal=False), rng)
    weights = []
    _, tr = bb(rng.normal(size=(1, 5, 16)), trace=True, weights=weights)
    again = attention_weights(tr[0].q, tr[0].k, 4)
    assert np.array_equal(again.data, weights[0].data)
