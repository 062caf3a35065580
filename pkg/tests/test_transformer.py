import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guide_init.checkpoint import random_init
from guide_init.errors import ShapeError
from guide_init.transformer import forward, loss_and_grads, losses_from_logits

from conftest import TINY, random_model


def reference_forward(ckpt, tokens):
    """Position-by-position, head-by-head float64 forward pass."""
    c = ckpt.config
    p = {k: np.asarray(v, dtype=np.float64) for k, v in ckpt.tensors().items()}

    def rms(x, g):
        return x / math.sqrt(float(np.mean(x * x)) + 1e-6) * g

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    out = np.zeros(tokens.shape + (c.vocab_size,))
    for b, seq in enumerate(tokens):
        xs = [p["embed"][tok] + p["pos"][t] for t, tok in enumerate(seq)]
        for i in range(c.num_layers):
            blk = lambda name: p[f"block.{i}.{name}"]
            n1 = [rms(x, blk("norm1")) for x in xs]
            new = []
            for t in range(len(xs)):
                heads = []
                for h in range(c.num_heads):
                    cols = slice(h * c.head_dim, (h + 1) * c.head_dim)
                    q = n1[t] @ blk("wq")[:, cols]
                    scores = [q @ (n1[s] @ blk("wk")[:, cols]) / math.sqrt(c.head_dim)
                              for s in range(t + 1)]
                    w = np.exp(np.array(scores) - max(scores))
                    w /= w.sum()
                    heads.append(sum(w[s] * (n1[s] @ blk("wv")[:, cols]) for s in range(t + 1)))
                o = np.concatenate(heads) @ blk("wo")
                hidden = gelu(rms(o, blk("norm2")) @ blk("w1") + blk("b1"))
                new.append(xs[t] + hidden @ blk("w2") + blk("b2"))
            xs = new
        for t, x in enumerate(xs):
            out[b, t] = rms(x, p["final_norm"]) @ p["unembed"]
    return out


def batch(config, seed, b=2, length=None):
    length = length or config.context_len
    return np.random.default_rng(seed).integers(0, config.vocab_size, (b, length))


@pytest.mark.parametrize("seed", range(3))
def test_matches_reference(seed):
    ckpt = random_model(TINY, seed)
    tokens = batch(TINY, seed)
    got = forward(ckpt, tokens).logits
    assert got.dtype == np.float32
    assert np.abs(got - reference_forward(ckpt, tokens)).max() < 1e-5


def test_zero_weights():
    ckpt = random_init(TINY, 0)
    zeros = {k: np.zeros_like(v) for k, v in ckpt.tensors().items()}
    ckpt = type(ckpt).from_tensors(TINY, zeros)
    trace = forward(ckpt, batch(TINY, 0), capture_trace=True)
    assert np.all(trace.logits == 0)
    L = TINY.context_len
    expected = np.tril(np.ones((L, L))) / np.arange(1, L + 1)[:, None]
    for a in trace.attention:
        assert np.allclose(a, expected)


def test_single_token_attention_is_one():
    ckpt = random_model(TINY, 1)
    trace = forward(ckpt, batch(TINY, 1, length=1), capture_trace=True)
    for a in trace.attention:
        assert a.shape[-2:] == (1, 1) and np.all(a == 1)


def test_attention_rows_are_causal_distributions():
    trace = forward(random_model(TINY, 2), batch(TINY, 2), capture_trace=True)
    for a in trace.attention:
        assert np.allclose(a.sum(-1), 1, atol=1e-6)
        assert np.all(np.triu(np.ones(a.shape[-2:]), 1) * a == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, TINY.context_len - 1))
def test_causality(seed, cut):
    ckpt = random_model(TINY, seed % 5)
    tokens = batch(TINY, seed)
    changed = tokens.copy()
    changed[:, cut:] = (changed[:, cut:] + 1) % TINY.vocab_size
    a, b = forward(ckpt, tokens).logits, forward(ckpt, changed).logits
    assert np.array_equal(a[:, :cut], b[:, :cut])


def test_uniform_logits_loss_is_log_vocab():
    m = TINY.vocab_size
    logits = np.zeros((3, 5, m), dtype=np.float32)
    tokens = batch(TINY, 0, b=3, length=5)
    parts, _ = losses_from_logits(logits, tokens)
    assert parts.pred == pytest.approx(math.log(m), rel=1e-6)


def test_distill_with_self_is_entropy_and_stationary():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 5, TINY.vocab_size))
    tokens = batch(TINY, 0, length=5)
    with_kd, g1 = losses_from_logits(logits, tokens, logits, alpha=1.0)
    without, g0 = losses_from_logits(logits, tokens)
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    entropy = -(p * np.log(p)).sum(-1)[:, :-1].mean()
    assert with_kd.distill == pytest.approx(entropy, rel=1e-9)
    assert with_kd.total == pytest.approx(without.pred + entropy, rel=1e-9)
    assert np.abs(g1 - g0).max() < 1e-12


def test_loss_gradient_shapes_and_teacher_constant():
    ckpt = random_model(TINY, 0)
    tokens = batch(TINY, 0)
    teacher_logits = forward(random_model(TINY, 9), tokens).logits
    before = teacher_logits.copy()
    parts, grads = loss_and_grads(ckpt, tokens, teacher_logits, alpha=0.5)
    assert np.array_equal(teacher_logits, before)
    assert parts.total == pytest.approx(parts.pred + 0.5 * parts.distill, abs=1e-6)
    assert list(grads) == list(ckpt.tensors())
    for name, g in grads.items():
        assert g.shape == ckpt.tensors()[name].shape and g.dtype == np.float32


@pytest.mark.parametrize("tokens", [
    np.zeros((2, TINY.context_len + 1), dtype=int),
    np.full((1, 3), TINY.vocab_size),
    np.zeros(4, dtype=int),
    np.zeros((1, 3)),
])
def test_bad_tokens(tokens):
    with pytest.raises(ShapeError):
        forward(random_init(TINY, 0), tokens)
