"""Decoder-only transformer: forward pass, losses and hand-written backward pass.

Block computation, for block input X::

    N1 = rmsnorm(X) * norm1
    Q_i, K_i, V_i = N1 W_i^Q, N1 W_i^K, N1 W_i^V           (per head i)
    A_i = softmax(causal(Q_i K_i^T / sqrt(l)))
    O   = Concat(A_1 V_1, ..., A_h V_h) W^O
    B   = gelu(rmsnorm(O) * norm2 @ W1 + b1) @ W2 + b2
    X'  = X + B

and logits = (rmsnorm(X_final) * final_norm) @ unembed.
All arithmetic runs in the dtype of the checkpoint tensors.
"""
import functools
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import ShapeError

RMS_EPS = 1e-6
GELU_C = float(np.sqrt(2.0 / np.pi))  # tanh approximation of GELU


@dataclass
class ForwardTrace:
    logits: np.ndarray
    input_embeddings: Optional[np.ndarray] = None
    queries: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    block_outputs: list = field(default_factory=list)
    final_hidden: Optional[np.ndarray] = None


class LossParts(NamedTuple):
    total: float
    pred: float
    distill: float


def check_tokens(config, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"token batch must be B x L, got shape {tokens.shape}")
    if tokens.shape[1] < 1 or tokens.shape[1] > config.context_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} outside [1, {config.context_len}]")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ShapeError(f"token id outside [0, {config.vocab_size})")
    return tokens


def _rmsnorm(x, g):
    rinv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xhat = x * rinv
    return xhat * g, (xhat, rinv)


def _rmsnorm_back(dy, g, cache):
    xhat, rinv = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rinv * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg


def _gelu_tanh(x):
    # x * x * x, not x ** 3: float32 pow takes a slow generic path
    return np.tanh(GELU_C * (x + 0.044715 * (x * x * x)))


def gelu(x):
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_grad(x, t):
    # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2), in place
    g = t * t
    np.subtract(1.0, g, out=g)
    g *= x
    x2 = x * x
    x2 *= 3 * 0.044715
    x2 += 1.0
    g *= x2
    g *= 0.5 * GELU_C
    g += 0.5
    g += 0.5 * t
    return g


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, l = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * l)


@functools.lru_cache(maxsize=16)
def _causal_mask(t, dtype):
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def _causal_softmax(s):
    """Row softmax over the causal prefix; overwrites ``s``."""
    s += _causal_mask(s.shape[-1], s.dtype)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _run(ckpt, tokens, keep_cache, trace=None):
    cfg = ckpt.config
    h = cfg.num_heads
    dtype = ckpt.embed.dtype
    scale = dtype.type(1.0 / np.sqrt(cfg.head_dim))
    t = tokens.shape[1]
    x = ckpt.embed[tokens] + ckpt.pos[:t]
    if trace is not None:
        trace.input_embeddings = x
    caches = []
    for blk in ckpt.blocks:
        n1, c_n1 = _rmsnorm(x, blk.norm1)
        q = _split_heads(n1 @ blk.wq, h)
        k = _split_heads(n1 @ blk.wk, h)
        v = _split_heads(n1 @ blk.wv, h)
        a = _causal_softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        hcat = _merge_heads(a @ v)
        o = hcat @ blk.wo
        n2, c_n2 = _rmsnorm(o, blk.norm2)
        u = n2 @ blk.w1 + blk.b1
        th = _gelu_tanh(u)
        act = 0.5 * u * (1.0 + th)
        bout = act @ blk.w2 + blk.b2
        if trace is not None:
            trace.queries.append(q)
            trace.keys.append(k)
            trace.values.append(v)
            trace.attention.append(a)
            trace.block_outputs.append(bout)
        if keep_cache:
            caches.append((c_n1, n1, q, k, v, a, hcat, c_n2, n2, u, th, act))
        x = x + bout
    if trace is not None:
        trace.final_hidden = x
    nf, c_nf = _rmsnorm(x, ckpt.final_norm)
    logits = nf @ ckpt.unembed
    return logits, (caches, c_nf, nf, scale)


def forward(ckpt, tokens, capture_trace=False):
    tokens = check_tokens(ckpt.config, tokens)
    trace = ForwardTrace(logits=None) if capture_trace else None
    logits, _ = _run(ckpt, tokens, keep_cache=False, trace=trace)
    if trace is None:
        return ForwardTrace(logits=logits)
    trace.logits = logits
    return trace


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def losses_from_logits(logits, tokens, teacher_logits=None, alpha=0.0):
    """Return (LossParts, d total / d logits).

    The prediction loss averages next-token cross-entropy over positions
    0..L-2; the distillation term averages the cross-entropy from the
    teacher's token distribution to the student's over the same positions.
    """
    b, t, m = logits.shape
    if t < 2:
        raise ShapeError("need at least 2 positions to form a next-token loss")
    n = b * (t - 1)
    logp = log_softmax(logits[:, :-1])
    targets = tokens[:, 1:]
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    pred = -picked.sum(dtype=np.float64) / n
    p = np.exp(logp)
    grad_inner = p.copy()
    np.put_along_axis(grad_inner, targets[..., None],
                      np.take_along_axis(grad_inner, targets[..., None], axis=-1) - 1, axis=-1)
    distill = 0.0
    if teacher_logits is not None:
        if teacher_logits.shape != logits.shape:
            raise ShapeError(f"teacher logits {teacher_logits.shape} != student {logits.shape}")
        pt = np.exp(log_softmax(teacher_logits[:, :-1].astype(logits.dtype)))
        distill = -(pt * logp).sum(dtype=np.float64) / n
        grad_inner += logits.dtype.type(alpha) * (p - pt)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = grad_inner / logits.dtype.type(n)
    return LossParts(pred + alpha * distill, pred, distill), dlogits


def loss_and_grads(ckpt, tokens, teacher_logits=None, alpha=0.0):
    """Loss ``pred + alpha * distill`` and its gradient for every checkpoint tensor.

    ``teacher_logits`` are treated as constants.
    """
    cfg = ckpt.config
    tokens = check_tokens(cfg, tokens)
    logits, (caches, c_nf, nf, scale) = _run(ckpt, tokens, keep_cache=True)
    parts, dlogits = losses_from_logits(logits, tokens, teacher_logits, alpha)

    grads = {}
    b, t, m = logits.shape
    d = cfg.d_model
    grads["unembed"] = nf.reshape(-1, d).T @ dlogits.reshape(-1, m)
    dx, grads["final_norm"] = _rmsnorm_back(dlogits @ ckpt.unembed.T, ckpt.final_norm, c_nf)

    for i in reversed(range(cfg.num_layers)):
        blk = ckpt.blocks[i]
        c_n1, n1, q, k, v, a, hcat, c_n2, n2, u, th, act = caches[i]
        g = {}
        dbout = dx.reshape(-1, d)
        g["b2"] = dbout.sum(axis=0)
        g["w2"] = act.reshape(-1, cfg.ffn_dim).T @ dbout
        du = (dbout @ blk.w2.T) * _gelu_grad(u, th).reshape(-1, cfg.ffn_dim)
        g["b1"] = du.sum(axis=0)
        g["w1"] = n2.reshape(-1, d).T @ du
        dn2 = (du @ blk.w1.T).reshape(b, t, d)
        do, g["norm2"] = _rmsnorm_back(dn2, blk.norm2, c_n2)
        g["wo"] = hcat.reshape(-1, d).T @ do.reshape(-1, d)
        dh = _split_heads(do @ blk.wo.T, cfg.num_heads)
        da = dh @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dh
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        n1f = n1.reshape(-1, d)
        g["wq"] = n1f.T @ dq.reshape(-1, d)
        g["wk"] = n1f.T @ dk.reshape(-1, d)
        g["wv"] = n1f.T @ dv.reshape(-1, d)
        dn1 = dq @ blk.wq.T + dk @ blk.wk.T + dv @ blk.wv.T
        dxin, g["norm1"] = _rmsnorm_back(dn1, blk.norm1, c_n1)
        dx = dx + dxin
        for name, value in g.items():
            grads[f"block.{i}.{name}"] = value

    dx_flat = dx.reshape(-1, d)
    onehot = np.zeros((b * t, cfg.vocab_size), dtype=dx.dtype)
    onehot[np.arange(b * t), tokens.reshape(-1)] = 1
    grads["embed"] = onehot.T @ dx_flat
    dpos = np.zeros_like(ckpt.pos)
    dpos[:t] = dx.sum(axis=0)
    grads["pos"] = dpos
    ordered = {name: grads[name] for name in ckpt.tensors()}
    return parts, ordered
