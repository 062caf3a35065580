"""Student initialization from a teacher checkpoint.

Three constructions share one skeleton: start from ``random_init`` with the
given seed (so untouched tensors equal the random baseline bit for bit),
then overwrite embedding tables and mapped blocks with teacher-derived values.

* ``guide_init``        PCA of the stacked [embedding; positional] tables gives
                        a d_T x d_S projection M. Student tables are E_T M, P_T M;
                        the first block's Q/K/V absorb M^T, the rest of that
                        block and every other mapped block use uniform selection.
* ``lowrank_embed_init`` embedding rows from the best rank-d_S factor of the
                        token Gram matrix E_T E_T^T; everything else random.
* ``uniform_init``      evenly spaced slices of every teacher tensor.
"""
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .checkpoint import DEFAULT_TOKENIZER, random_init
from .errors import ConfigMismatch
from .selection import IndexSelection, LayerSelection, select_layers, EMBED_ONLY


@dataclass
class InitReport:
    method: str
    layers: LayerSelection
    provenance: dict = field(default_factory=dict)  # tensor name -> description
    residual_spectrum: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def teacher_derived(self):
        return [name for name, how in self.provenance.items() if not how.startswith("random")]

    def format(self):
        lines = [f"method: {self.method}", f"layer strategy: {self.layers.strategy}",
                 "layer mapping (student <- teacher): "
                 + (", ".join(f"{s}<-{t}" for s, t in self.layers.mapping) or "none")]
        if self.residual_spectrum.size:
            total = float(np.sum(self.residual_spectrum ** 2))
            lines.append(f"discarded singular values: {self.residual_spectrum.size} "
                         f"(energy {total:.6g}, largest {self.residual_spectrum.max():.6g})")
        lines.append("tensors:")
        width = max(len(n) for n in self.provenance)
        for name, how in self.provenance.items():
            lines.append(f"  {name:<{width}}  {how}")
        return "\n".join(lines) + "\n"


def check_compatible(student, teacher, tokenizer_student=None, tokenizer_teacher=None):
    """Raise ConfigMismatch naming the first violated dimension constraint."""
    for label, s, t in (("d_S <= d_T", student.d_model, teacher.d_model),
                        ("n_S <= n_T", student.num_layers, teacher.num_layers),
                        ("h_S <= h_T", student.num_heads, teacher.num_heads),
                        ("l_S <= l_T", student.head_dim, teacher.head_dim),
                        ("f_S <= f_T", student.ffn_dim, teacher.ffn_dim)):
        if s > t:
            raise ConfigMismatch(f"{label} violated ({s} > {t})")
    if student.vocab_size != teacher.vocab_size:
        raise ConfigMismatch(f"vocab sizes differ ({student.vocab_size} != {teacher.vocab_size})")
    if student.context_len != teacher.context_len:
        raise ConfigMismatch(f"context lengths differ ({student.context_len} != {teacher.context_len})")
    if tokenizer_student is not None and tokenizer_student != tokenizer_teacher:
        raise ConfigMismatch(f"tokenizers differ ({tokenizer_student} != {tokenizer_teacher})")


def pca_projection(teacher):
    """Top-d right singular vectors of the row-stacked [E_T; P_T] table.

    Returns (M with all d_T columns, singular values); callers slice M[:, :d_S].
    """
    stacked = np.vstack([teacher.embed, teacher.pos]).astype(np.float64)
    _, sigma, v = linalg.svd(stacked)
    return v, sigma


def _heads(w, h, l):
    """View a d x (h*l) head-major projection as d x h x l."""
    return w.reshape(w.shape[0], h, l)


def _select_block(tb, sel, tcfg, scfg, qkv=None):
    """Uniform selection of one teacher block; ``qkv`` overrides the first-dim step for Q/K/V."""
    D, Dh, H, F = sel.D, sel.D_h, sel.H, sel.F
    out = {}
    for z in ("wq", "wk", "wv"):
        w = _heads(getattr(tb, z), tcfg.num_heads, tcfg.head_dim)
        w = qkv[z] if qkv is not None else w[D]
        out[z] = w[:, H][:, :, Dh].reshape(scfg.d_model, scfg.d_model)
    wo = tb.wo.reshape(tcfg.num_heads, tcfg.head_dim, tcfg.d_model)
    out["wo"] = wo[np.ix_(H, Dh, D)].reshape(scfg.d_model, scfg.d_model)
    out["w1"] = tb.w1[np.ix_(D, F)]
    out["b1"] = tb.b1[F]
    out["w2"] = tb.w2[np.ix_(F, D)]
    out["b2"] = tb.b2[D]
    out["norm1"] = tb.norm1[D]
    out["norm2"] = tb.norm2[D]
    return {k: np.ascontiguousarray(v, dtype=tb.wq.dtype) for k, v in out.items()}


def _start(student_config, teacher, seed, method, layers):
    check_compatible(student_config, teacher.config)
    # output dtype follows the teacher's
    ckpt = random_init(student_config, seed, tokenizer=teacher.tokenizer).astype(teacher.embed.dtype)
    report = InitReport(method, layers)
    for name in ckpt.tensors():
        report.provenance[name] = f"random(seed={seed})"
    return ckpt, report


def _assign_block(ckpt, report, s_layer, values, how):
    blk = ckpt.blocks[s_layer]
    for name, value in values.items():
        setattr(blk, name, value)
        report.provenance[f"block.{s_layer}.{name}"] = how(name)


def _default_layers(layers, student_config, teacher):
    if layers is None:
        return select_layers("top", student_config.num_layers, teacher.config.num_layers)
    for s, t in layers.mapping:
        if s >= student_config.num_layers or t >= teacher.config.num_layers:
            raise ConfigMismatch(f"layer pair ({s}, {t}) out of range")
    return layers


def guide_init(teacher, student_config, layers=None, seed=0):
    """Initialize a student from ``teacher`` with the PCA bridge; returns (Checkpoint, InitReport).

    The teacher's first-block attention norm scale g is folded into the
    projected Q/K/V weights (M^T diag(g) W), and the student's scale is left
    at 1, so with equal dimensions the student's first-block queries, keys
    and values match the teacher's exactly.
    """
    layers = _default_layers(layers, student_config, teacher)
    ckpt, report = _start(student_config, teacher, seed, "guide", layers)
    tcfg, scfg = teacher.config, student_config
    sel = IndexSelection.between(scfg, tcfg)

    m_full, sigma = pca_projection(teacher)
    m = m_full[:, :scfg.d_model]
    report.residual_spectrum = sigma[scfg.d_model:]
    dtype = teacher.embed.dtype
    ckpt.embed = (teacher.embed.astype(np.float64) @ m).astype(dtype)
    ckpt.pos = (teacher.pos.astype(np.float64) @ m).astype(dtype)
    report.provenance["embed"] = "teacher embed @ M (PCA projection)"
    report.provenance["pos"] = "teacher pos @ M (PCA projection)"

    for s_layer, t_layer in layers.mapping:
        tb = teacher.blocks[t_layer]
        if s_layer == 0:
            g = tb.norm1.astype(np.float64)[:, None]
            qkv = {z: _heads(m.T @ (g * getattr(tb, z).astype(np.float64)),
                             tcfg.num_heads, tcfg.head_dim)
                   for z in ("wq", "wk", "wv")}
            values = _select_block(tb, sel, tcfg, scfg, qkv=qkv)
            values["norm1"] = np.ones(scfg.d_model, dtype=dtype)

            def how(name, t=t_layer):
                if name in ("wq", "wk", "wv"):
                    return f"M^T diag(norm1) teacher block.{t}.{name}, heads H, dims D_h"
                if name == "norm1":
                    return "ones (teacher scale folded into wq/wk/wv)"
                return f"uniform select teacher block.{t}.{name}"
        else:
            values = _select_block(tb, sel, tcfg, scfg)

            def how(name, t=t_layer):
                return f"uniform select teacher block.{t}.{name}"
        _assign_block(ckpt, report, s_layer, values, how)
    return ckpt.validate(), report


def lowrank_embed_init(teacher, student_config, seed=0):
    """Embedding = top-d_S eigenvectors of E_T E_T^T scaled by sqrt(eigenvalue).

    The Gram matrix is never formed: its eigenpairs are the left singular
    vectors of E_T and the squared singular values.
    """
    layers = select_layers(EMBED_ONLY, student_config.num_layers, teacher.config.num_layers)
    ckpt, report = _start(student_config, teacher, seed, "lowrank-embed", layers)
    u, sigma, _ = linalg.svd(teacher.embed.astype(np.float64))
    d = student_config.d_model
    factor = np.zeros((u.shape[0], d))
    k = min(d, sigma.size)
    factor[:, :k] = u[:, :k] * sigma[:k]
    ckpt.embed = factor.astype(teacher.embed.dtype)
    report.residual_spectrum = sigma[k:]
    report.provenance["embed"] = "U_d sqrt(Lambda_d) of teacher embed Gram matrix"
    return ckpt.validate(), report


def uniform_init(teacher, student_config, layers=None, seed=0):
    layers = _default_layers(layers, student_config, teacher)
    ckpt, report = _start(student_config, teacher, seed, "uniform", layers)
    sel = IndexSelection.between(student_config, teacher.config)
    ckpt.embed = np.ascontiguousarray(teacher.embed[:, sel.D])
    ckpt.pos = np.ascontiguousarray(teacher.pos[:, sel.D])
    report.provenance["embed"] = "uniform select teacher embed[:, D]"
    report.provenance["pos"] = "uniform select teacher pos[:, D]"
    for s_layer, t_layer in layers.mapping:
        values = _select_block(teacher.blocks[t_layer], sel, teacher.config, student_config)
        _assign_block(ckpt, report, s_layer, values,
                      lambda name, t=t_layer: f"uniform select teacher block.{t}.{name}")
    return ckpt.validate(), report


METHODS = ("random", "guide", "uniform", "lowrank-embed")


def initialize(method, teacher, student_config, layers=None, seed=0, tokenizer=None):
    """Dispatch by method name; ``random`` ignores ``teacher`` (which may be None)."""
    if method == "random":
        tok = tokenizer or (teacher.tokenizer if teacher is not None else DEFAULT_TOKENIZER)
        ckpt = random_init(student_config, seed, tokenizer=tok)
        report = InitReport("random", layers or select_layers(EMBED_ONLY, 1, 1))
        report.provenance = {name: f"random(seed={seed})" for name in ckpt.tensors()}
        return ckpt, report
    if teacher is None:
        raise ConfigMismatch(f"method {method!r} needs a teacher checkpoint")
    if method == "guide":
        return guide_init(teacher, student_config, layers, seed)
    if method == "uniform":
        return uniform_init(teacher, student_config, layers, seed)
    if method == "lowrank-embed":
        return lowrank_embed_init(teacher, student_config, seed)
    raise ConfigMismatch(f"unknown init method {method!r}")
