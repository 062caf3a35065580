"""Acceptance criteria 1-8. Each check records a PASS/FAIL line that is
printed in the terminal summary, then asserts.

Criteria 6-8 train a desk-scale teacher and 36 students (about two hours on
one CPU core the first time). Runs are cached under $GUIDE_DESK_DIR
(default: desk_runs/ at the repository root), keyed by settings and source
hash, so later invocations only re-run the determinism check.
"""
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from guide_init import checkpoint as ck
from guide_init.checkpoint import ModelConfig
from guide_init.experiment import (ABLATION_CELLS, ORDERING_CELLS, DeskExperiment,
                                   mean_final_ppl, mean_initial_ppl)
from guide_init.initializers import guide_init, lowrank_embed_init, pca_projection
from guide_init.selection import evenly_spaced_indices, select_layers, uniform_select
from guide_init.training import gap_reduction
from guide_init.transformer import forward, loss_and_grads

from conftest import random_model, record

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# published results: (baseline ppl, teacher ppl, [(student ppl, printed gap reduction)])
RESULTS = {
    "400M student": (15.915, 9.621, [(15.967, -0.82), (14.458, 23.15), (14.498, 22.51),
                                 (14.245, 26.53)]),
    "1B student": (13.382, 9.621, [(14.088, -18.77), (12.459, 24.54), (12.491, 23.70),
                               (12.438, 25.11)]),
    "400M distillation": (15.915, 9.621, [(15.154, 12.10), (14.246, 26.53), (13.662, 35.80)]),
    "1B distillation": (13.382, 9.621, [(12.636, 19.86), (12.438, 25.11), (11.813, 41.73)]),
    "400M layer strategies": (15.915, 9.621, [(14.453, 23.24), (14.246, 26.53), (14.317, 25.40),
                                        (14.268, 26.18), (14.356, 24.79), (14.509, 22.35),
                                        (15.501, 6.58)]),
    "1B layer strategies": (13.382, 9.621, [(12.866, 13.73), (12.438, 25.12), (12.612, 20.50),
                                      (12.505, 23.34), (12.609, 20.58), (12.630, 20.01),
                                      (14.037, -17.40)]),
}


def test_criterion_1_gap_reduction_arithmetic():
    worst, cells = 0.0, 0
    for baseline, teacher, rows in RESULTS.values():
        for ppl, printed in rows:
            worst = max(worst, abs(gap_reduction(ppl, baseline, teacher) - printed))
            cells += 1
    ok = worst <= 0.15
    record(1, ok, f"{cells} published gap-reduction cells, worst deviation {worst:.4f} pp (tol 0.15)")
    assert ok


def test_criterion_2_identity_dimension_equivalence():
    cfg = ModelConfig(32, 2, 4, 8, 64, 40, 12)
    worst = {"input": 0.0, "Q": 0.0, "K": 0.0, "V": 0.0, "scores": 0.0, "attention": 0.0}
    for seed in range(12):
        teacher = random_model(cfg, seed)
        student, _ = guide_init(teacher, cfg, select_layers("top", 2, 2), seed=seed)
        tokens = np.random.default_rng(100 + seed).integers(0, cfg.vocab_size, (3, cfg.context_len))
        t = forward(teacher, tokens, capture_trace=True)
        s = forward(student, tokens, capture_trace=True)
        m = pca_projection(teacher)[0]
        compressed = t.input_embeddings.astype(np.float64) @ m
        worst["input"] = max(worst["input"], np.abs(s.input_embeddings - compressed).max())
        for name, a, b in (("Q", s.queries[0], t.queries[0]), ("K", s.keys[0], t.keys[0]),
                           ("V", s.values[0], t.values[0]), ("attention", s.attention[0], t.attention[0])):
            assert a.dtype == np.float32
            worst[name] = max(worst[name], np.abs(a - b).max())
        scale = np.sqrt(cfg.head_dim)
        scores_s = np.einsum("bhqd,bhkd->bhqk", s.queries[0], s.keys[0]) / scale
        scores_t = np.einsum("bhqd,bhkd->bhqk", t.queries[0], t.keys[0]) / scale
        worst["scores"] = max(worst["scores"], np.abs(scores_s - scores_t).max())
    ok = all(v <= 1e-4 for v in worst.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    record(2, ok, f"12 random teachers, float32, max-abs student vs teacher: {detail} (tol 1e-4)")
    assert ok


def test_criterion_3_eckart_young():
    t_cfg = ModelConfig(8, 1, 1, 8, 8, 50, 2)
    rng = np.random.default_rng(3)
    worst_rel, beaten = 0.0, 0
    for trial in range(50):
        e = rng.standard_normal((50, 8))
        teacher = random_model(t_cfg, trial, np.float64).replace(embed=e)
        gram = e @ e.T
        lam = np.linalg.eigvalsh(gram)[::-1]
        d_s = trial % 7 + 1
        s_cfg = ModelConfig(d_s, 1, 1, d_s, d_s, 50, 2)
        student, _ = lowrank_embed_init(teacher, s_cfg)
        objective = np.linalg.norm(student.embed @ student.embed.T - gram)
        tail = np.sqrt(np.sum(lam[d_s:] ** 2))
        worst_rel = max(worst_rel, abs(objective - tail) / tail)
        rivals = [uniform_select(e, (50, d_s))]
        rivals += [rng.standard_normal((50, d_s)) * rng.uniform(0.1, 3) for _ in range(100)]
        beaten += sum(np.linalg.norm(r @ r.T - gram) < objective for r in rivals)
    ok = worst_rel <= 1e-6 and beaten == 0
    record(3, ok, f"50 embeddings 50x8, d_S 1..7: worst relative gap to spectral tail {worst_rel:.2e} "
                  f"(tol 1e-6), {beaten} of 5050 rivals beat it")
    assert ok


def brute_force_indices(m, n):
    out = []
    for k in range(m):
        x = Fraction(k * (n - 1), m - 1)
        lo = x.numerator // x.denominator
        out.append(lo if x - lo <= Fraction(1, 2) else lo + 1)
    return out


def test_criterion_4_evenly_spaced_oracle():
    bad = []
    for n in range(2, 65):
        for m in range(2, n + 1):
            got = evenly_spaced_indices(m, n)
            ok = (got == brute_force_indices(m, n) and got[0] == 0 and got[-1] == n - 1
                  and len(got) == m and all(a < b for a, b in zip(got, got[1:])))
            if not ok:
                bad.append((m, n))
    record(4, not bad, f"all 2016 (m, n) pairs with 1 < m <= n <= 64, {len(bad)} mismatches")
    assert not bad


CLASSES = {
    "embed": ("embed",), "pos": ("pos",), "qkv": ("wq", "wk", "wv"), "wo": ("wo",),
    "mlp": ("w1", "w2"), "bias": ("b1", "b2"), "norm": ("norm1", "norm2", "final_norm"),
    "unembed": ("unembed",),
}


def test_criterion_5_finite_differences():
    # Gate at eps=1e-5. At eps=1e-3 the O(eps^2) truncation term alone exceeds
    # 1e-4 relative on small-gradient coordinates; those numbers are reported too.
    cfg = ModelConfig(8, 2, 2, 4, 16, 11, 6)
    ckpt = random_model(cfg, 0, np.float64)
    rng = np.random.default_rng(5)
    tokens = rng.integers(0, cfg.vocab_size, (3, cfg.context_len))
    teacher_logits = forward(random_model(cfg, 1, np.float64), tokens).logits
    _, grads = loss_and_grads(ckpt, tokens, teacher_logits, alpha=0.5)
    tensors = ckpt.tensors()

    def central(t, idx, eps):
        keep = t[idx]
        t[idx] = keep + eps
        up = loss_and_grads(ckpt, tokens, teacher_logits, alpha=0.5)[0].total
        t[idx] = keep - eps
        down = loss_and_grads(ckpt, tokens, teacher_logits, alpha=0.5)[0].total
        t[idx] = keep
        return (up - down) / (2 * eps)

    def rel(fd, an):
        return abs(fd - an) / max(abs(fd), abs(an), 1e-8)

    worst, coarse = {}, {}
    for cls, leaves in CLASSES.items():
        names = [n for n in tensors if n.rsplit(".", 1)[-1] in leaves]
        sizes = np.array([tensors[n].size for n in names])
        errs, errs_coarse = [], []
        for _ in range(100):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            t = tensors[name]
            idx = np.unravel_index(rng.integers(t.size), t.shape)
            errs.append(rel(central(t, idx, 1e-5), grads[name][idx]))
            errs_coarse.append(rel(central(t, idx, 1e-3), grads[name][idx]))
        worst[cls], coarse[cls] = max(errs), max(errs_coarse)
    ok = all(v <= 1e-4 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(5, ok, f"100 coordinates per class, d=8 n=2, float64, eps=1e-5, worst relative error: "
                  f"{detail} (tol 1e-4); at eps=1e-3 worst {max(coarse.values()):.1e}, "
                  f"median-class {np.median(list(coarse.values())):.1e}")
    assert ok


@pytest.fixture(scope="module")
def desk():
    workdir = os.environ.get("GUIDE_DESK_DIR", os.path.join(ROOT, "desk_runs"))
    return DeskExperiment(workdir)


def test_criterion_6_desk_ordering(desk):
    start = time.time()
    runs = desk.sweep(ORDERING_CELLS)
    final = {c: mean_final_ppl(runs[c]) for c in ORDERING_CELLS}
    teacher = desk.teacher_ppl()
    table = ", ".join(f"{c} {v:.3f}" for c, v in final.items())
    checks = [
        ("guide < uniform-1-layer < random",
         final["guide"] < final["uniform-1-layer"] < final["random"]),
        ("guide+kd < kd", final["guide+kd"] < final["kd"]),
        ("guide+kd < guide", final["guide+kd"] < final["guide"]),
    ]
    for label, ok in checks:
        record(6, ok, f"{label} (mean final eval ppl, 3 seeds: {table}; teacher {teacher:.3f})")
    record(6, True, f"sweep wall time this session {time.time() - start:.0f}s (cached runs reused)")
    assert all(ok for _, ok in checks)


def test_criterion_6_step_zero(desk):
    runs = desk.sweep(("random", "guide"))
    initial = {c: mean_initial_ppl(runs[c]) for c in runs}
    per_seed = ", ".join(f"{g.records[0].eval_ppl:.1f} vs {r.records[0].eval_ppl:.1f}"
                         for g, r in zip(runs["guide"], runs["random"]))
    ok = initial["guide"] < initial["random"]
    record(6, ok, f"step-0 eval ppl guide {initial['guide']:.2f} < random {initial['random']:.2f} "
                  f"(per seed guide vs random: {per_seed})")
    assert ok


def test_criterion_7_layer_ablation(desk):
    runs = desk.sweep(ABLATION_CELLS)
    final = {c: mean_final_ppl(runs[c]) for c in ABLATION_CELLS}
    table = ", ".join(f"{c} {v:.3f}" for c, v in final.items())
    ok = final["guide-first-n"] >= final["guide"]
    record(7, ok, f"first-n does not beat top ({table})")
    assert ok


def test_criterion_8_determinism_and_roundtrip(desk, tmp_path):
    teacher = desk.teacher()
    path = tmp_path / "teacher.ckpt"
    ck.save(teacher, path)
    loaded = ck.load(path)
    exact = loaded.digest() == teacher.digest() and all(
        np.array_equal(a, b) and a.dtype == b.dtype
        for a, b in zip(loaded.tensors().values(), teacher.tensors().values()))
    record(8, exact, f"teacher checkpoint save/load bit-exact ({path.stat().st_size} bytes)")

    a = desk.run_cell("random", 0, use_cache=False)
    b = desk.run_cell("random", 0, use_cache=False)

    def rows(m):
        return [repr((r.step, r.train_loss, r.eval_loss, r.eval_ppl, r.clip_events)) for r in m.records]
    same = rows(a) == rows(b) and a.total_losses == b.total_losses
    record(8, same, f"two fresh runs of random/seed 0 give identical MetricLogs "
                    f"({len(a.records)} records, {len(a.total_losses)} step losses)")
    assert exact and same
