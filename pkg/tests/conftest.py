import numpy as np
import pytest

from guide_init.checkpoint import ModelConfig, random_init

# criterion -> list of (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        results = ACCEPTANCE[criterion]
        ok = all(p for p, _ in results)
        for passed, detail in results:
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")
        if len(results) > 1:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {criterion} overall")


TINY = ModelConfig(d_model=8, num_layers=2, num_heads=2, head_dim=4, ffn_dim=16,
                   vocab_size=11, context_len=6)


@pytest.fixture
def tiny():
    return TINY


def noisy(ckpt, seed, scale=0.3):
    """Perturb every tensor so norms and biases are not trivially 1 or 0."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, t in ckpt.tensors().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("norm1", "norm2", "final_norm"):
            out[name] = (1.0 + scale * rng.standard_normal(t.shape)).astype(t.dtype)
        else:
            out[name] = (t + scale * rng.standard_normal(t.shape) * np.std(t + 1e-3)).astype(t.dtype)
    return type(ckpt).from_tensors(ckpt.config, out, ckpt.step, ckpt.tokenizer)


def random_model(config, seed, dtype=np.float32):
    return noisy(random_init(config, seed), seed + 7).astype(dtype)
