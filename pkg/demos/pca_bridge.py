# The PCA bridge: a student built from a teacher's embedding table sees, in
# its first block, the same queries, keys and values the teacher would.
import numpy as np

from guide_init import ModelConfig, forward, guide_init, random_init, select_layers
from guide_init.initializers import pca_projection

teacher_cfg = ModelConfig(d_model=32, num_layers=2, num_heads=4, head_dim=8, ffn_dim=64,
                          vocab_size=50, context_len=16)
teacher = random_init(teacher_cfg, seed=0)
# give the first block a non-trivial norm gain, as a trained model would have
rng = np.random.default_rng(0)
teacher.blocks[0].norm1 = (1 + 0.3 * rng.standard_normal(32)).astype(np.float32)

tokens = rng.integers(0, 50, (2, 16))

# same dimensions: M is a rotation, and the first block is reproduced
student, report = guide_init(teacher, teacher_cfg, select_layers("top", 2, 2))
t = forward(teacher, tokens, capture_trace=True)
s = forward(student, tokens, capture_trace=True)
print("identity dims, max |Q_S - Q_T|:", np.abs(s.queries[0] - t.queries[0]).max())
print("identity dims, max |A_S - A_T|:", np.abs(s.attention[0] - t.attention[0]).max())

# shrinking d: how much of the stacked [E; P] table survives the projection
m, sigma = pca_projection(teacher)
stacked = np.vstack([teacher.embed, teacher.pos]).astype(np.float64)
for d in (32, 24, 16, 8):
    recon = stacked @ m[:, :d] @ m[:, :d].T
    kept = np.sum(sigma[:d] ** 2) / np.sum(sigma ** 2)
    print(f"d_S={d:2d}  energy kept {kept:.3f}  reconstruction error "
          f"{np.linalg.norm(recon - stacked) / np.linalg.norm(stacked):.3f}")

student_cfg = ModelConfig(16, 2, 2, 8, 32, 50, 16)
student, report = guide_init(teacher, student_cfg)
print()
print(report.format())
