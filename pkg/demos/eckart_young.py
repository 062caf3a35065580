# Dot-product preserving embeddings: the best rank-d_S factor of E E^T is
# U_d sqrt(Lambda_d), and its error is the tail of the spectrum.
import numpy as np

from guide_init import ModelConfig, random_init, uniform_select
from guide_init.initializers import lowrank_embed_init

rng = np.random.default_rng(1)
# embeddings with a decaying spectrum, like a trained table
e = rng.standard_normal((200, 32)) * np.geomspace(3.0, 0.1, 32)
teacher = random_init(ModelConfig(32, 1, 4, 8, 64, 200, 4), 0).astype(np.float64).replace(embed=e)
gram = e @ e.T
lam = np.sort(np.linalg.eigvalsh(gram))[::-1]

print(" d_S   low-rank   spectral tail   uniform select")
for d in (2, 4, 8, 16, 24):
    heads = max(1, d // 8)
    student, _ = lowrank_embed_init(teacher, ModelConfig(d, 1, heads, d // heads, d, 200, 4))
    ours = np.linalg.norm(student.embed @ student.embed.T - gram)
    tail = np.sqrt(np.sum(lam[d:] ** 2))
    picked = uniform_select(e, (200, d))
    print(f"{d:4d} {ours:10.4f} {tail:15.4f} {np.linalg.norm(picked @ picked.T - gram):16.4f}")
