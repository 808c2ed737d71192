"""Discrete MI oracles next to the trainable contrastive bound.

First the exact plug-in values on small tables, including the chain-rule
identity the objective is built on. Then a critic learns the MI of a
correlated Gaussian pair and is compared with the closed form. The
benchmark used for acceptance runs 2000 steps; this one runs 400.

    python demos/mi_oracles.py
"""
import numpy as np

from tempalign.checks import mi_bench
from tempalign.mi import cmi_discrete, decomposition_residual, mi_discrete

print("fair copied bit      I =", round(mi_discrete([[0.5, 0], [0, 0.5]]), 6), "(ln 2 = 0.693147)")
print("noisy copy           I =", round(mi_discrete([[0.4, 0.1], [0.1, 0.4]]), 6))
same = np.zeros((2, 2, 2))
same[0, 0, 0] = same[1, 1, 1] = 0.5
print("a=b=c, I(a;b|c)        =", cmi_discrete(same))

rng = np.random.default_rng(0)
worst = max(decomposition_residual((p := rng.uniform(size=(4, 4, 4))) / p.sum()) for _ in range(50))
print(f"chain-rule residual over 50 random tables: {worst:.1e}")

for row in mi_bench(rhos=(0.5, 0.9), steps=400, log=None):
    print(f"rho={row.rho}: estimate {row.estimate:.3f} nats, exact {row.truth:.3f}, "
          f"ceiling log B = {row.log_b:.3f}")
