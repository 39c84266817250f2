"""
How much does a attention lose?
===============================

Agent attention routes every node through a agent tokens, so its
effective N x N map has rank at most a. The best any rank-a map can do
is set by the singular values of the features. We measure both.
"""

import numpy as np

from fast_stg.analysis import eckart_young_lower_bound, layer_fidelity, nystrom_upper_first_term
from fast_stg.data import synth_generate
from fast_stg.model import ModelConfig
from fast_stg.sweeps import eval_batch
from fast_stg.training import TrainConfig, train

ds = synth_generate(N=16, days=14, seed=0)

for a in (2, 4, 8):
    cfg = ModelConfig(N=16, T=24, P=12, d=16, e=4, a=a, L=2, steps_per_day=96)
    res = train(cfg, TrainConfig(max_epochs=5, seed=0), ds)
    batch = eval_batch(res.model, res.normalizer, ds, res.train_cfg.split)
    _, trace = res.model(batch.X, batch.tod, batch.dow)
    for lf in layer_fidelity(trace, a):
        print(f"a={a} layer {lf.layer}: eps {lf.epsilon:.3f}  best rank-a {lf.lower_bound:.3f}  "
              f"spectral term {lf.upper_first_term:.3f}")

# the bound itself on a matrix with known singular values 2, 1, 0
U = np.linalg.qr(np.random.default_rng(0).standard_normal((5, 5)))[0]
H = U[:, :3] @ np.diag([2.0, 1.0, 0.0])
print("bound at a=1:", eckart_young_lower_bound(H, 1), "expected", 1 / np.sqrt(5))
# the spectral term uses Gram eigenvalues (sigma squared), so it is not scale
# free and can exceed 1 on features with large singular values
print("spectral term at a=1:", nystrom_upper_first_term(H, 1))
