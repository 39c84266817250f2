"""
One forward pass through the forecaster
=======================================

Random weights, random input. We look at what the trace records: routing
weights per layer and the two attention maps through the agent tokens.
"""

import numpy as np

from fast_stg import FaST, ModelConfig

cfg = ModelConfig(N=20, T=24, P=12, d=16, e=4, a=5, L=2, steps_per_day=96)
model = FaST(cfg, seed=0)
print(model.num_parameters(), "parameters")

rng = np.random.default_rng(1)
X = rng.standard_normal((3, cfg.N, cfg.T))
tod = np.array([0, 40, 95])
dow = np.array([0, 3, 6])
Y, trace = model(X, tod, dow)
print("forecast", Y.shape)

for layer, G in enumerate(trace.G):
    print(f"layer {layer}: routing {G.shape}, row sums in [{G.sum(-1).min():.12f}, {G.sum(-1).max():.12f}]")

# agents summarize N nodes into a rows, then hand the summary back
A_agg, A_dist = trace.A_agg[1], trace.A_dist[1]
print("aggregate", A_agg.shape, "distribute", A_dist.shape)
P = A_dist[0] @ A_agg[0]
print("rank of the effective N x N map:", np.linalg.matrix_rank(P), "<= a =", cfg.a)
