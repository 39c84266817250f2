"""
Reverse-mode gradients on small arrays
======================================

Build a tiny expression, run backward, and compare with central
differences.
"""

import numpy as np

from fast_stg import tensor as tn

rng = np.random.default_rng(0)
W = tn.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
x = rng.standard_normal((5, 4))

# a softmax over a matmul, then a weighted sum to get a scalar
weights = rng.standard_normal((5, 3))
loss = tn.sum(tn.softmax_rows(tn.matmul(x, W)) * weights)
loss.backward()
print("loss", loss.item())
print("dL/dW\n", W.grad)

f = lambda: float((tn.softmax_rows(x @ W.data).data * weights).sum())
numeric = tn.numerical_grad(f, W.data)
print("max abs difference to finite differences:", np.abs(W.grad - numeric).max())

# RMSNorm only cares about direction, so scaling a row leaves it unchanged
row = rng.standard_normal((1, 6))
print(tn.rmsnorm(row, np.ones(6)).data)
print(tn.rmsnorm(10 * row, np.ones(6)).data)
