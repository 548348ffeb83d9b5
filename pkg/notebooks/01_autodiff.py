"""
Reverse-mode differentiation on numpy arrays
=============================================

The package carries its own small autodiff engine. Every op records how to
push gradients back to its inputs; ``backward`` walks the graph once.
"""

import numpy as np

from adaptermix import numerics as nx
from adaptermix.numerics import Tensor

rng = np.random.default_rng(0)

# A leaf that wants gradients, and one that does not.
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)))

y = nx.softmax_rows(x @ w)
loss = nx.sum_all(nx.mul(y, Tensor(rng.normal(size=(4, 2)))))
nx.backward(loss)

print("loss", loss.item())
print("dloss/dx\n", x.grad)
print("w has no gradient:", w.grad is None)

###############################################################################
# Central differences agree with the backward pass.

h = 1e-5
flat = x.data.reshape(-1)
numeric = np.zeros_like(flat)
probe = Tensor(rng.normal(size=(4, 2)))
x.grad = None
nx.backward(nx.sum_all(nx.mul(nx.softmax_rows(x @ w), probe)))


def value():
    return nx.sum_all(nx.mul(nx.softmax_rows(Tensor(x.data) @ w), probe)).item()


for i in range(flat.size):
    orig = flat[i]
    flat[i] = orig + h
    up = value()
    flat[i] = orig - h
    down = value()
    flat[i] = orig
    numeric[i] = (up - down) / (2 * h)

print("max abs difference:", np.max(np.abs(numeric.reshape(x.shape) - x.grad)))

###############################################################################
# Attention works on stacked utterances. Rows only attend inside their own
# segment, so two sequences can share one matrix.

q = k = v = Tensor(rng.normal(size=(5, 4)))
joint = nx.attention(q, k, v, n_heads=2, segments=[(0, 2), (2, 5)]).data
alone = nx.attention(Tensor(q.data[:2]), Tensor(k.data[:2]), Tensor(v.data[:2]), 2, [(0, 2)]).data
print("segments are independent:", np.allclose(joint[:2], alone, atol=1e-12))
