"""
Expert-choice routing in a mixture of adapters
===============================================

Each adapter picks its own top-k tokens by affinity. A token can be picked by
several adapters or by none; the picked tokens pass through the adapter
and come back scaled by their affinity.
"""

import numpy as np

from adaptermix.adapters import MixtureOfAdapters, compute_k, moa_forward, route
from adaptermix.numerics import Tensor

rng = np.random.default_rng(1)
d, n = 8, 10

moa = MixtureOfAdapters(d, r=4, n_adapters=4, capacity=1.0, rng=rng)
moa.w_g.data = rng.normal(size=moa.w_g.shape)  # sharpen the router for the demo
h = Tensor(rng.normal(size=(n, d)))

plan = route(moa, h)
print("k =", plan.k, "=", compute_k(n, 1.0, 4))
for i, (idx, gates) in enumerate(zip(plan.indices, plan.gates)):
    print(f"adapter {i}: tokens {idx.tolist()}  gates {np.round(gates, 3).tolist()}")

counts = np.bincount(plan.indices.ravel(), minlength=n)
print("times each token was picked:", counts.tolist())

###############################################################################
# Up-projections start at zero, so a fresh mixture is exactly the identity.

print("identity at init:", np.array_equal(moa_forward(moa, h).data, h.data))

###############################################################################
# Capacity scales the work: k = floor(n * c / N), clamped to [1, n].

for c in (0.5, 1.0, 2.0, 4.0):
    print(f"c={c}: k={compute_k(n, c, 4)}, token slots={4 * compute_k(n, c, 4)}")

###############################################################################
# With one adapter and c=1 every token is routed with gate 1, which is the
# plain residual adapter.

single = MixtureOfAdapters(d, 4, 1, 1.0, rng)
single.adapters[0].w_up.data = rng.normal(size=single.adapters[0].w_up.shape)
diff = moa_forward(single, h).data - single.adapters[0](h).data
print("single-adapter reduction, max abs diff:", np.max(np.abs(diff)))
