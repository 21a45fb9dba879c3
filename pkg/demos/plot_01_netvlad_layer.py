"""
The NetVLAD layer on a toy descriptor map
=========================================

Builds a small set of local descriptors, pools them with NetVLAD, and checks
the analytic backward pass against finite differences.
"""

import numpy as np

from netvlad import NetVladParams, netvlad_backward, netvlad_forward, vlad_hard
from netvlad.gradcheck import numeric_grad, relative_error

rng = np.random.default_rng(0)

# four anchors in 3-D and forty descriptors scattered around them
centers = rng.normal(size=(4, 3))
x = centers[rng.integers(4, size=40)] + 0.2 * rng.normal(size=(40, 3))

# w = 2 alpha c, b = -alpha |c|^2 gives the distance-based soft assignment
params = NetVladParams.from_centers(centers, alpha=10.0)
out, cache = netvlad_forward(x, params)
print("output length K*D =", out.shape[0], " norm =", np.linalg.norm(out))

# intra-normalized blocks, one per cluster
print("per-cluster norms:", np.linalg.norm(cache.intra[0], axis=1))

###############################################################################
# Backward pass: pick a random upstream gradient and compare with central
# differences on the anchors.

g = rng.normal(size=out.shape)
grads = netvlad_backward(cache, g)

c = np.array(params.c)
loss = lambda: float(g @ netvlad_forward(x, params.replace(c=c))[0])
print("relative error on dL/dc:", relative_error(grads.c, numeric_grad(loss, c)))

###############################################################################
# Hard VLAD is the large-alpha limit.

hard = vlad_hard(x, centers)
for alpha in (1.0, 10.0, 100.0, 1e4):
    soft = netvlad_forward(x, NetVladParams.from_centers(centers, alpha))[0]
    print(f"alpha={alpha:>7g}  max |soft - hard| = {np.abs(soft - hard).max():.2e}")
