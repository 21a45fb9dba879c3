"""
Whitening and spatial NMS at evaluation time
============================================

Sum pooling needs no training, which keeps this one fast.
"""

import numpy as np

from netvlad.encoders import PoolEncoder
from netvlad.evaluation import evaluate, spatial_nms
from netvlad.geodata import WorldConfig, generate_world, split_geographic
from netvlad.postprocess import fit_whitening

train, _, test = split_geographic(generate_world(WorldConfig()))
enc = PoolEncoder("sum")

# learn PCA whitening on the training split only
w = fit_whitening(enc.encode(train.descriptors), 16)
print("top eigenvalues:", np.round(w.eigenvalues[:4], 4))

for label, kw in (("raw", {}), ("whitened", {"whitening": w}), ("whitened+nms", {"whitening": w, "nms_radius": 10.0})):
    curve = evaluate(test, enc, **kw).curve
    print(f"{label:13s}", " ".join(f"@{n}:{r:.3f}" for n, r in zip(curve.n_values, curve.recall)))

###############################################################################
# NMS keeps the best-ranked item of each 10 m neighbourhood.

pos = {"a": (0, 0), "b": (4, 0), "c": (40, 0)}
print(spatial_nms([("b", 0.1), ("a", 0.2), ("c", 0.3)], pos, 10.0))
