"""
A synthetic geotagged world
===========================

Generates the standard desk-scale world, splits it geographically and
builds the weakly supervised training tuples.
"""

import numpy as np

from netvlad.geodata import WorldConfig, build_tuples, generate_world, min_cross_distance, split_geographic

world = generate_world(WorldConfig())
print(len(world), "images;", "descriptor maps", world.descriptors.shape[1:])

train, val, test = split_geographic(world)
for name, s in zip(("train", "val", "test"), (train, val, test)):
    print(f"{name:5s} {len(s):4d} images, {len(np.unique(s.place_ids))} places")
print("train/test gap: %.1f m" % min_cross_distance(train.positions, test.positions))

###############################################################################
# Potential positives are within 10 m and a month apart, definite negatives
# beyond 25 m.

tuples = build_tuples(train)
t = tuples[0]
print(t.query_id, "positives:", t.positive_ids, "negatives:", len(t.negative_ids))

# without the time machine every image of a place shares one date
flat = generate_world(WorldConfig(time_machine=False))
print("dates per place:", len(np.unique(flat.timestamps[flat.place_ids == 0])))
