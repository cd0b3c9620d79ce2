"""Tour of the point-set mixing operators on a toy cloud.

Builds a small random cloud, then runs the same softmax mixing layer over
three different index structures: the forward kNN map (intra-set), its
inverse (inter-set), and a cross-resolution map from farthest point
sampling (hierarchical-set). Finishes with the two properties that motivate
the softmax design: permutation invariance, and the permutation *variance*
of the token-mixing alternative.
"""

import numpy as np

from pointmixer import geom, mixer, nn
from pointmixer.autodiff import Tensor

rng = np.random.default_rng(0)
points = rng.uniform(-1.0, 1.0, (24, 3))
features = Tensor(rng.normal(size=(24, 8)))

# one shared parameter set for every usage of the layer
store = nn.ParamStore()
params = mixer.PointMixerParams.create(store, "mix", 8, nn.Rng(0))
print(f"layer parameters: {store.param_count()}")

# intra-set: each point mixes with its own k nearest neighbors
fwd = geom.knn(points, points, k=4)
y_intra = mixer.intra_set_mix(features, points, fwd, params)
print(f"intra-set output:  {y_intra.shape},  first row {np.round(y_intra.data[0, :3], 4)}")

# inter-set: each point mixes with every point whose neighborhood contains it
inv = geom.invert_map(fwd)
print(f"inverse rows vary in length: {sorted(set(inv.row_lengths().tolist()))}")
y_inter = mixer.inter_set_mix(features, points, inv, params)
print(f"inter-set output:  {y_inter.shape}")

# hierarchical-set: same equations across a resolution change, both ways
hier = geom.build_hierarchy(points, ratios=[0.25], k=4)
level = hier.levels[1]
down = mixer.hier_down_mix(features, points, level.positions, level.down_map, params)
print(f"down-sampled to {level.n} points: {down.shape}")
up = mixer.hier_up_mix(down, level.positions, points, level.down_inverse, params,
                       skip=features, fallback=level.up_fallback)
print(f"up-sampled back (skip added): {up.shape}")

# permutation invariance: permute the cloud, rebuild the map, compare
perm = rng.permutation(24)
fwd_p = geom.knn(points[perm], points[perm], k=4)
y_perm = mixer.intra_set_mix(Tensor(features.data[perm]), points[perm], fwd_p, params)
drift = np.max(np.abs(y_perm.data - y_intra.data[perm]))
print(f"permutation drift of the softmax layer: {drift:.2e} (invariant)")

# token-mixing MLPs are order-sensitive: shuffling neighbors changes the output
tstore = nn.ParamStore()
token = mixer.TokenMlpParams.create(tstore, "tok", 8, 4, nn.Rng(1))
y_tok = mixer.variant_mix(features, points, fwd, token)
shuffled = fwd.indices.copy()
for row in shuffled:
    rng.shuffle(row)
y_tok_shuffled = mixer.variant_mix(features, points, geom.NeighborMap(shuffled, 24), token)
print(f"token-MLP drift under neighbor reordering: "
      f"{np.max(np.abs(y_tok_shuffled.data - y_tok.data)):.2e} (variant)")
