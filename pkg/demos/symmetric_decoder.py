"""Why the decoder is symmetric: stored inverse maps instead of new searches.

Runs the same dense network twice, once with hierarchical mixing (the
decoder replays inverted down-sampling maps) and once as the asymmetric
baseline (max-pool down, 3-nearest trilinear up). The instrumented kNN
counter shows the baseline searching during decode while the symmetric
design does not, and a reachability pass compares their receptive fields.
"""

import numpy as np

from pointmixer import geom, net, nn
from pointmixer.geom import PointCloud

rng = np.random.default_rng(3)
positions = rng.uniform(-1, 1, (96, 3))
cloud = PointCloud(positions, positions.copy())

for use_hier, label in ((True, "symmetric (inverse maps)"), (False, "asymmetric baseline")):
    cfg = net.NetworkConfig(
        levels=[net.LevelSpec(8, 1, 1.0), net.LevelSpec(16, 1, 0.25)],
        head=net.DenseHead(4), k=8, use_hier=use_hier,
    )
    network = net.build_network(cfg, nn.Rng(0))
    out = net.forward_dense(network, cloud)
    print(f"{label:<28} output {out.shape}, kNN searches during decode: "
          f"{network.last_decode_knn_calls}")

# the decoder's index structure is literally the inverted encoder map
cfg = net.NetworkConfig(levels=[net.LevelSpec(8, 1, 1.0), net.LevelSpec(16, 1, 0.25)],
                        head=net.DenseHead(4), k=8)
plan = net.build_network(cfg, nn.Rng(0)).prepare(positions)
level = plan.levels[1]
rebuilt = geom.invert_map(level.down_map)
print("decoder map == invert(encoder map):",
      np.array_equal(rebuilt.indices, level.down_inverse.indices))

# receptive fields: who can influence an up-sampled point?
hier = geom.build_hierarchy(positions, [0.25], k=16, start=geom.lexmin_index(positions))
lv = hier.levels[1]
inverse_sizes = [len(geom.up_influence_inverse(lv, q)) for q in range(96)]
trilinear_sizes = [len(geom.up_influence_trilinear(lv, positions, q)) for q in range(96)]
print(f"mean influence set, inverse-map up: {np.mean(inverse_sizes):.1f} points")
print(f"mean influence set, trilinear up:   {np.mean(trilinear_sizes):.1f} points")
