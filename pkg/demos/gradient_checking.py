"""Verifying analytic gradients against central finite differences.

Every backward pass in the library is checked this way in the test suite;
this script walks through one example by hand: a full mixing block, probed
coordinate by coordinate at h = 1e-5, and what happens when a backward pass
is deliberately broken.
"""

import numpy as np

from pointmixer import autodiff, geom, mixer, nn
from pointmixer.autodiff import Tensor

rng = np.random.default_rng(0)
points = rng.uniform(-1, 1, (12, 3))
x = Tensor(rng.normal(size=(12, 5)), requires_grad=True)
probe = Tensor(rng.normal(size=(12, 5)))
fwd = geom.knn(points, points, 3)

store = nn.ParamStore()
block = mixer.MixerBlockParams.create(store, "blk", 5, nn.Rng(1))
params = [t for _, t in store.tensors()] + [x]
print(f"checking {sum(p.size for p in params)} coordinates "
      f"({store.param_count()} parameters + the input)")


def scalar_probe():
    return autodiff.reduce_sum(mixer.mixer_block(x, points, fwd, block) * probe)


err = nn.check_gradient(scalar_probe, params, h=1e-5)
print(f"max relative error, analytic vs central differences: {err:.3e}")

# a sign error in one backward is immediately visible
autodiff.inject_backward_fault("gelu")
broken = nn.check_gradient(scalar_probe, params, h=1e-5)
autodiff.inject_backward_fault(None)
print(f"same check with a sign-flipped GELU backward:        {broken:.3e}")
