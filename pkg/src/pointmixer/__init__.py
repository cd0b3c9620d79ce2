"""Point-set mixing over kNN graphs and their inverses.

A numpy-based library implementing a softmax-normalized universal point-set
operator (intra-set, inter-set, and hierarchical-set mixing), comparison
operators (max-pool, vector attention, token-mixing MLPs), a symmetric
encoder-decoder network built on stored inverse maps, and a desk-scale
training harness with synthetic tasks and property-based verification.
"""

from . import autodiff, cloudio, config, geom, mixer, net, nn, tasks

__all__ = ["autodiff", "cloudio", "config", "geom", "mixer", "net", "nn", "tasks"]
__version__ = "0.1.0"
