"""
Cosine-similarity attention on toy feature maps
===============================================

Two feature maps with the same shape are compared position by position. The
weight at a position is the cosine of the angle between the two channel
vectors found there, and it scales the first map's features.
"""

import numpy as np
import torch

from priornet.network import csam_apply, csam_weights

rng = np.random.default_rng(0)

# one sample, 8 channels, a 4 x 4 grid
target = torch.from_numpy(rng.normal(size=(1, 8, 4, 4)))
template = target.clone()

# flip the template's features in the top-left corner and scramble the
# bottom row, so agreement varies across the grid
template[..., 0, 0] *= -1
template[..., 3, :] = torch.from_numpy(rng.normal(size=(1, 8, 4)))

w = csam_weights(target, template)
print("attention weights:")
print(np.round(w[0].numpy(), 3))

# identical vectors give 1, opposite vectors give -1
assert w[0, 1, 1] == 1.0 and abs(w[0, 0, 0] + 1.0) < 1e-12

# scaling either map leaves the weights unchanged
assert torch.allclose(csam_weights(3.0 * target, 0.5 * template), w)

gated = csam_apply(target, w)
print("feature norm before / after gating, bottom row:")
print(np.round(target[0, :, 3].norm(dim=0).numpy(), 3))
print(np.round(gated[0, :, 3].norm(dim=0).numpy(), 3))
