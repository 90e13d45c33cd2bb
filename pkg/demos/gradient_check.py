"""
Finite-difference gradient checks
=================================

Compares analytic gradients with central differences for a quadratic, the
soft Dice loss (whose gradient is derived by hand) and the whole network.
"""

import numpy as np
import torch

from priornet.cli import gradcheck_errors
from priornet.objectives import finite_difference_gradcheck, soft_dice_loss

rng = np.random.default_rng(1)

# sum of squares: central differences are exact up to round-off
err = finite_difference_gradcheck(lambda x: (x * x).sum(), rng.normal(size=10))
print(f"quadratic:          {err:.2e}")

# soft Dice with the hand-derived gradient passed in explicitly
labels = rng.integers(0, 3, size=(1, 4, 4, 4))
onehot = torch.from_numpy(np.moveaxis(np.eye(3)[labels], -1, 1).copy())
logits = torch.from_numpy(rng.normal(size=(1, 3, 4, 4, 4)))
loss, grad = soft_dice_loss(logits, onehot)
err = finite_difference_gradcheck(lambda x: soft_dice_loss(x, onehot)[0], logits, grad=grad)
print(f"soft Dice:          {err:.2e}  (loss {float(loss):.4f})")

# the same battery the `priornet gradcheck` command runs
for name, err in gradcheck_errors(seed=0).items():
    print(f"{name + ':':<20}{err:.2e}")
