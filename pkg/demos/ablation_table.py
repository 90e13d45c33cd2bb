"""
The four-way comparison
=======================

Trains the plain U-Net, the single-encoder and dual-encoder variants and the
full model under one budget and prints the comparison table. With one seed
on 16^3 phantoms this takes under a minute, and the ordering it prints is
mostly noise; ``priornet ablate configs/desk.cfg`` runs the three-seed
comparison on the harder desk phantoms.
"""

import torch

from priornet.data import Dataset, SyntheticSpec, synthesize
from priornet.evaluation import REFERENCE_ABLATION, ablation_study, format_ablation_table
from priornet.network import NetworkConfig
from priornet.training import TrainConfig

torch.set_num_threads(1)

# The published brain-MRI numbers, shown only to illustrate the layout.
print(format_ablation_table(REFERENCE_ABLATION))

spec = SyntheticSpec(num_volumes=10, shape=(16, 16, 16), num_classes=2,
                     radius_range=(2.0, 3.0), center_jitter=1.0, noise_std=0.9, seed=7)
pairs = synthesize(spec)
data = Dataset([p[0] for p in pairs], [p[1] for p in pairs], ["train"] * 7 + ["test"] * 3, 2)

result = ablation_study(data, TrainConfig(epochs=40, batch_size=2, lr_start=0.01, lr_end=1e-5),
                        NetworkConfig(num_classes=2, base_channels=8, num_levels=3),
                        seeds=(0,), log=print)
print(result.to_table())
