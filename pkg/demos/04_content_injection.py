"""
Injecting content through the bottleneck
========================================

Both images are inverted with deterministic DDIM. The original's terminal
latent is then run backwards while, for t in [T, t_edit], the bottleneck is
replaced by a Slerp between the original's and the content's activations.
The predicted-x0 term uses the injected pass, the direction term the plain
one. Below t_boost a little noise is added back.

Pass a denoiser checkpoint (e.g. from a pipeline run's train-diffusion stage)
for meaningful images; demo 03 writes a quick, rough one.
"""

import sys

import numpy as np
import torch
from PIL import Image

from diffinject.bias_bench import DatasetSpec, generate_dataset
from diffinject.diffusion import load_denoiser, to_model_range
from diffinject.injector import (
    InjectionConfig, compute_t_edit, ddim_invert, ddim_reconstruct, inject_h, reverse_with_injection, slerp,
)
from diffinject.pipeline import foreground_mask

# Slerp keeps the norm of equal-norm endpoints
a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
print("slerp midpoint:", slerp(a, b, 0.5))

# inject_h only touches the masked cells
h_o, h_c = np.random.default_rng(0).normal(size=(2, 4, 3, 3))
mask = np.zeros((3, 3), bool)
mask[1, 1] = True
mixed = inject_h(h_o, h_c, 0.9, mask)
print("cells changed:", int((mixed != h_o).any(0).sum()))

model, sched, _ = load_denoiser(sys.argv[1] if len(sys.argv) > 1 else "demo-denoiser.pt")
train, _ = generate_dataset(DatasetSpec(seed=0))
conflicts = np.nonzero(train.is_conflict & (train.class_labels == 0))[0][:4]
originals = np.nonzero(~train.is_conflict & (train.class_labels == 0))[0][:4]
x_o = to_model_range(train.images[originals])
x_c = to_model_range(train.images[conflicts])

traj_o = ddim_invert(x_o, model, sched, num_steps=50, record_h=False)
recon = ddim_reconstruct(traj_o.x_T, model, sched, num_steps=50)
print("round-trip max abs error:", float((recon - x_o).abs().max()))

t_edit = compute_t_edit(model, sched, x_o, threshold=0.07, num_steps=50)
print("calibrated t_edit:", t_edit)

traj_c = ddim_invert(x_c, model, sched, num_steps=50)
grid = model.bottleneck_shape[1]
m = foreground_mask(train.images[originals], grid) | foreground_mask(train.images[conflicts], grid)
cfg = InjectionConfig(gamma_inject=0.9, t_edit=t_edit, mask=m, num_steps=50)
out = reverse_with_injection(traj_o.x_T, traj_c, model, sched, cfg, torch.Generator().manual_seed(0))

rows = np.concatenate([np.concatenate([train.images[o], train.images[c], g], axis=1)
                       for o, c, g in zip(originals, conflicts, out)], axis=0)
Image.fromarray((rows * 255).astype(np.uint8)).resize((rows.shape[1] * 4, rows.shape[0] * 4),
                                                      Image.NEAREST).save("injection.png")
print("original | content | generated -> injection.png")
