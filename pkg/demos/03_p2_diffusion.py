"""
Training a denoiser with P2 weighting
=====================================

The loss at timestep t is weighted by 1 / (k + SNR(t))^gamma. Timesteps with
little noise (high SNR) get almost no weight, so capacity goes to the noise
levels where content is formed.
"""

import sys

import numpy as np

from diffinject.diffusion import (
    DenoiserConfig, DiffusionTrainConfig, P2Config, default_schedule, make_schedule, p2_weights, save_denoiser,
    train_diffusion,
)
from diffinject.pipeline import pretraining_corpus

full = make_schedule(1000, 1e-4, 0.02)
w = p2_weights(full, P2Config(gamma_p2=1.0, k=1.0))
print("T=1000: weight at t=1 %.3e, t=500 %.3e, t=1000 %.3e" % (w[0], w[499], w[999]))

# the desk-scale schedule: 100 steps, endpoints scaled by 10
sched = default_schedule(100)
print("T=100: alpha_cum[T] = %.2e" % sched.alpha_cum[-1])
print("weights every 10 steps:", np.round(p2_weights(sched, P2Config())[::10], 4))

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
images = pretraining_corpus(num_classes=3, image_size=32, bias_kind="color", per_class=100, seed=0)
model, record = train_diffusion(images, DenoiserConfig(), sched, P2Config(),
                                DiffusionTrainConfig(steps=steps, batch_size=32, learning_rate=5e-4),
                                progress=lambda s, l: print(f"step {s}: loss {l:.2f}"))
print("bottleneck (h-space) shape:", model.bottleneck_shape)
save_denoiser("demo-denoiser.pt", model, sched)
