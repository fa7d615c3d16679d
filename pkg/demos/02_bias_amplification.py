"""
Amplifying the bias with generalized cross-entropy
==================================================

GCE = (1 - p_y^q) / q. Its gradient is the CE gradient scaled by p_y^q, so
samples the model already finds easy (the bias-aligned majority) dominate
training. The overfit bias classifier then gives the scarce bias-conflict
samples the highest CE loss, and the top-K of that ranking is kept.
"""

import numpy as np

from diffinject.bias_bench import DatasetSpec, generate_dataset
from diffinject.classifiers import (
    ClassifierConfig, ce_loss, evaluate, gce_gradient_factor, gce_loss, rank_by_ce_loss, train_bias_classifier,
)

# the loss itself
for p in (0.1, 0.5, 0.9):
    probs = np.array([1 - p, p])
    print(f"p_y={p}: CE={ce_loss(probs, 1):.4f}  GCE(q=0.7)={gce_loss(probs, 1, 0.7):.4f}  "
          f"grad factor={gce_gradient_factor(probs, 1, 0.7):.4f}")

# as q -> 0 it turns back into cross-entropy
print("GCE(q=1e-4) at p=0.3:", gce_loss(np.array([0.7, 0.3]), 1, 1e-4), "CE:", ce_loss(np.array([0.7, 0.3]), 1))

train, test = generate_dataset(DatasetSpec(seed=0))
model, record = train_bias_classifier(train, ClassifierConfig(epochs=10, seed=0))
print("epoch losses:", np.round(record.epoch_losses, 4))

e = evaluate(model, train)
print(f"train accuracy: aligned {e['aligned_accuracy']:.3f}, conflict {e['conflict_accuracy']:.3f}")

ranking = rank_by_ce_loss(model, train, K=10)
hits = train.is_conflict[train.index_of(ranking.sample_ids)].sum()
print(ranking.to_lines())
print(f"{hits} of the top-10 are true bias-conflict samples")
