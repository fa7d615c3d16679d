"""
A procedural biased benchmark
=============================

Glyph classes paired with a colour (or a background texture). In the training
split almost every sample carries its class's colour; a small fraction, the
bias-conflict samples, wears another class's colour. The test split covers
every (class, colour) pair evenly.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from diffinject.bias_bench import DatasetSpec, generate_dataset, save_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out/01")
out.mkdir(parents=True, exist_ok=True)

spec = DatasetSpec(num_classes=3, samples_per_class=1000, conflict_ratio=0.01, seed=0)
train, test = generate_dataset(spec)
print(len(train), "train samples,", int(train.is_conflict.sum()), "of them bias-conflict")
print(len(test), "unbiased test samples")

# (class, bias) counts: diagonal-heavy for train, flat for test
for name, ds in (("train", train), ("test", test)):
    counts = np.zeros((3, 3), int)
    np.add.at(counts, (ds.class_labels, ds.bias_labels), 1)
    print(name)
    print(counts)

# one row per class: five aligned samples, then the conflicts
rows = []
for c in range(3):
    aligned = np.nonzero((train.class_labels == c) & ~train.is_conflict)[0][:5]
    conflict = np.nonzero((train.class_labels == c) & train.is_conflict)[0][:5]
    rows.append(np.concatenate([train.images[i] for i in [*aligned, *conflict]], axis=1))
sheet = (np.concatenate(rows, axis=0) * 255).astype(np.uint8)
Image.fromarray(sheet).resize((sheet.shape[1] * 3, sheet.shape[0] * 3), Image.NEAREST).save(out / "glyphs.png")

# texture bias instead of colour
tex_train, _ = generate_dataset(DatasetSpec(num_classes=3, samples_per_class=20, bias_kind="texture", seed=0))
Image.fromarray((np.concatenate(tex_train.images[::20], axis=1) * 255).astype(np.uint8)).save(out / "texture.png")

# PNG files plus a manifest that ingest_folder / load_dataset read back
save_dataset(train, out / "train")
print("wrote", out)
