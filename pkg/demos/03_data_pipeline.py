"""From an image tree on disk to a split, class-balanced tensor set.

The script writes a small imbalanced PPM tree to a temporary directory, reads
it back, oversamples with SMOTE and splits. It then repeats the preparation
with SMOTE applied after the split, to show where synthetic rows end up.
"""
import tempfile

import numpy as np

from adensemble import data as D

# An imbalanced four-class set, written the way a real dataset is laid out.
toy = D.make_toy_dataset(counts=(28, 12, 60, 40), size=32, seed=5)
with tempfile.TemporaryDirectory() as root:
    D.write_image_tree(toy, root)
    images = D.ingest_directory(root)
print("classes (alphabetical):", images.class_names)
print("counts on disk:", np.bincount(images.labels).tolist())

# SMOTE before the split, the default order.
before = D.prepare(images, size=32, scenario="smote", smote_order="paper")
print("\nSMOTE then split")
print("  whole set:", before.histogram())
for part in ("train", "val", "test"):
    n_syn = int(before.synthetic[before.split == D.SPLIT_CODES[part]].sum())
    print(f"  {part:5s} {before.histogram(part)}  synthetic rows: {n_syn}")

# Split first, SMOTE the training part only. The test set stays real.
after = D.prepare(images, size=32, scenario="smote", smote_order="after-split")
print("\nsplit then SMOTE")
for part in ("train", "val", "test"):
    n_syn = int(after.synthetic[after.split == D.SPLIT_CODES[part]].sum())
    print(f"  {part:5s} {after.histogram(part)}  synthetic rows: {n_syn}")

# Each synthetic row lies between its two parents, coordinate by coordinate.
X0, Y0 = D.normalize_and_encode(images, 32)
labels = D.as_labels(Y0)
X0 = X0.reshape(len(X0), -1)
Xs, _, syn, parents = D.smote(X0, labels, return_parents=True)
i, j = parents[0]
inside = np.all((Xs[syn] >= np.minimum(X0[parents[:, 0]], X0[parents[:, 1]]))
                & (Xs[syn] <= np.maximum(X0[parents[:, 0]], X0[parents[:, 1]])))
print(f"\n{int(syn.sum())} synthetic rows; the first comes from images {i} and {j}")
print("every synthetic row inside its parents' box:", bool(inside))

print("\nnested split sizes for 6,400 images:",
      [len(s) for s in D.split_indices(np.repeat(np.arange(4), 1600))])
