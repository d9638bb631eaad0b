"""Fold learned permutations into stored weights and export them.

After folding, inference needs no runtime reordering apart from one
input gather at the first pruned layer: each layer's columns are
pre-permuted and masked, and its producer's output rows are reordered
to match. The folded model's outputs equal the training-time sparse
forward bit for bit, and the packed export reconstructs the folded
weights exactly.
"""

import os
import tempfile

import numpy as np

from permnm import (
    CompressedNM,
    Model,
    ModelLayer,
    NMConfig,
    TrainConfig,
    decompress_nm,
    fold_and_export,
    folded_forward,
    make_rng,
    sparse_forward,
    train,
)

cfg = NMConfig(2, 4)
rng = make_rng(42)
w1 = rng.standard_normal((8, 16)).astype(np.float32)
w2 = rng.standard_normal((4, 8)).astype(np.float32)
x = rng.standard_normal((24, 16)).astype(np.float32)

model = Model([
    ModelLayer("fc1", w1),
    ModelLayer("fc2", w2, predecessor="fc1"),
])
sols = train(model, x, TrainConfig(steps=25, block_size=8), cfg)

y_train = sparse_forward(model, sols, x)
folded, exports, sidecar = fold_and_export(model, sols)
y_folded = folded_forward(folded, sidecar, x)

print("training-time sparse forward == folded forward:",
      np.array_equal(y_train, y_folded))
for name, entry in sidecar["layers"].items():
    print(f"  {name}: input gather at runtime = {entry['input_gather']}")

with tempfile.TemporaryDirectory() as d:
    for name, comp in exports.items():
        path = os.path.join(d, name + ".pnmc")
        comp.save(path)
        loaded = CompressedNM.load(path)
        dense = decompress_nm(loaded)
        folded_w = next(l.weight for l in folded.layers if l.name == name)
        kept = int((dense != 0).sum())
        print(f"  {name}: {os.path.getsize(path)} bytes on disk, "
              f"{kept}/{dense.size} weights kept, "
              f"bit-exact reload: {np.array_equal(dense, folded_w)}")
