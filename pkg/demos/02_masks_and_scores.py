"""Group masks, importance scores, and why raw score is a flawed target.

Builds 2:4 masks under magnitude and activation-aware scores, then
searches for (and demonstrates) an instance where reordering channels
raises the total retained score while making the actual layer output
worse. That mismatch is the motivation for learning the permutation
against output loss instead of maximizing score.
"""

import os
import tempfile

import numpy as np

from permnm import (
    NMConfig,
    TensorContainer,
    generate_fixture,
    heuristic_cp,
    loss_mse,
    magnitude_scores,
    make_rng,
    nm_mask,
    retained_score,
    wanda_scores,
)

cfg = NMConfig.parse("2:4")
rng = make_rng(0)

w = rng.standard_normal((3, 8)).astype(np.float32)
x = rng.standard_normal((16, 8)).astype(np.float32)

print("magnitude scores:\n", np.round(magnitude_scores(w), 2))
print("activation-aware scores:\n", np.round(wanda_scores(w, x), 2))

mask = nm_mask(magnitude_scores(w), cfg)
print("\n2:4 mask (2 kept per 4):\n", mask.astype(int))
print("retained magnitude:", round(retained_score(magnitude_scores(w), mask), 3))

# the mismatch: more retained score, worse output
with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "mismatch.json")
    meta = generate_fixture("mismatch", None, seed=0, out_path=path)
    container = TensorContainer.load(path)
w_m = container.tensors["layer0"]
x_m = container.tensors["calib"]
print("\nsearched instance (trial %d):" % meta["trial"])
print("  identity  retained=%.3f  mse=%.4f" % (meta["identity_retained"], meta["identity_mse"]))
print("  reordered retained=%.3f  mse=%.4f" % (meta["heuristic_retained"], meta["heuristic_mse"]))
print("  score went UP, output quality went DOWN")

# replay it from the tensors to show nothing is baked into the metadata
scores = magnitude_scores(w_m)
y = x_m @ w_m.T
p = heuristic_cp(scores, cfg, [0])
h_mask = nm_mask(scores[:, p], cfg)
h_mse = loss_mse(y, x_m[:, p] @ (w_m[:, p] * h_mask).T)
print("  replayed reordered mse: %.4f" % h_mse)
