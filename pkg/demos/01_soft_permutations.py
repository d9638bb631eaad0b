"""From logits to a hard permutation.

A square logit matrix becomes a doubly stochastic matrix through
repeated row/column normalization; lowering the temperature sharpens
it toward a hard permutation, which the assignment solver then
extracts exactly.
"""

import numpy as np

from permnm import (
    dense_permutation,
    make_rng,
    sinkhorn_normalize,
    soft_permutation,
    solve_lsa,
)

rng = make_rng(0)
logits = rng.standard_normal((5, 5))

print("raw logits:")
print(np.round(logits, 2))

p_hat = sinkhorn_normalize(logits, iterations=20)
print("\nafter 20 normalization rounds:")
print(np.round(p_hat, 3))
print("row sums:", np.round(p_hat.sum(axis=1), 6))
print("col sums:", np.round(p_hat.sum(axis=0), 6))

# temperature sweep: same logits, increasingly peaked relaxation
for tau in (1.0, 0.3, 0.1, 0.03):
    soft = soft_permutation(logits, tau=tau, iterations=20)
    print(f"\ntau={tau}: max entry per row", np.round(soft.max(axis=1), 3))

perm, objective = solve_lsa(p_hat)
print("\nhardened permutation:", perm, " objective:", round(objective, 4))
print("as a dense matrix:\n", dense_permutation(perm).astype(int))
