"""Train a channel permutation on one small layer and rank it against
the identity ordering, the score-maximizing heuristic, and the
exhaustive grouping oracle."""

import numpy as np

from permnm import (
    Model,
    ModelLayer,
    NMConfig,
    TrainConfig,
    make_rng,
    oracle_best_partition,
    train,
)

cfg = NMConfig(2, 4)
rng = make_rng(1008)
w = rng.standard_normal((4, 8)).astype(np.float32)
x = rng.standard_normal((32, 8)).astype(np.float32)

model = Model([ModelLayer("layer", w)])
tcfg = TrainConfig(
    learning_rate=5e-3,
    steps=50,
    block_size=8,
    metric="wanda",
    seed=8,
)
sol = train(model, x, tcfg, cfg)["layer"]

oracle = oracle_best_partition(w, x, "wanda", cfg, boundaries=[0])

print("cosine reconstruction loss, lower is better")
print("  identity ordering :", round(sol.baseline_losses["identity"], 6))
print("  score heuristic   :", round(sol.baseline_losses["heuristic_cp"], 6))
print("  learned           :", round(sol.achieved_loss, 6))
print("  exhaustive optimum:", round(oracle.best_loss, 6),
      f"({oracle.evaluated_count} groupings tried)")
print()
print("learned permutation:", sol.permutation.tolist())
print("retained score under it:", round(sol.retained_score, 3))
gap = (sol.achieved_loss - oracle.best_loss) / oracle.best_loss
print("gap to optimum: %.1f%%" % (100 * gap))
