# Applying a permutation by column gather vs multiplying by the dense
# permutation matrix. Same result, very different cost. Ratios are
# machine dependent.

from permnm import run_bench

for n in (256, 1024, 2048):
    r = run_bench(n, iterations=5, rows=256)
    print(
        f"n={r['n']:5d}  gather {r['gather_s'] * 1e6:9.1f} us   "
        f"matmul {r['matmul_s'] * 1e6:9.1f} us   "
        f"ratio {r['ratio']:6.1f}x   agree={r['routes_agree']}"
    )
