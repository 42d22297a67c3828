"""
Input gradients of random linear-softmax models
===============================================

Two families of ``m x n`` weight matrices: uniform on [0, 1], and 0/1 with
``P(1) = p1``. For each we estimate ``|E dL/dx_i|`` by Monte Carlo and
compare per coordinate. The claim under test is that the sparse 0/1
family never has the larger expected gradient.

Expect the check to hold for small ``p1`` and to break as ``p1`` grows.
"""

import numpy as np

from minmax_lenet.theorem import run_grid

results = run_grid(p1s=(0.01, 0.05, 0.1, 0.25), ms=(2, 10), ns=(5, 50), trials=10_000)

print(f"{'m':>3} {'n':>3} {'p1':>5} {'mean side a':>12} {'mean side b':>12} {'max z':>7} {'viol':>5}")
for r in results:
    print(f"{r.m:3d} {r.n:3d} {r.p1:5g} {np.mean(r.side_a):12.4g} {np.mean(r.side_b):12.4g} "
          f"{max(r.z):7.2f} {r.violations:5d}")

# The closed forms obtained by putting the expectation inside the softmax
# are zero because softmax rows sum to one; they do not predict the sizes above.
print("closed forms:", {(r.m, r.n, r.p1): (r.closed_form_a, r.closed_form_b) for r in results[:2]})
