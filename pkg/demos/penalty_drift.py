"""
What the Min-Max penalty does to a weight vector
================================================

The penalty ``lam*|w| - mu*w**2`` has a ridge at ``|w| = lam / (2 mu)``.
With ``lam = mu = 1`` the ridge sits at 0.5: descent pushes smaller weights
to zero and larger ones outward. Either way the membership ``1/(1+|w|)``
moves toward 0 or 1, so the fuzziness of the vector falls.
"""

import numpy as np

from minmax_lenet.analysis import fuzziness, near_zero_ratio
from minmax_lenet.objectives import RegWeights, minmax_penalty, penalty_descent

rng = np.random.default_rng(0)
w0 = rng.normal(0, 0.5, 1000)
reg = RegWeights(1.0, 1.0)

print(f"{'step':>5} {'penalty':>9} {'fuzziness':>9} {'|w|<1e-2':>9}")
print(f"{0:5d} {minmax_penalty(w0):9.3f} {fuzziness(w0):9.4f} {near_zero_ratio(w0, 1e-2):9.3f}")
for step, w in enumerate(penalty_descent(w0, reg, lr=0.01, steps=300), start=1):
    if step % 50 == 0:
        print(f"{step:5d} {minmax_penalty(w):9.3f} {fuzziness(w):9.4f} {near_zero_ratio(w, 1e-2):9.3f}")

# small weights went to zero, large ones grew
inside = np.abs(w0) < 0.5
print(f"share of small weights now exactly zero: {np.mean(w[inside] == 0):.3f}")
print("large weights grew:", bool(np.all(np.abs(w[~inside]) > np.abs(w0[~inside]))))

# Without truncation a step can jump across zero and the weight then
# oscillates around it instead of settling.
(w1,) = penalty_descent(np.array([1e-4]), reg, lr=0.01, steps=1, truncate=False)
print("one untruncated step from 1e-4:", w1[0])
