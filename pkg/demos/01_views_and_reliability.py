# %% [markdown]
# # Which points can we trust?
#
# A network looks at one scene three times: the original cloud plus two
# augmented copies.  Points whose three predictions agree *and* are
# confident become hard pseudo labels; everything else keeps only a soft
# target.  This script walks through that split on a hand-made example.

# %%
import math

import numpy as np

from racseg.reliability import build_bundle, partition

original = np.array([
    [0.92, 0.05, 0.03],   # confident, and the views agree
    [0.80, 0.15, 0.05],   # confident, but one view disagrees
    [0.40, 0.35, 0.25],   # unsure everywhere
    [0.05, 0.90, 0.05],
])
view_a = np.array([[0.90, 0.06, 0.04], [0.62, 0.33, 0.05], [0.45, 0.30, 0.25], [0.04, 0.93, 0.03]])
view_b = np.array([[0.91, 0.05, 0.04], [0.85, 0.10, 0.05], [0.35, 0.40, 0.25], [0.06, 0.89, 0.05]])

bundle = build_bundle(original, [view_a, view_b])
print("mean over views\n", bundle.mean.round(3))
print("per-class spread\n", bundle.deviation.round(3))

# %% [markdown]
# With the default thresholds (confidence 0.7, spread 0.05) the second
# point is dropped even though its mean still clears 0.7 for class 0.

# %%
strict = partition(original, bundle.mean, bundle.deviation, tau=0.7, kappa=0.05)
loose = partition(original, bundle.mean, bundle.deviation, tau=0.7, kappa=math.inf)
print("uncertainty-aware:", strict.mask, "labels", strict.labels)
print("confidence only:  ", loose.mask, "labels", loose.labels)

# %% [markdown]
# The strict set is always a subset of the confidence-only set.  Ambiguous
# points keep their original probabilities as a soft target.

# %%
assert np.all(strict.mask <= loose.mask)
print("soft targets on ambiguous rows\n", strict.soft.round(3))
