# %% [markdown]
# # Checking hand-written gradients
#
# Every loss returns its value and the gradient with respect to the
# logits.  Central differences give an independent estimate; the two
# should agree to many digits.

# %%
import numpy as np

from racseg import losses as L
from racseg.segmodel import ModelConfig, backward, forward, init_params
from racseg.pointcloud import knn_indices

rng = np.random.default_rng(1)
n, c = 10, 4
views = [rng.normal(size=(n, c)) for _ in range(2)]
one_hot = np.eye(c)[rng.integers(c, size=n)]
reliable = rng.uniform(size=n) < 0.5


def numeric(fn, z, h=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        up, dn = z.copy(), z.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (fn(up) - fn(dn)) / (2 * h)
    return g


value, grads = L.reliable_loss(one_hot, reliable, views)
fd = numeric(lambda z: L.reliable_loss(one_hot, reliable, [z, views[1]])[0], views[0])
print(f"reliable CE {value:.4f}, relative error {np.linalg.norm(grads[0] - fd) / np.linalg.norm(fd):.1e}")

# %% [markdown]
# The same idea for the network: push a random upstream gradient through
# ``backward`` and compare with perturbing one weight at a time.

# %%
x = rng.normal(size=(12, 6))
nbr = knn_indices(x[:, :3], 4)
params = init_params(ModelConfig(6, 8, c, 4), seed=2)
upstream = rng.normal(size=(12, c))
z, tape = forward(params, x, nbr)
analytic = backward(tape, upstream)["W2"]

W2 = params.arrays["W2"]
est = np.zeros_like(W2)
for idx in np.ndindex(W2.shape):
    old = W2[idx]
    W2[idx] = old + 1e-6
    up = np.sum(forward(params, x, nbr)[0] * upstream)
    W2[idx] = old - 1e-6
    dn = np.sum(forward(params, x, nbr)[0] * upstream)
    W2[idx] = old
    est[idx] = (up - dn) / 2e-6
print(f"W2 gradient relative error {np.linalg.norm(analytic - est) / np.linalg.norm(est):.1e}")
