# %% [markdown]
# # Four ways to perturb a cloud
#
# Rigid affine moves, per-point jitter, the smooth local warp (PointWolf)
# and per-point mixing of two views.  All of them keep the number and
# order of points, so predictions on a view line up with the original.

# %%
import numpy as np

from racseg.augment import (
    AffineParams, NoiseParams, PointWolfParams,
    affine_transform, mix_augment, pointwise_noise, pointwolf_deform,
)
from racseg.synthdata import SceneConfig, generate_scene

cloud, labels = generate_scene(SceneConfig(n_points=1024, rng_seed=3))
rng = np.random.default_rng(0)


def spread(c):
    d = c.locations[:, None] - c.locations[None]
    return np.sqrt((d ** 2).sum(-1))


# %% [markdown]
# A rotation with unit scale leaves every pairwise distance alone.

# %%
turned = affine_transform(cloud, AffineParams(rotation_angle=1.2, translation=(0.5, 0, 0)))
print("max distance change after rotation:", np.abs(spread(turned) - spread(cloud)).max())

# %%
jittered = pointwise_noise(cloud, NoiseParams(sigma=0.01, clip=0.03), rng)
print("largest jitter:", np.abs(jittered.locations - cloud.locations).max())

warped = pointwolf_deform(cloud, PointWolfParams(), rng)
moved = np.linalg.norm(warped.locations - cloud.locations, axis=1)
print(f"PointWolf displacement: median {np.median(moved):.3f}, max {moved.max():.3f}")

# %% [markdown]
# Mixing draws a coefficient per point and interpolates positions and
# colours, so every coordinate of the result lies between its sources.

# %%
mixed = mix_augment(turned, warped, rng)
lo = np.minimum(turned.as_matrix(), warped.as_matrix())
hi = np.maximum(turned.as_matrix(), warped.as_matrix())
inside = ((mixed.cloud.as_matrix() >= lo) & (mixed.cloud.as_matrix() <= hi)).all()
print("mixed cloud inside its sources:", inside, " mean alpha", mixed.alpha.mean().round(3))
