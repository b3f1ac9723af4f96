"""Render a random Gaussian cloud with the tile rasterizer and check it
against the brute-force reference compositor.

Writes splats.png next to this script and prints the max pixel deviation.
"""

from pathlib import Path

import numpy as np

from meshsplat import tensor as T
from meshsplat.clouds import GaussianCloud
from meshsplat.images import save_png
from meshsplat.render import Camera, reference_render, render

rng = np.random.default_rng(4)
n = 120
quats = rng.normal(size=(n, 4))
quats /= np.linalg.norm(quats, axis=1, keepdims=True)
cloud = GaussianCloud(
    centers=rng.normal(0, 1.0, size=(n, 3)) + [0, 0, 6.0],
    rotations=quats,
    scales=rng.uniform(0.05, 0.4, size=(n, 3)),
    colors=rng.uniform(0, 1, size=(n, 3)),
    opacities=rng.uniform(0.2, 0.95, size=(n, 1)),
)
camera = Camera(rotation=np.eye(3), translation=np.zeros(3),
                fx=160.0, fy=160.0, cx=63.5, cy=63.5,
                width=128, height=128, near=0.1, far=50.0)

with T.no_grad():
    tiled = render(cloud, camera)
reference = reference_render(cloud, camera)

deviation = np.abs(tiled.color.data - reference.color.data).max()
print(f"rendered {tiled.n_rendered} Gaussians; max |tiled - reference| = {deviation:.2e}")

out = Path(__file__).parent / "splats.png"
save_png(tiled.color.data, out)
print(f"wrote {out}")

# the same forward pass is differentiable end to end
bg = T.Tensor(np.ones(3), requires_grad=True)
out_t = render(cloud, camera, background=bg)
grads = T.backward(T.tmean(out_t.color), params=[bg])
print(f"d mean(color) / d background = {grads[bg]}")
