"""Distances between point sets, depth rendering and the front part of a cloud.

Run: python demos/01_metrics_and_sampling.py
"""
import numpy as np

from condshape.geom import camera_at
from condshape.losses import front_loss, occlusion_pair
from condshape.metrics import chamfer, emd, fps
from condshape.render import render_depth, view_based_sample
from condshape.synthdata import generate_dataset

rng = np.random.default_rng(0)

# %% Chamfer is asymmetric per direction; EMD needs a one-to-one matching.
a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)) + [0.5, 0, 0]
d12, d21 = chamfer(a, b)
m = emd(a, b)
print(f"chamfer a->b {d12:.3f}  b->a {d21:.3f}  emd {m.cost:.3f}  matching {[int(j) for j in m.assignment]}")

# %% Farthest point sampling picks well-spread subsets.
cloud = rng.uniform(-1, 1, size=(200, 3))
idx = fps(cloud, 8)
print("fps picks", idx, "min pairwise gap", round(float(np.min(
    [np.linalg.norm(cloud[i] - cloud[j]) for i in idx for j in idx if i < j])), 3))

# %% One synthetic shape, seen from one of its ring cameras.
ds = generate_dataset(2, seed=0)
rec = ds.records[0]
cam = ds.sampling_camera(rec.cameras[0])
dm = render_depth(rec.points, cam)
res = view_based_sample(rec.points, cam)
print(f"{rec.shape_id}: {len(res.front_indices)} of {len(rec.points)} points are visible; "
      f"{int((dm.contributor >= 0).sum())} pixels covered")

# %% The front loss only sees what the camera sees.
cam = camera_at(30.0, 10.0, 2.5)
pred, gt = occlusion_pair(cam)
print(f"occlusion pair: front loss {float(front_loss(pred, gt, cam).data)}, full chamfer {sum(chamfer(pred, gt)):.3f}")
