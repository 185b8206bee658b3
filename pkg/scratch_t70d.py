import numpy as np

from parereg.geom import PointCloud, knn, random_rotation, farthest_point_sample
from parereg.pareconv import (BackboneConfig, build_backbone_params, _level_counts,
                              _spatial_stats_batch, correlation_scores, _pare_conv_batch)

cfg = BackboneConfig(voxel=0.05, k=6, ratio=2.0, kernels=2,
                     stage_channels=(4, 8, 8), decoder_channels=(8, 4),
                     corr_vn_channels=(4,), corr_mlp_hidden=(4,))
trial = 70
rng = np.random.default_rng(10_000 + trial)
pts = rng.uniform(-1.0, 1.0, size=(40, 3))
rot = random_rotation(20_000 + trial).m
params = build_backbone_params(cfg, np.random.default_rng(30_000 + trial), corr_final="random")
entry = params.stages[0][0]
dtype = np.float32


def conv_out(cloud):
    counts = _level_counts(40, cfg.ratio)
    idx = farthest_point_sample(cloud, counts[1])
    sparse_pts = cloud.points[idx]
    graph = knn(cloud, PointCloud(sparse_pts), cfg.k)
    stats = _spatial_stats_batch(sparse_pts, cloud.points[graph.indices]).astype(dtype)
    gamma = correlation_scores(entry.net, stats)
    return _pare_conv_batch(entry.bank, gamma, stats)


ya = conv_out(PointCloud(pts.astype(dtype)))
yb = conv_out(PointCloud((pts @ rot.T).astype(dtype)))

u = entry.conv_relu.u
eps = float(np.finfo(np.float32).eps)
c = ya.shape[-2]
for tag, y, r in (("a", ya, np.eye(3)), ("b", yb, rot)):
    y64 = y.astype(np.float64) @ r.T
    d = u @ y64[10]
    scale = np.linalg.norm(u) * np.linalg.norm(y64[10]) / np.sqrt(c)
    print(f"branch {tag}: pt10 ch norms {np.linalg.norm(y64[10], axis=-1)}")
    print(f"  |d|={np.linalg.norm(d):.4e} floor={(eps ** 0.25) * scale:.4e} "
          f"d_hat={d.ravel() / max(np.linalg.norm(d), 1e-30)}")
diff = np.linalg.norm((yb.astype(np.float64) @ rot.T - ya.astype(np.float64)).reshape(len(ya), -1), axis=1)
print("conv per-point diff top3:", np.sort(diff)[-3:], "at", np.argsort(diff)[-3:])
# cosine structure of the conv channels at pt 10
y10 = ya.astype(np.float64)[10]
norms = np.linalg.norm(y10, axis=-1, keepdims=True)
cosmat = (y10 / norms) @ (y10 / norms).T
print("pt10 channel cosines:\n", np.array2string(cosmat, precision=4))
g = np.linalg.norm(ya.astype(np.float64), axis=-1)
print(f"global max channel norm G={g.max():.3e}, pt10 max={g[10].max():.3e}")
