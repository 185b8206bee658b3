import numpy as np

from parereg.vn import vn_linear, vn_relu, l2_normalize
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


def steps(cloud):
    counts = _level_counts(40, cfg.ratio)
    idx = farthest_point_sample(cloud, counts[1])
    sparse_pts = cloud.points[idx]
    graph = knn(cloud, PointCloud(sparse_pts), cfg.k)
    stats = _spatial_stats_batch(sparse_pts, cloud.points[graph.indices]).astype(dtype)
    gamma = correlation_scores(entry.net, stats)
    y0 = _pare_conv_batch(entry.bank, gamma, stats)
    y1 = vn_relu(entry.conv_relu, y0)
    y2 = vn_linear(entry.expand, y1)
    y3 = l2_normalize(y2)
    return y0, y1, y2, y3


a = steps(PointCloud(pts.astype(dtype)))
b = steps(PointCloud((pts @ rot.T).astype(dtype)))
names = ("conv", "conv_relu", "lin", "norm")
for name, ya, yb in zip(names, a, b):
    ya64 = ya.astype(np.float64)
    yb64 = yb.astype(np.float64)
    ref = ya64 @ rot.T
    diff = np.linalg.norm((yb64 - ref).reshape(len(ya64), -1), axis=1)
    print(f"{name}: global_rel={np.linalg.norm(yb64 - ref) / np.linalg.norm(ref):.3e} "
          f"worst_pt={int(diff.argmax())} worst_abs={diff.max():.3e}")
    na = np.linalg.norm(ya64[10], axis=-1)
    nb = np.linalg.norm(yb64[10], axis=-1)
    print(f"  pt10 ch norms a={np.array2string(na, precision=6)} b={np.array2string(nb, precision=6)}")
    g = np.linalg.norm(ya64, axis=-1).max()
    eps = float(np.finfo(np.float32).eps)
    print(f"  G={g:.4e} floor={(eps ** 0.25) * g:.4e}")
