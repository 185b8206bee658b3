import numpy as np

from parereg import vn
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


def rel(a, b, r, tag):
    a64 = a.astype(np.float64) @ r.T
    b64 = b.astype(np.float64)
    e = np.linalg.norm(b64 - a64) / max(np.linalg.norm(a64), 1e-30)
    print(f"{tag}: {e:.3e}")
    return a64, b64


def boot_steps(cloud):
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
    y4 = vn_relu(entry.expand_relu, y3)
    sc = vn_linear(entry.shortcut, stats.mean(axis=1))
    return dict(stats=stats, gamma=gamma, conv=y0, conv_relu=y1, lin=y2,
                norm=y3, relu2=y4, shortcut=sc, out=y4 + sc)


a = boot_steps(PointCloud(pts.astype(dtype)))
b = boot_steps(PointCloud((pts @ rot.T).astype(dtype)))
rel(a["stats"], b["stats"], rot, "stats")
g = np.linalg.norm(b["gamma"].astype(np.float64) - a["gamma"].astype(np.float64))
print(f"gamma abs: {g:.3e}")
for key in ("conv", "conv_relu", "lin", "norm", "relu2", "shortcut", "out"):
    a64, b64 = rel(a[key], b[key], rot, key)
    per_pt = np.linalg.norm((b64 - a64).reshape(len(a64), -1), axis=1)
    i = int(per_pt.argmax())
    if per_pt[i] > 1e-3:
        print(f"   worst pt {i} abs={per_pt[i]:.3e}")
        print(f"   a64[{i}] ch norms: {np.linalg.norm(a64[i], axis=-1)}")
        print(f"   b64[{i}] ch norms: {np.linalg.norm(b64[i], axis=-1)}")
        if key == "conv_relu":
            d_a = entry.conv_relu.u.astype(np.float64) @ a["conv"][i].astype(np.float64)
            print(f"   |d| at pt {i} branch a: {np.linalg.norm(d_a):.3e} "
                  f"scale~{np.linalg.norm(a['conv'][i]):.3e}")
