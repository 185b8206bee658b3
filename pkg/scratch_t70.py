import numpy as np

from parereg.geom import PointCloud, knn, random_rotation, farthest_point_sample
from parereg.pareconv import (BackboneConfig, build_backbone_params, bootstrap_block,
                              pare_resblock, strided_block, _level_counts)

cfg = BackboneConfig(voxel=0.05, k=6, ratio=2.0, kernels=2,
                     stage_channels=(4, 8, 8), decoder_channels=(8, 4),
                     corr_vn_channels=(4,), corr_mlp_hidden=(4,))
trial = 70
rng = np.random.default_rng(10_000 + trial)
pts = rng.uniform(-1.0, 1.0, size=(40, 3))
rot = random_rotation(20_000 + trial).m
params = build_backbone_params(cfg, np.random.default_rng(30_000 + trial), corr_final="random")

dtype = np.float32


def rel(a, b, r):
    a64 = a.astype(np.float64) @ r.T
    b64 = b.astype(np.float64)
    return np.linalg.norm(b64 - a64) / max(np.linalg.norm(a64), 1e-30)


def worst_points(a, b, r, tag):
    pa = a.astype(np.float64) @ r.T
    pb = b.astype(np.float64)
    per_pt = np.linalg.norm((pb - pa).reshape(len(pa), -1), axis=1)
    i = int(per_pt.argmax())
    ch_a = np.linalg.norm(pa[i], axis=-1)
    ch_b = np.linalg.norm(pb[i], axis=-1)
    print(f"    {tag} worst pt {i}: abs={per_pt[i]:.3e} "
          f"ch_a={np.array2string(ch_a, precision=2)} ch_b={np.array2string(ch_b, precision=2)}")


def stage_walk(side_cloud, r):
    counts = _level_counts(len(side_cloud), cfg.ratio)
    clouds = [side_cloud]
    level_indices = []
    for level in range(3):
        idx = farthest_point_sample(clouds[level], counts[level + 1])
        level_indices.append(idx)
        clouds.append(clouds[level].select(idx))
    feats = {}
    entry, b1, b2 = params.stages[0]
    f = bootstrap_block(entry, level_indices[0], clouds[0], cfg.k, dtype)
    feats["boot"] = f
    graph1 = knn(clouds[1], clouds[1], cfg.k)
    own1 = np.arange(len(clouds[1]))
    f = pare_resblock(b1, graph1, f, clouds[1].points, clouds[1].points, own1)
    feats["s1b1"] = f
    f = pare_resblock(b2, graph1, f, clouds[1].points, clouds[1].points, own1)
    feats["s1b2"] = f
    for stage in (1, 2):
        strided, b1, b2 = params.stages[stage]
        f = strided_block(strided, level_indices[stage], clouds[stage], f, cfg.k)
        feats[f"s{stage+1}str"] = f
        graph = knn(clouds[stage + 1], clouds[stage + 1], cfg.k)
        own = np.arange(len(clouds[stage + 1]))
        f = pare_resblock(b1, graph, f, clouds[stage + 1].points, clouds[stage + 1].points, own)
        feats[f"s{stage+1}b1"] = f
        f = pare_resblock(b2, graph, f, clouds[stage + 1].points, clouds[stage + 1].points, own)
        feats[f"s{stage+1}b2"] = f
    return feats


cloud_a = PointCloud(pts.astype(dtype))
cloud_b = PointCloud((pts @ rot.T).astype(dtype))
fa = stage_walk(cloud_a, np.eye(3))
fb = stage_walk(cloud_b, rot)
for key in fa:
    print(f"{key}: {rel(fa[key], fb[key], rot):.3e}")
    worst_points(fa[key], fb[key], rot, key)
