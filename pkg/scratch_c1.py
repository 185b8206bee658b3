import time

import numpy as np

from parereg.geom import PointCloud, apply_transform, random_rotation, RigidTransform
from parereg.pareconv import BackboneConfig, backbone_forward, build_backbone_params


def full_rel(params, cfg, pts, rot, dtype):
    cloud = PointCloud(pts.astype(dtype))
    moved = PointCloud((pts @ rot.T).astype(dtype))
    r_t = rot.T.astype(dtype)
    fa = backbone_forward(params, cloud, dtype=dtype)
    fb = backbone_forward(params, moved, dtype=dtype)
    for ia, ib in zip(fa.level_indices, fb.level_indices):
        if not np.array_equal(ia, ib):
            return np.inf
    worst = 0.0
    for a, b in ((fa.super_feats, fb.super_feats), (fa.point_feats, fb.point_feats)):
        a64 = a.astype(np.float64) @ rot.T
        b64 = b.astype(np.float64)
        den = max(np.linalg.norm(a64), 1e-30)
        worst = max(worst, np.linalg.norm(b64 - a64) / den)
    for a, b in ((fa.super_invariant, fb.super_invariant), (fa.point_invariant, fb.point_invariant)):
        den = max(np.linalg.norm(a.astype(np.float64)), 1e-30)
        worst = max(worst, np.linalg.norm(b.astype(np.float64) - a.astype(np.float64)) / den)
    return worst


def run(cfg, n, label):
    t0 = time.time()
    for dtype in (np.float64, np.float32):
        errs = []
        for trial in range(100):
            rng = np.random.default_rng(10_000 + trial)
            pts = rng.uniform(-1.0, 1.0, size=(n, 3))
            rot = random_rotation(20_000 + trial).m
            params = build_backbone_params(cfg, np.random.default_rng(30_000 + trial), corr_final="random")
            errs.append(full_rel(params, cfg, pts, rot, dtype))
        errs = np.asarray(errs)
        name = "f64" if dtype is np.float64 else "f32"
        q = np.quantile(errs, [0.5, 0.9, 0.99])
        print(f"{label} {name}: median={q[0]:.3e} p90={q[1]:.3e} p99={q[2]:.3e} "
              f"max={errs.max():.3e} argmax={errs.argmax()} over1e-4={(errs > 1e-4).sum()}")
    print(f"  elapsed {time.time() - t0:.1f}s")


small = BackboneConfig(voxel=0.05, k=6, ratio=2.0, kernels=2,
                       stage_channels=(4, 8, 8), decoder_channels=(8, 4),
                       corr_vn_channels=(4,), corr_mlp_hidden=(4,))
wide = BackboneConfig(voxel=0.05, k=8, ratio=2.0, kernels=2,
                      stage_channels=(16, 32, 32), decoder_channels=(32, 16),
                      corr_vn_channels=(8,), corr_mlp_hidden=(8,))
run(small, 40, "small(4,8,8)@40")
run(wide, 96, "wide(16,32,32)@96")
