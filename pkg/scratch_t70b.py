import numpy as np

from parereg.geom import PointCloud, knn, random_rotation, farthest_point_sample
from parereg.pareconv import BackboneConfig, _level_counts

cfg = BackboneConfig(voxel=0.05, k=6, ratio=2.0, kernels=2,
                     stage_channels=(4, 8, 8), decoder_channels=(8, 4),
                     corr_vn_channels=(4,), corr_mlp_hidden=(4,))
trial = 70
rng = np.random.default_rng(10_000 + trial)
pts = rng.uniform(-1.0, 1.0, size=(40, 3))
rot = random_rotation(20_000 + trial).m

for dtype in (np.float64, np.float32):
    cloud_a = PointCloud(pts.astype(dtype))
    cloud_b = PointCloud((pts @ rot.T).astype(dtype))
    counts = _level_counts(40, cfg.ratio)
    ca, cb = [cloud_a], [cloud_b]
    for level in range(3):
        ia = farthest_point_sample(ca[level], counts[level + 1])
        ib = farthest_point_sample(cb[level], counts[level + 1])
        print(f"{np.dtype(dtype).name} level {level+1}: fps equal={np.array_equal(ia, ib)}")
        ca.append(ca[level].select(ia))
        cb.append(cb[level].select(ib))
    for level in range(1, 4):
        ga = knn(ca[level], ca[level], cfg.k)
        gb = knn(cb[level], cb[level], cfg.k)
        same = np.array_equal(ga.indices, gb.indices)
        print(f"{np.dtype(dtype).name} knn level {level}: equal={same}")
        if not same:
            bad = np.nonzero((ga.indices != gb.indices).any(axis=1))[0]
            for q in bad[:4]:
                print(f"    query {q}: a={ga.indices[q]} b={gb.indices[q]} "
                      f"da={ga.distances[q]} db={gb.distances[q]}")
