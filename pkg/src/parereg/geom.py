"""Point cloud containers, rigid motion algebra, neighbor search, sampling and cropping.

All geometry runs in float64 regardless of the feature precision used elsewhere;
every operation is a pure function with deterministic tie-breaking by lower index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InputError

ROTATION_TOL = 1e-6

# Exhaustive KNN below this many reference points, uniform-grid bucketing above.
KNN_GRID_THRESHOLD = 2000


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D point set stored as an (n, 3) float64 array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InputError(f"expected (n, 3) points, got shape {pts.shape}")
        if pts.size and not np.isfinite(pts).all():
            raise InputError("points contain non-finite coordinates")
        object.__setattr__(self, "points", _freeze(pts.copy()))

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[indices])


@dataclass(frozen=True)
class Rotation:
    """Proper rotation matrix: m.T @ m = I and det(m) = +1 within 1e-6."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise InputError(f"expected 3x3 rotation, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise InputError("rotation contains non-finite entries")
        if np.abs(m.T @ m - np.eye(3)).max() > ROTATION_TOL:
            raise InputError("matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > ROTATION_TOL:
            raise InputError("matrix determinant is not +1")
        object.__setattr__(self, "m", _freeze(m.copy()))

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion p -> r.m @ p + t."""

    r: Rotation
    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.isfinite(t).all():
            raise InputError("translation contains non-finite entries")
        object.__setattr__(self, "t", _freeze(t.copy()))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.r.m.T + self.t


@dataclass(frozen=True)
class NeighborGraph:
    """Per-query neighbor indices into a reference cloud, ascending distance.

    indices/distances are (n_query, k_eff) with k_eff = min(k, n_reference);
    ties are broken by lower reference index.
    """

    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        dist = np.asarray(self.distances, dtype=np.float64)
        if idx.shape != dist.shape or idx.ndim != 2:
            raise InputError("indices and distances must be matching 2D arrays")
        if idx.shape[1] > 1 and np.any(np.diff(dist, axis=1) < 0):
            raise InputError("distances must be non-decreasing per row")
        object.__setattr__(self, "indices", _freeze(idx.copy()))
        object.__setattr__(self, "distances", _freeze(dist.copy()))

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class NodeGrouping:
    """Partition of a dense cloud by nearest superpoint."""

    groups: tuple  # tuple of int64 arrays, one per superpoint, ascending indices
    point_to_node: np.ndarray  # (n_dense,) superpoint index per dense point

    def __post_init__(self):
        ptn = np.asarray(self.point_to_node, dtype=np.int64)
        object.__setattr__(self, "point_to_node", _freeze(ptn.copy()))
        object.__setattr__(
            self, "groups", tuple(_freeze(np.asarray(g, dtype=np.int64).copy()) for g in self.groups)
        )
        total = sum(len(g) for g in self.groups)
        if total != len(self.point_to_node):
            raise InputError("groups do not partition the dense cloud")


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Average points per occupied voxel.

    Cell of a point is floor(coord / voxel) per axis; output order is ascending
    lexicographic cell coordinate.
    """
    if voxel <= 0:
        raise InputError("voxel must be positive")
    if len(cloud) == 0:
        raise InputError("empty cloud")
    pts = cloud.points
    keys = np.floor(pts / voxel).astype(np.int64)  # (n, 3)
    cells, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((cells.shape[0], 3))
    np.add.at(sums, inverse.reshape(-1), pts)
    counts = np.bincount(inverse.reshape(-1), minlength=cells.shape[0])
    return PointCloud(sums / counts[:, None])


def _squared_dists_to(ref: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Plain elementwise form; the grid backend must produce bit-identical values.
    diff = ref - q
    return diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2


def _knn_exhaustive(ref: np.ndarray, queries: np.ndarray, k_eff: int):
    n_ref = ref.shape[0]
    n_q = queries.shape[0]
    idx_out = np.empty((n_q, k_eff), dtype=np.int64)
    d2_out = np.empty((n_q, k_eff))
    block = max(1, int(2e7 // max(1, n_ref)))
    for start in range(0, n_q, block):
        q = queries[start : start + block]
        diff = q[:, None, :] - ref[None, :, :]
        d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        if k_eff == 1:
            # argmin keeps the first occurrence, i.e. the lowest tied index
            order = np.argmin(d2, axis=1)[:, None]
        elif k_eff >= n_ref:
            order = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
        else:
            part = np.argpartition(d2, k_eff - 1, axis=1)[:, :k_eff]
            part_d2 = np.take_along_axis(d2, part, axis=1)
            order = np.take_along_axis(part, np.lexsort((part, part_d2)), axis=1)
            # a tie crossing the partition boundary can admit a lower index
            # that argpartition dropped; resort those rows exactly
            kth = part_d2.max(axis=1)
            for r in np.flatnonzero(np.count_nonzero(d2 <= kth[:, None], axis=1) > k_eff):
                order[r] = np.argsort(d2[r], kind="stable")[:k_eff]
        idx_out[start : start + block] = order
        d2_out[start : start + block] = np.take_along_axis(d2, order, axis=1)
    return idx_out, d2_out


def _grid_cells(ref: np.ndarray, cell: float):
    keys = np.floor(ref / cell).astype(np.int64)
    order = np.lexsort((np.arange(ref.shape[0]), keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    boundary = np.ones(ref.shape[0], dtype=bool)
    boundary[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    starts = np.flatnonzero(boundary)
    ends = np.append(starts[1:], ref.shape[0])
    table = {}
    for s, e in zip(starts, ends):
        table[tuple(sorted_keys[s])] = order[s:e]
    return table


def _knn_grid(ref: np.ndarray, queries: np.ndarray, k_eff: int):
    n_ref = ref.shape[0]
    ext = ref.max(axis=0) - ref.min(axis=0)
    diag = float(np.linalg.norm(ext))
    if diag == 0.0:
        return _knn_exhaustive(ref, queries, k_eff)
    cell = diag / max(1.0, (n_ref / max(k_eff, 1)) ** (1.0 / 3.0))
    table = _grid_cells(ref, cell)
    ref_keys = np.floor(ref / cell).astype(np.int64)
    key_min, key_max = ref_keys.min(axis=0), ref_keys.max(axis=0)

    idx_out = np.empty((queries.shape[0], k_eff), dtype=np.int64)
    d2_out = np.empty((queries.shape[0], k_eff))
    for qi, q in enumerate(queries):
        base = np.floor(q / cell).astype(np.int64)
        # Rings beyond this cover no occupied cell, even for far-away queries.
        max_ring = int(np.maximum(np.abs(base - key_min), np.abs(base - key_max)).max()) + 1
        n_cand = 0
        kth_d2 = np.inf
        pool_idx = np.empty(0, dtype=np.int64)
        pool_d2 = np.empty(0)
        for ring in range(max_ring + 1):
            hits = []
            # Enumerate the Chebyshev shell clipped to the occupied-cell box.
            x0 = max(base[0] - ring, key_min[0])
            x1 = min(base[0] + ring, key_max[0])
            y0 = max(base[1] - ring, key_min[1])
            y1 = min(base[1] + ring, key_max[1])
            z0 = max(base[2] - ring, key_min[2])
            z1 = min(base[2] + ring, key_max[2])
            for cx in range(x0, x1 + 1):
                for cy in range(y0, y1 + 1):
                    for cz in range(z0, z1 + 1):
                        if max(abs(cx - base[0]), abs(cy - base[1]), abs(cz - base[2])) != ring:
                            continue
                        got = table.get((cx, cy, cz))
                        if got is not None:
                            hits.append(got)
            if hits:
                new_idx = np.concatenate(hits)
                new_d2 = _squared_dists_to(ref[new_idx], q)
                pool_idx = np.concatenate([pool_idx, new_idx])
                pool_d2 = np.concatenate([pool_d2, new_d2])
                n_cand = pool_idx.shape[0]
                if n_cand >= k_eff:
                    sel = np.lexsort((pool_idx, pool_d2))[:k_eff]
                    kth_d2 = pool_d2[sel[-1]]
            # Unexplored rings >= ring+1 cannot hold points closer than ring*cell.
            if n_cand >= k_eff and kth_d2 < (ring * cell) ** 2:
                break
        sel = np.lexsort((pool_idx, pool_d2))[:k_eff]
        idx_out[qi] = pool_idx[sel]
        d2_out[qi] = pool_d2[sel]
    return idx_out, d2_out


def knn(reference: PointCloud, queries: PointCloud, k: int) -> NeighborGraph:
    """Exact k nearest neighbors by Euclidean distance, ties broken by lower index."""
    if k < 1:
        raise InputError("k must be >= 1")
    if len(reference) == 0:
        raise InputError("empty cloud")
    k_eff = min(k, len(reference))
    ref, q = reference.points, queries.points
    if len(reference) <= KNN_GRID_THRESHOLD:
        idx, d2 = _knn_exhaustive(ref, q, k_eff)
    else:
        idx, d2 = _knn_grid(ref, q, k_eff)
    return NeighborGraph(idx, np.sqrt(d2))


def point_to_node_group(dense: PointCloud, superpoints: PointCloud) -> NodeGrouping:
    """Assign every dense point to its nearest superpoint (ties by lower index)."""
    if len(dense) == 0 or len(superpoints) == 0:
        raise InputError("empty cloud")
    nearest = knn(superpoints, dense, 1)
    ptn = nearest.indices[:, 0]
    order = np.argsort(ptn, kind="stable")
    counts = np.bincount(ptn, minlength=len(superpoints))
    splits = np.cumsum(counts)[:-1]
    groups = tuple(np.split(order, splits))
    return NodeGrouping(groups, ptn)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    return PointCloud(transform.apply(cloud.points))


def compose(t2: RigidTransform, t1: RigidTransform) -> RigidTransform:
    """Transform applying t1 first, then t2."""
    r = t2.r.m @ t1.r.m
    t = t2.r.m @ t1.t + t2.t
    return RigidTransform(Rotation(r), t)


def invert(transform: RigidTransform) -> RigidTransform:
    rt = transform.r.m.T
    return RigidTransform(Rotation(rt), -rt @ transform.t)


def random_rotation(seed: int) -> Rotation:
    """Uniform rotation over SO(3) via a normalized random quaternion."""
    rng = np.random.default_rng(seed)
    return _rotation_from_rng(rng)


def _rotation_from_rng(rng: np.random.Generator) -> Rotation:
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    m = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(m)


def farthest_point_sample(cloud: PointCloud, count: int) -> np.ndarray:
    """Indices of `count` farthest-point samples.

    The seed point is the one nearest the centroid; each step picks the point
    with the largest distance to the selected set. All ties resolve to the
    lower index, so the selection depends only on pairwise distances and is
    stable under rigid motion of the cloud.
    """
    n = len(cloud)
    if count < 1 or count > n:
        raise InputError(f"cannot sample {count} of {n} points")
    pts = cloud.points
    centroid = pts.mean(axis=0)
    d0 = _squared_dists_to(pts, centroid)
    selected = np.empty(count, dtype=np.int64)
    selected[0] = int(np.argmin(d0))
    min_d2 = _squared_dists_to(pts, pts[selected[0]])
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        min_d2 = np.minimum(min_d2, _squared_dists_to(pts, pts[nxt]))
    return selected


def overlap_ratio(p: PointCloud, q: PointCloud, t_gt: RigidTransform, radius: float) -> float:
    """Fraction of P whose nearest neighbor in Q, after aligning P by t_gt, is within radius."""
    if radius <= 0:
        raise InputError("radius must be positive")
    if len(p) == 0 or len(q) == 0:
        raise InputError("empty cloud")
    aligned = apply_transform(p, t_gt)
    nearest = knn(q, aligned, 1)
    return float(np.mean(nearest.distances[:, 0] <= radius))


def _unit_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-12:
        v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _crop_one_side(
    cloud: PointCloud,
    direction: np.ndarray,
    ratio: float,
    other: PointCloud,
    to_other: RigidTransform,
    radius: float,
) -> np.ndarray:
    """Retained indices after cutting the higher-overlap side off `cloud`.

    A plane perpendicular to `direction` is placed so the discarded side holds
    round(ratio * n) points; of the two candidate sides, the one with the
    higher overlap ratio against `other` (under to_other) is discarded.
    """
    n = len(cloud)
    n_cut = int(round(ratio * n))
    if n_cut <= 0:
        return np.arange(n, dtype=np.int64)
    if n_cut >= n:
        raise DegenerateGeometryError("degenerate crop")
    proj = cloud.points @ direction
    order = np.lexsort((np.arange(n), proj))  # ascending projection, ties by index
    low_side, high_side = order[:n_cut], order[n - n_cut :]
    ov_low = overlap_ratio(cloud.select(low_side), other, to_other, radius)
    ov_high = overlap_ratio(cloud.select(high_side), other, to_other, radius)
    discard = high_side if ov_high >= ov_low else low_side
    keep = np.ones(n, dtype=bool)
    keep[discard] = False
    return np.flatnonzero(keep)


def random_crop_indices(
    p: PointCloud,
    q: PointCloud,
    t_gt: RigidTransform,
    ratio: float,
    overlap_radius: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Retained-index version of random_crop; directions for P and Q are drawn independently."""
    if not 0.0 < ratio < 1.0:
        raise InputError("ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    dir_p = _unit_direction(rng)
    dir_q = _unit_direction(rng)
    keep_p = _crop_one_side(p, dir_p, ratio, q, t_gt, overlap_radius)
    keep_q = _crop_one_side(q, dir_q, ratio, p, invert(t_gt), overlap_radius)
    return keep_p, keep_q


def random_crop(
    p: PointCloud,
    q: PointCloud,
    t_gt: RigidTransform,
    ratio: float,
    overlap_radius: float,
    seed: int,
) -> tuple[PointCloud, PointCloud]:
    """Plane-cut both clouds, discarding the side of each with the higher overlap."""
    keep_p, keep_q = random_crop_indices(p, q, t_gt, ratio, overlap_radius, seed)
    return p.select(keep_p), q.select(keep_q)
