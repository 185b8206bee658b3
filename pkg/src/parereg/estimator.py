"""Rigid-transform estimation: Procrustes, feature-based hypotheses, LGR, RANSAC.

All numerics run in double precision on a dependency-free 3x3 SVD (cyclic
Jacobi on H^T H plus polar reconstruction) so results are bit-stable across
platforms. numpy's SVD is used only as an oracle in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateGeometryError, InputError
from .geom import RigidTransform, Rotation

JACOBI_SWEEPS = 30
JACOBI_OFF_TOL = 1e-14  # relative to the Frobenius norm of the input
RANK_TOL = 1e-9  # second singular value below RANK_TOL * first => underdetermined

HYPOTHESIS_SOURCES = ("feature", "ransac", "refined", "lgr")


# ---------------------------------------------------------------- containers

@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched (src, dst) pairs with optional weights and equivariant features.

    features, when present, is a pair of (n, C, 3) arrays: per-correspondence
    vector features from the source and target clouds.
    """

    src: np.ndarray
    dst: np.ndarray
    weights: Optional[np.ndarray] = None
    features: Optional[tuple] = None

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.float64)
        dst = np.asarray(self.dst, dtype=np.float64)
        if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
            raise InputError(f"src/dst must be matching (n, 3), got {src.shape} {dst.shape}")
        if src.shape[0] < 1:
            raise InputError("correspondence set is empty")
        if not (np.isfinite(src).all() and np.isfinite(dst).all()):
            raise InputError("correspondences contain non-finite coordinates")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (src.shape[0],) or not np.isfinite(w).all() or (w < 0).any():
                raise InputError("weights must be finite non-negative, one per pair")
            object.__setattr__(self, "weights", w)
        if self.features is not None:
            fp = np.asarray(self.features[0], dtype=np.float64)
            fq = np.asarray(self.features[1], dtype=np.float64)
            if fp.shape != fq.shape or fp.ndim != 3 or fp.shape[0] != src.shape[0] or fp.shape[2] != 3:
                raise InputError("features must be a pair of matching (n, C, 3) arrays")
            object.__setattr__(self, "features", (fp, fq))

    def __len__(self) -> int:
        return self.src.shape[0]


@dataclass(frozen=True)
class Hypothesis:
    transform: RigidTransform
    inlier_count: int
    source: str

    def __post_init__(self):
        if self.source not in HYPOTHESIS_SOURCES:
            raise InputError(f"unknown hypothesis source {self.source!r}")


@dataclass(frozen=True)
class EstimatorConfig:
    tau_d: float = 0.1  # acceptance radius, meters (0.6 for the outdoor preset)
    refine_iterations: int = 5
    ransac_sample: int = 3
    budget: int = 1000

    def __post_init__(self):
        if self.tau_d <= 0:
            raise InputError("tau_d must be positive")
        if self.ransac_sample < 3:
            raise InputError("ransac sample size must be at least 3")
        if self.budget < 1:
            raise InputError("budget must be at least 1")


# ---------------------------------------------------------------- 3x3 SVD

def _jacobi_eigh_3x3(a: np.ndarray):
    """Eigendecomposition of a symmetric 3x3 via cyclic Jacobi rotations.

    Returns eigenvalues descending and the matching orthonormal column
    eigenvectors. Converges when the largest off-diagonal entry drops below
    JACOBI_OFF_TOL relative to the input Frobenius norm, 30-sweep cap.
    """
    a = a.astype(np.float64).copy()
    v = np.eye(3)
    fro = float(np.sqrt((a * a).sum()))
    if fro == 0.0:
        return np.zeros(3), v
    stop = JACOBI_OFF_TOL * fro
    for _ in range(JACOBI_SWEEPS):
        off = max(abs(a[0, 1]), abs(a[0, 2]), abs(a[1, 2]))
        if off <= stop:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            app, aqq = a[p, p], a[q, q]
            a[p, p] = app - t * apq
            a[q, q] = aqq + t * apq
            a[p, q] = a[q, p] = 0.0
            r = 3 - p - q  # the remaining index
            arp, arq = a[r, p], a[r, q]
            a[r, p] = a[p, r] = c * arp - s * arq
            a[r, q] = a[q, r] = s * arp + c * arq
            vp = v[:, p].copy()
            v[:, p] = c * vp - s * v[:, q]
            v[:, q] = s * vp + c * v[:, q]
    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    return lam[order], v[:, order]


def _complete_orthonormal(cols: list) -> np.ndarray:
    """Extend up to 3 orthonormal columns to a full basis."""
    for e in np.eye(3):
        if len(cols) == 3:
            break
        w = e.copy()
        for c in cols:
            w -= (c @ w) * c
        n = float(np.linalg.norm(w))
        if n > 0.5:  # at least one basis vector keeps sqrt(1/3) of its norm
            cols.append(w / n)
    return np.stack(cols, axis=1)


def svd3(h: np.ndarray):
    """SVD of a 3x3 matrix: h = u @ diag(s) @ vt, s descending, u/v orthonormal."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise InputError(f"expected 3x3 matrix, got {h.shape}")
    if not np.isfinite(h).all():
        raise InputError("matrix contains non-finite entries")
    lam, v = _jacobi_eigh_3x3(h.T @ h)
    s = np.sqrt(np.clip(lam, 0.0, None))
    cols: list = []
    for i in range(3):
        if s[0] == 0.0 or s[i] <= s[0] * 1e-13:
            break
        u_i = h @ v[:, i]
        for c in cols:
            u_i = u_i - (c @ u_i) * c
        n = float(np.linalg.norm(u_i))
        if n <= s[0] * 1e-13:
            break
        cols.append(u_i / n)
    u = _complete_orthonormal(cols)
    return u, s, v.T


def _det3(m: np.ndarray) -> float:
    return float(
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


def _rotation_from_cross_covariance(h: np.ndarray, error: str) -> Rotation:
    u, s, vt = svd3(h)
    if s[1] <= RANK_TOL * s[0] or s[0] == 0.0:
        raise DegenerateGeometryError(error)
    v = vt.T
    d = _det3(v @ u.T)
    r = (v * np.array([1.0, 1.0, d])) @ u.T  # scales v's third column by d
    return Rotation(r)


# ---------------------------------------------------------------- estimators

def procrustes(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Weighted least-squares rigid fit R @ src + t ~= dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InputError(f"src/dst must be matching (n, 3), got {src.shape} {dst.shape}")
    n = src.shape[0]
    if weights is None:
        w = np.full(n, 1.0 / max(n, 1))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or (w < 0).any() or not np.isfinite(w).all():
            raise InputError("weights must be finite non-negative, one per pair")
        total = w.sum()
        if total <= 0:
            raise InputError("weights sum to zero")
        w = w / total
    p_bar = w @ src
    q_bar = w @ dst
    sp = src - p_bar
    dq = dst - q_bar
    h = (sp * w[:, None]).T @ dq
    rot = _rotation_from_cross_covariance(h, "degenerate configuration")
    t = q_bar - rot.m @ p_bar
    return RigidTransform(rot, t)


def fit_rotation_from_features(fp: np.ndarray, fq: np.ndarray) -> Rotation:
    """Best rotation aligning the channels of fp onto fq (fq ~= fp @ R.T)."""
    fp = np.asarray(fp, dtype=np.float64)
    fq = np.asarray(fq, dtype=np.float64)
    if fp.shape != fq.shape or fp.ndim != 2 or fp.shape[1] != 3:
        raise InputError(f"features must be matching (C, 3), got {fp.shape} {fq.shape}")
    if fp.shape[0] < 2:
        raise InputError("need at least 2 channels to constrain a rotation")
    h = fp.T @ fq
    return _rotation_from_cross_covariance(h, "underdetermined rotation")


def count_inliers(transform: RigidTransform, corrs: CorrespondenceSet, tau_d: float) -> int:
    """Pairs with Euclidean residual strictly below tau_d."""
    if tau_d <= 0:
        raise InputError("tau_d must be positive")
    residual = np.linalg.norm(transform.apply(corrs.src) - corrs.dst, axis=1)
    return int(np.count_nonzero(residual < tau_d))


def hypothesis_from_correspondence(corrs: CorrespondenceSet, index: int, config: EstimatorConfig) -> Hypothesis:
    """One transform per matched pair: rotation from its feature pair, then
    the translation that maps the source point exactly onto the target."""
    if corrs.features is None:
        raise InputError("correspondence set has no attached features")
    fp, fq = corrs.features
    rot = fit_rotation_from_features(fp[index], fq[index])
    t = corrs.dst[index] - rot.m @ corrs.src[index]
    transform = RigidTransform(rot, t)
    return Hypothesis(transform, count_inliers(transform, corrs, config.tau_d), "feature")


def propose_and_select(corrs: CorrespondenceSet, config: EstimatorConfig) -> Hypothesis:
    """Generate a hypothesis per correspondence (up to the budget), keep the
    one with the most inliers; ties go to the lowest correspondence index."""
    if corrs.features is None:
        raise InputError("correspondence set has no attached features")
    best: Optional[Hypothesis] = None
    for i in range(min(len(corrs), config.budget)):
        try:
            h = hypothesis_from_correspondence(corrs, i, config)
        except DegenerateGeometryError:
            continue
        if best is None or h.inlier_count > best.inlier_count:
            best = h
    if best is None:
        raise DegenerateGeometryError("no valid hypothesis")
    return best


def refine(
    h: Hypothesis,
    corrs: CorrespondenceSet,
    config: EstimatorConfig,
    weights: Optional[np.ndarray] = None,
) -> Hypothesis:
    """Iterative re-fit on the current inlier set (local-to-global refinement).

    Inlier count never decreases: an iteration that would lose inliers exits
    the loop instead. Fewer than 3 inliers leaves the hypothesis unchanged
    (the source keeps its original tag in that case).
    """
    current = h
    for _ in range(config.refine_iterations):
        residual = np.linalg.norm(current.transform.apply(corrs.src) - corrs.dst, axis=1)
        mask = residual < config.tau_d
        if int(mask.sum()) < 3:
            return current
        try:
            fitted = procrustes(
                corrs.src[mask],
                corrs.dst[mask],
                None if weights is None else weights[mask],
            )
        except DegenerateGeometryError:
            return current
        count = count_inliers(fitted, corrs, config.tau_d)
        if count < current.inlier_count:
            return current
        previous = current
        current = Hypothesis(fitted, count, "refined")
        drift = np.abs(fitted.r.m - previous.transform.r.m).max()
        if count == previous.inlier_count and drift < 1e-15:
            break
    return current


def ransac(corrs: CorrespondenceSet, config: EstimatorConfig, seed: int) -> Hypothesis:
    """Sample-3 RANSAC baseline at the same hypothesis budget as the proposer."""
    n = len(corrs)
    if n < config.ransac_sample:
        raise InputError(f"need at least {config.ransac_sample} pairs, have {n}")
    rng = np.random.default_rng(seed)
    best: Optional[Hypothesis] = None
    for _ in range(config.budget):
        pick = rng.choice(n, size=config.ransac_sample, replace=False)
        try:
            transform = procrustes(corrs.src[pick], corrs.dst[pick])
        except DegenerateGeometryError:
            continue
        count = count_inliers(transform, corrs, config.tau_d)
        if best is None or count > best.inlier_count:
            best = Hypothesis(transform, count, "ransac")
    if best is None:
        raise DegenerateGeometryError("no valid hypothesis")
    return best


def lgr_propose(corrs: CorrespondenceSet, patch_ids: np.ndarray, config: EstimatorConfig) -> Hypothesis:
    """Patch-wise Procrustes hypotheses, best by global inlier count.

    patch_ids labels each correspondence with the patch (superpoint pair) it
    came from; patches are visited in ascending id order up to the budget.
    """
    patch_ids = np.asarray(patch_ids, dtype=np.int64)
    if patch_ids.shape != (len(corrs),):
        raise InputError("patch_ids must label every correspondence")
    best: Optional[Hypothesis] = None
    used = 0
    for pid in np.unique(patch_ids):
        if used >= config.budget:
            break
        used += 1
        mask = patch_ids == pid
        if int(mask.sum()) < 3:
            continue
        try:
            transform = procrustes(
                corrs.src[mask],
                corrs.dst[mask],
                None if corrs.weights is None else corrs.weights[mask],
            )
        except DegenerateGeometryError:
            continue
        count = count_inliers(transform, corrs, config.tau_d)
        if best is None or count > best.inlier_count:
            best = Hypothesis(transform, count, "lgr")
    if best is None:
        raise DegenerateGeometryError("no valid hypothesis")
    return best
