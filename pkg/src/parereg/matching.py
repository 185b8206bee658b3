"""Coarse-to-fine correspondence extraction.

Superpoint features are mixed by interleaved self/cross attention, matched
with a dual-normalized Gaussian correlation, then each matched patch pair is
searched for point correspondences scored by matchability and saliency heads.
Every input here is rotation-invariant (invariant features and pairwise
distances), so the produced index pairs do not change when either cloud is
rigidly moved.

The self-attention positional term is a learned per-head distance-bucket
bias. This is a deliberate simplification of the geometric-transformer
embedding it stands in for; see README for the rationale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geom import PointCloud

N_COARSE_DEFAULT = 256
N_FINE_DEFAULT = 1000


# ---------------------------------------------------------------- parameters

def _freeze_matrix(w, rows=None, cols=None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise InputError(f"expected a matrix, got shape {w.shape}")
    if rows is not None and w.shape[0] != rows:
        raise InputError(f"expected {rows} rows, got {w.shape[0]}")
    if cols is not None and w.shape[1] != cols:
        raise InputError(f"expected {cols} columns, got {w.shape[1]}")
    if not np.isfinite(w).all():
        raise InputError("non-finite parameter matrix")
    w = w.copy()
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class AttentionParams:
    """One multi-head attention: query/key/value/output maps, all width x width."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        w_q = _freeze_matrix(self.w_q)
        width = w_q.shape[0]
        if w_q.shape != (width, width):
            raise InputError("attention maps must be square")
        object.__setattr__(self, "w_q", w_q)
        for name in ("w_k", "w_v", "w_o"):
            object.__setattr__(self, name, _freeze_matrix(getattr(self, name), width, width))

    @property
    def width(self) -> int:
        return self.w_q.shape[0]


@dataclass(frozen=True)
class RoundParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    bias_table: np.ndarray  # (heads, n_buckets) logits added to self-attention

    def __post_init__(self):
        object.__setattr__(self, "bias_table", _freeze_matrix(self.bias_table))


@dataclass(frozen=True)
class ContextParams:
    in_proj: np.ndarray  # (width, d_in)
    rounds: tuple  # RoundParams, applied in order
    out_proj: np.ndarray  # (d_out, width)
    heads: int
    bucket_size: float

    def __post_init__(self):
        in_proj = _freeze_matrix(self.in_proj)
        width = in_proj.shape[0]
        if self.heads < 1 or width % self.heads:
            raise InputError("head count must divide the attention width")
        if self.bucket_size <= 0:
            raise InputError("bucket size must be positive")
        object.__setattr__(self, "in_proj", in_proj)
        object.__setattr__(self, "out_proj", _freeze_matrix(self.out_proj, None, width))
        rounds = tuple(self.rounds)
        for r in rounds:
            if r.self_attn.width != width or r.cross_attn.width != width:
                raise InputError("attention width mismatch across rounds")
            if r.bias_table.shape[0] != self.heads:
                raise InputError("bias table must have one row per head")
        object.__setattr__(self, "rounds", rounds)


@dataclass(frozen=True)
class MatchHeads:
    """Matchability map (square) and saliency map (single row)."""

    w_m: np.ndarray
    w_s: np.ndarray

    def __post_init__(self):
        w_m = _freeze_matrix(self.w_m)
        if w_m.shape[0] != w_m.shape[1]:
            raise InputError("matchability map must be square")
        object.__setattr__(self, "w_m", w_m)
        object.__setattr__(self, "w_s", _freeze_matrix(self.w_s, 1, w_m.shape[1]))


@dataclass(frozen=True)
class SuperpointMatches:
    """Top coarse pairs, scores descending, ties by (x, y)."""

    x: np.ndarray
    y: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64).copy()
        y = np.asarray(self.y, dtype=np.int64).copy()
        s = np.asarray(self.scores, dtype=np.float64).copy()
        if not (x.shape == y.shape == s.shape) or x.ndim != 1 or len(x) == 0:
            raise InputError("matches need aligned non-empty index and score arrays")
        if (np.diff(s) > 0).any():
            raise InputError("scores must be non-increasing")
        for a in (x, y, s):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class PointMatches:
    """Top fine pairs with their parent coarse-match index, scores descending."""

    x: np.ndarray
    y: np.ndarray
    scores: np.ndarray
    patch: np.ndarray  # index into the SuperpointMatches that produced each pair

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64).copy()
        y = np.asarray(self.y, dtype=np.int64).copy()
        s = np.asarray(self.scores, dtype=np.float64).copy()
        p = np.asarray(self.patch, dtype=np.int64).copy()
        if not (x.shape == y.shape == s.shape == p.shape) or x.ndim != 1 or len(x) == 0:
            raise InputError("matches need aligned non-empty arrays")
        if (np.diff(s) > 0).any():
            raise InputError("scores must be non-increasing")
        for a in (x, y, s, p):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "patch", p)

    def __len__(self) -> int:
        return len(self.x)


# ---------------------------------------------------------------- attention

def _softmax_last(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _mha(p: AttentionParams, heads: int, query: np.ndarray, key: np.ndarray, bias) -> np.ndarray:
    n, width = query.shape
    d = width // heads
    dt = query.dtype

    def split(h, w):
        return (h @ w.T.astype(dt)).reshape(-1, heads, d).transpose(1, 0, 2)

    q = split(query, p.w_q)
    k = split(key, p.w_k)
    v = split(key, p.w_v)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    if bias is not None:
        logits = logits + bias.astype(dt)
    attn = _softmax_last(logits)
    mixed = (attn @ v).transpose(1, 0, 2).reshape(n, width)
    return mixed @ p.w_o.T.astype(dt)


def _bucket_bias(table: np.ndarray, points: np.ndarray, bucket_size: float) -> np.ndarray:
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    idx = np.minimum((d / bucket_size).astype(np.int64), table.shape[1] - 1)
    return table[:, idx]  # (heads, n, n)


def context_attention(
    params: ContextParams,
    x_p: np.ndarray,
    x_q: np.ndarray,
    cloud_p: PointCloud,
    cloud_q: PointCloud,
):
    """Three interleaved self/cross rounds over invariant superpoint features."""
    x_p = np.asarray(x_p)
    x_q = np.asarray(x_q)
    if x_p.shape[1] != params.in_proj.shape[1] or x_q.shape[1] != params.in_proj.shape[1]:
        raise InputError("feature width does not match the input projection")
    if len(cloud_p) != len(x_p) or len(cloud_q) != len(x_q):
        raise InputError("feature and cloud cardinalities differ")
    dt = x_p.dtype
    h_p = x_p @ params.in_proj.T.astype(dt)
    h_q = x_q @ params.in_proj.T.astype(dt)
    for rnd in params.rounds:
        bias_p = _bucket_bias(rnd.bias_table, cloud_p.points, params.bucket_size)
        bias_q = _bucket_bias(rnd.bias_table, cloud_q.points, params.bucket_size)
        h_p = h_p + _mha(rnd.self_attn, params.heads, h_p, h_p, bias_p)
        h_q = h_q + _mha(rnd.self_attn, params.heads, h_q, h_q, bias_q)
        # Cross updates read the pre-update state of the other side.
        new_p = h_p + _mha(rnd.cross_attn, params.heads, h_p, h_q, None)
        new_q = h_q + _mha(rnd.cross_attn, params.heads, h_q, h_p, None)
        h_p, h_q = new_p, new_q
    return h_p @ params.out_proj.T.astype(dt), h_q @ params.out_proj.T.astype(dt)


# ---------------------------------------------------------------- coarse

def dual_normalized_scores(h_p: np.ndarray, h_q: np.ndarray) -> np.ndarray:
    """Gaussian correlation with dual normalization; entries in [0, 1]."""
    d2 = ((h_p[:, None, :] - h_q[None, :, :]) ** 2).sum(axis=-1)
    s = np.exp(-d2)
    denom = s.sum(axis=1, keepdims=True) * s.sum(axis=0, keepdims=True)
    return np.where(s > 0, s * s / np.where(denom > 0, denom, 1.0), 0.0)


def superpoint_match(h_p: np.ndarray, h_q: np.ndarray, n_c: int = N_COARSE_DEFAULT) -> SuperpointMatches:
    if len(h_p) == 0 or len(h_q) == 0:
        raise InputError("cannot match empty feature sets")
    if n_c < 1:
        raise InputError("n_c must be positive")
    scores = dual_normalized_scores(np.asarray(h_p, dtype=np.float64), np.asarray(h_q, dtype=np.float64))
    n, m = scores.shape
    flat = scores.reshape(-1)
    xi, yi = np.divmod(np.arange(n * m), m)
    order = np.lexsort((yi, xi, -flat))[: min(n_c, n * m)]
    return SuperpointMatches(xi[order], yi[order], flat[order])


# ---------------------------------------------------------------- fine

def point_match(
    heads: MatchHeads,
    group_x: np.ndarray,
    group_y: np.ndarray,
    x_p: np.ndarray,
    x_q: np.ndarray,
):
    """Score all pairs within one matched patch; returns global index pairs
    with their soft-assignment scores, descending (ties by (x, y))."""
    group_x = np.asarray(group_x, dtype=np.int64)
    group_y = np.asarray(group_y, dtype=np.int64)
    if len(group_x) == 0 or len(group_y) == 0:
        raise InputError("empty group")
    fx = np.asarray(x_p, dtype=np.float64)[group_x]
    fy = np.asarray(x_q, dtype=np.float64)[group_y]
    width = fx.shape[1]
    m = (fx @ heads.w_m.T) @ (fy @ heads.w_m.T).T / np.sqrt(width)
    sig_x = _sigmoid(fx @ heads.w_s.T)[:, 0]
    sig_y = _sigmoid(fy @ heads.w_s.T)[:, 0]
    z = sig_x[:, None] * sig_y[None, :] * _softmax_last(m) * _softmax_last(m.T).T
    a, b = z.shape
    flat = z.reshape(-1)
    li, lj = np.divmod(np.arange(a * b), b)
    gx = group_x[li]
    gy = group_y[lj]
    order = np.lexsort((gy, gx, -flat))
    return gx[order], gy[order], flat[order]


def select_correspondences(patch_results, n_f: int = N_FINE_DEFAULT) -> PointMatches:
    """Global top-n_f across patches; ties resolved by (patch index, x, y)."""
    xs, ys, zs, ps = [], [], [], []
    for patch_idx, (gx, gy, z) in enumerate(patch_results):
        xs.append(np.asarray(gx, dtype=np.int64))
        ys.append(np.asarray(gy, dtype=np.int64))
        zs.append(np.asarray(z, dtype=np.float64))
        ps.append(np.full(len(gx), patch_idx, dtype=np.int64))
    if not xs or sum(len(a) for a in xs) == 0:
        raise InputError("no correspondences")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    z = np.concatenate(zs)
    p = np.concatenate(ps)
    order = np.lexsort((y, x, p, -z))[: min(n_f, len(x))]
    return PointMatches(x[order], y[order], z[order], p[order])


def match_features(
    context: ContextParams,
    heads: MatchHeads,
    super_inv_p: np.ndarray,
    super_inv_q: np.ndarray,
    superpoints_p: PointCloud,
    superpoints_q: PointCloud,
    point_inv_p: np.ndarray,
    point_inv_q: np.ndarray,
    groups_p,
    groups_q,
    n_c: int = N_COARSE_DEFAULT,
    n_f: int = N_FINE_DEFAULT,
):
    """Full coarse-to-fine pipeline; empty patches are skipped, not fatal."""
    h_p, h_q = context_attention(context, super_inv_p, super_inv_q, superpoints_p, superpoints_q)
    coarse = superpoint_match(h_p, h_q, n_c)
    results = []
    for x_hat, y_hat in zip(coarse.x, coarse.y):
        gx = groups_p[x_hat]
        gy = groups_q[y_hat]
        if len(gx) == 0 or len(gy) == 0:
            results.append((np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)))
            continue
        results.append(point_match(heads, gx, gy, point_inv_p, point_inv_q))
    return coarse, select_correspondences(results, n_f)


# ---------------------------------------------------------------- init

def _lecun_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = np.sqrt(3.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


def build_context_params(
    d_in: int,
    width: int,
    d_out: int,
    seed: int,
    rounds: int = 3,
    heads: int = 4,
    n_buckets: int = 8,
    bucket_size: float = 0.5,
) -> ContextParams:
    rng = np.random.default_rng(seed)

    def attn():
        return AttentionParams(
            *(_lecun_uniform(rng, (width, width), width) for _ in range(4))
        )

    built = tuple(
        RoundParams(attn(), attn(), _lecun_uniform(rng, (heads, n_buckets), n_buckets))
        for _ in range(rounds)
    )
    return ContextParams(
        in_proj=_lecun_uniform(rng, (width, d_in), d_in),
        rounds=built,
        out_proj=_lecun_uniform(rng, (d_out, width), width),
        heads=heads,
        bucket_size=bucket_size,
    )


def build_match_heads(d: int, seed: int) -> MatchHeads:
    rng = np.random.default_rng(seed)
    return MatchHeads(_lecun_uniform(rng, (d, d), d), _lecun_uniform(rng, (1, d), d))
