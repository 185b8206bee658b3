"""PARE-Conv operator, correlation mini-network, residual blocks, and backbone.

Feature maps are (n, C, 3) vector-neuron arrays. Geometry (sampling, knn,
spatial statistics) always runs in float64; features are stored in the dtype
requested for the forward pass while every layer computes in double, as the
vector-neuron ops do. Per-point outputs are ordered by point index, and every
sampling step is distance-based, so all outputs are stable under rigid motion
of the input cloud at the index level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError
from .geom import (
    NeighborGraph,
    NodeGrouping,
    PointCloud,
    farthest_point_sample,
    knn,
    point_to_node_group,
)
from .vn import (
    VnInvariantHead,
    VnLinear,
    VnNonlinearity,
    l2_normalize,
    vn_concat,
    vn_invariant,
    vn_linear,
    vn_relu,
)

MODES = ("node", "edge")


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class KernelBank:
    """K shadow-kernel weight matrices stacked as (K, C_out, C_phi)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[0] < 1:
            raise InputError(f"expected (K, C_out, C_phi) weights, got {w.shape}")
        if not np.isfinite(w).all():
            raise InputError("kernel weights contain non-finite entries")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class CorrelationNet:
    """VN-MLP over spatial stats, magnitudes, then a scalar MLP to K logits."""

    vn_pairs: tuple  # ((VnLinear, VnNonlinearity), ...)
    mlp: tuple  # ((w, b), ...), last layer maps to K

    def __post_init__(self):
        if not self.mlp:
            raise InputError("correlation MLP needs at least one layer")
        frozen = []
        for w, b in self.mlp:
            w = np.asarray(w, dtype=np.float64).copy()
            b = np.asarray(b, dtype=np.float64).copy()
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InputError("each MLP layer needs (out, in) weights and (out,) bias")
            w.setflags(write=False)
            b.setflags(write=False)
            frozen.append((w, b))
        object.__setattr__(self, "mlp", tuple(frozen))
        object.__setattr__(self, "vn_pairs", tuple(self.vn_pairs))

    @property
    def k(self) -> int:
        return self.mlp[-1][0].shape[0]


@dataclass(frozen=True)
class ResBlockParams:
    """Bottleneck residual block: conv to C_out/2, VN-ReLU, VN-block to C_out."""

    bank: KernelBank
    net: CorrelationNet
    mode: str
    conv_relu: VnNonlinearity
    expand: VnLinear
    expand_relu: VnNonlinearity
    shortcut: Optional[VnLinear]  # None when C_in == C_out

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if self.bank.k != self.net.k:
            raise InputError("kernel bank and correlation net disagree on K")


@dataclass(frozen=True)
class FusionParams:
    """VN-block fusing upsampled and skipped features in the decoder."""

    lin: VnLinear
    relu: VnNonlinearity


@dataclass(frozen=True)
class BackboneConfig:
    voxel: float = 0.025  # preprocessing grid size; the pyramid itself uses FPS
    k: int = 35
    ratio: float = 2.0  # 2.5 for the outdoor preset
    kernels: int = 4
    mode: str = "edge"
    stage_channels: tuple = (32, 64, 128)  # encoder vector channels per stage
    decoder_channels: tuple = (64, 85)  # level-2 fusion, then point width d_tilde
    corr_vn_channels: tuple = (16,)
    corr_mlp_hidden: tuple = (16,)

    def __post_init__(self):
        if self.voxel <= 0:
            raise InputError("voxel size must be positive")
        if self.k < 1 or self.kernels < 1:
            raise InputError("k and kernels must be positive")
        if self.ratio <= 1.0:
            raise InputError("downsampling ratio must exceed 1")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if len(self.stage_channels) != 3 or len(self.decoder_channels) != 2:
            raise InputError("expected 3 encoder stages and 2 decoder levels")
        for c in self.stage_channels:
            if c < 2 or c % 2:
                raise InputError("encoder widths must be even and at least 2")
        for c in self.decoder_channels:
            if c < 1:
                raise InputError("decoder widths must be positive")


@dataclass(frozen=True)
class BackboneParams:
    config: BackboneConfig
    stages: tuple  # 3 tuples of 3 ResBlockParams (first of each is strided)
    fusions: tuple  # 2 FusionParams
    head_super: VnInvariantHead
    head_point: VnInvariantHead


@dataclass(frozen=True)
class FeaturePyramid:
    superpoints: PointCloud
    super_feats: np.ndarray  # (n_super, d_hat, 3)
    super_invariant: np.ndarray  # (n_super, 3 d_hat)
    points: PointCloud
    point_feats: np.ndarray  # (n_point, d_tilde, 3)
    point_invariant: np.ndarray  # (n_point, 3 d_tilde)
    grouping: NodeGrouping
    level_indices: tuple  # FPS chains: level i+1 indices into level i


# ---------------------------------------------------------------- operator

def spatial_stats(center: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Per-neighbor equivariant stats: rows [p_ij, mean_j p_ij, p_ij x mean]."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    neighbors = np.asarray(neighbors, dtype=np.float64).reshape(-1, 3)
    if neighbors.shape[0] < 1:
        raise InputError("need at least one neighbor")
    return _spatial_stats_batch(center[None], neighbors[None])[0]


def _spatial_stats_batch(query_pts: np.ndarray, nbr_pts: np.ndarray) -> np.ndarray:
    off = nbr_pts - query_pts[:, None, :]  # (n_q, k, 3)
    mean = off.mean(axis=1)  # (n_q, 3)
    mean_b = np.broadcast_to(mean[:, None, :], off.shape)
    cross = np.cross(off, mean_b)
    return np.stack([off, mean_b, cross], axis=2)  # (n_q, k, 3, 3)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def correlation_scores(net: CorrelationNet, stats: np.ndarray) -> np.ndarray:
    """Rotation-invariant kernel correlation: softmax(MLP(|VN-MLP(stats)|))."""
    x = np.asarray(stats)
    for lin, rel in net.vn_pairs:
        x = vn_relu(rel, vn_linear(lin, x))
    out_dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.dtype(np.float64)
    h = np.linalg.norm(x, axis=-1).astype(np.float64, copy=False)  # magnitudes, (..., d)
    for w, b in net.mlp[:-1]:
        h = np.maximum(h @ w.T + b, 0)
    w, b = net.mlp[-1]
    return _softmax(h @ w.T + b).astype(out_dtype, copy=False)


def _phi(mode: str, nbr_feats: np.ndarray, center_feats: np.ndarray) -> np.ndarray:
    """Neighbor message: node keeps F_j, edge stacks [F_j - F_i ; F_j]."""
    if mode == "node":
        return nbr_feats
    return np.concatenate([nbr_feats - center_feats[:, None], nbr_feats], axis=-2)


def _pare_conv_batch(
    bank: KernelBank,
    gamma: np.ndarray,  # (n_q, k, K)
    phi: np.ndarray,  # (n_q, k, C_phi, 3)
) -> np.ndarray:
    if phi.shape[-2] != bank.weights.shape[2]:
        raise InputError(
            f"kernel expects {bank.weights.shape[2]} message channels, got {phi.shape[-2]}"
        )
    out_dtype = phi.dtype if np.issubdtype(phi.dtype, np.floating) else np.dtype(np.float64)
    gamma64 = gamma.astype(np.float64, copy=False)
    phi64 = phi.astype(np.float64, copy=False)
    out = None
    for k in range(bank.k):
        pooled = np.einsum("qj,qjci->qci", gamma64[..., k], phi64)
        term = bank.weights[k] @ pooled
        out = term if out is None else out + term
    return out.astype(out_dtype, copy=False)


def pare_conv(
    bank: KernelBank,
    net: CorrelationNet,
    mode: str,
    center_idx: int,
    neighbors: np.ndarray,
    features: np.ndarray,
    cloud: PointCloud,
) -> np.ndarray:
    """Convolution at one point of `cloud`; neighbors index into the same cloud."""
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    neighbors = np.asarray(neighbors, dtype=np.int64).reshape(-1)
    features = np.asarray(features)
    stats = _spatial_stats_batch(
        cloud.points[center_idx][None], cloud.points[neighbors][None]
    ).astype(features.dtype)
    gamma = correlation_scores(net, stats)  # (1, k, K)
    phi = _phi(mode, features[neighbors][None], features[center_idx][None])
    return _pare_conv_batch(bank, gamma, phi)[0]


def _vn_block(lin: VnLinear, rel: VnNonlinearity, f: np.ndarray) -> np.ndarray:
    return vn_relu(rel, l2_normalize(vn_linear(lin, f)))


def pare_resblock(
    params: ResBlockParams,
    graph: NeighborGraph,
    support_feats: np.ndarray,  # (n_support, C, 3)
    support_pts: np.ndarray,  # (n_support, 3) float64
    query_pts: np.ndarray,  # (n_q, 3) float64
    query_center_idx: np.ndarray,  # (n_q,) indices into the support arrays
) -> np.ndarray:
    dtype = support_feats.dtype
    stats = _spatial_stats_batch(query_pts, support_pts[graph.indices]).astype(dtype)
    gamma = correlation_scores(params.net, stats)
    center_feats = support_feats[query_center_idx]
    phi = _phi(params.mode, support_feats[graph.indices], center_feats)
    y = _pare_conv_batch(params.bank, gamma, phi)
    y = vn_relu(params.conv_relu, y)
    y = _vn_block(params.expand, params.expand_relu, y)
    shortcut = center_feats
    if params.shortcut is not None:
        shortcut = vn_linear(params.shortcut, shortcut)
    return y + shortcut


def strided_block(
    params: ResBlockParams,
    sparse_idx: np.ndarray,
    dense_cloud: PointCloud,
    dense_feats: np.ndarray,
    k: int,
) -> np.ndarray:
    """Residual block whose queries are a sparse index subset of the support."""
    sparse_idx = np.asarray(sparse_idx, dtype=np.int64)
    sparse_pts = dense_cloud.points[sparse_idx]
    graph = knn(dense_cloud, PointCloud(sparse_pts), k)
    return pare_resblock(params, graph, dense_feats, dense_cloud.points, sparse_pts, sparse_idx)


def _entry_messages(stats: np.ndarray) -> np.ndarray:
    """Geometry lifting for the entry block, one 3-row message per neighbor.

    The raw stats rows [p_ij, mean, p_ij x mean] collapse to a single direction
    once the kernel scores are near-uniform: the pooled mean row is a multiple
    of the pooled offset row, and their cross vanishes with it. Re-weighting by
    the invariant radial profile |p_ij| / rho keeps the pooled rows in general
    position, so the downstream channels do not degenerate to a line.
    """
    off = stats[..., 0, :]
    mean = stats[..., 1, :]
    radius = np.linalg.norm(off, axis=-1, keepdims=True)
    rho = radius.mean(axis=-2, keepdims=True)
    radial = np.where(rho > 0, off * radius / np.where(rho > 0, rho, 1.0), off)
    return np.stack([off, radial, np.cross(radial, mean)], axis=-2)


def bootstrap_block(
    params: ResBlockParams,
    sparse_idx: np.ndarray,
    dense_cloud: PointCloud,
    k: int,
    dtype=np.float64,
) -> np.ndarray:
    """Entry block: no input features exist, so a radially weighted lifting of
    the spatial stats serves as the neighbor messages and its mean feeds the
    shortcut branch."""
    if params.shortcut is None:
        raise InputError("entry block needs a shortcut lifting the 3-channel stats")
    sparse_idx = np.asarray(sparse_idx, dtype=np.int64)
    sparse_pts = dense_cloud.points[sparse_idx]
    graph = knn(dense_cloud, PointCloud(sparse_pts), k)
    stats = _spatial_stats_batch(sparse_pts, dense_cloud.points[graph.indices]).astype(dtype)
    gamma = correlation_scores(params.net, stats)
    messages = _entry_messages(stats)
    y = _pare_conv_batch(params.bank, gamma, messages)
    y = vn_relu(params.conv_relu, y)
    y = _vn_block(params.expand, params.expand_relu, y)
    return y + vn_linear(params.shortcut, messages.mean(axis=1))


def nearest_upsample(
    sparse_feats: np.ndarray,
    sparse_cloud: PointCloud,
    dense_cloud: PointCloud,
    skip_feats: np.ndarray,
    fusion: FusionParams,
) -> np.ndarray:
    """Copy each dense point's nearest sparse feature, concat skip, fuse."""
    nearest = knn(sparse_cloud, dense_cloud, 1).indices[:, 0]
    stacked = vn_concat(sparse_feats[nearest], skip_feats)
    return _vn_block(fusion.lin, fusion.relu, stacked)


# ---------------------------------------------------------------- init

def _lecun_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    a = np.sqrt(3.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


def _init_correlation_net(cfg: BackboneConfig, rng: np.random.Generator, corr_final: str):
    pairs = []
    c_in = 3
    for c_out in cfg.corr_vn_channels:
        pairs.append(
            (
                VnLinear(_lecun_uniform(rng, (c_out, c_in), c_in)),
                VnNonlinearity(_lecun_uniform(rng, (1, c_out), c_out)),
            )
        )
        c_in = c_out
    mlp = []
    h_in = c_in
    for h_out in cfg.corr_mlp_hidden:
        mlp.append((_lecun_uniform(rng, (h_out, h_in), h_in), np.zeros(h_out)))
        h_in = h_out
    if corr_final == "zero":
        # Zero logits keep the kernel mixing uniform until trained.
        mlp.append((np.zeros((cfg.kernels, h_in)), np.zeros(cfg.kernels)))
    else:
        mlp.append((_lecun_uniform(rng, (cfg.kernels, h_in), h_in), np.zeros(cfg.kernels)))
    return CorrelationNet(tuple(pairs), tuple(mlp))


def _init_resblock(
    cfg: BackboneConfig,
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    corr_final: str,
    message_channels: Optional[int] = None,
) -> ResBlockParams:
    mid = c_out // 2
    c_phi = message_channels if message_channels is not None else (
        c_in if cfg.mode == "node" else 2 * c_in
    )
    bound = np.sqrt(3.0 / (c_phi * cfg.kernels))
    bank = KernelBank(rng.uniform(-bound, bound, size=(cfg.kernels, mid, c_phi)))
    return ResBlockParams(
        bank=bank,
        net=_init_correlation_net(cfg, rng, corr_final),
        mode="node" if message_channels is not None else cfg.mode,
        conv_relu=VnNonlinearity(_lecun_uniform(rng, (1, mid), mid)),
        expand=VnLinear(_lecun_uniform(rng, (c_out, mid), mid)),
        expand_relu=VnNonlinearity(_lecun_uniform(rng, (1, c_out), c_out)),
        shortcut=VnLinear(_lecun_uniform(rng, (c_out, c_in), c_in)) if c_in != c_out else None,
    )


def build_backbone_params(
    cfg: BackboneConfig, seed: int, corr_final: str = "zero"
) -> BackboneParams:
    """Randomly initialized parameters; deterministic for a given seed.

    corr_final="zero" keeps initial correlation scores uniform; "random" makes
    them input-dependent, which the invariance tests rely on.
    """
    if corr_final not in ("zero", "random"):
        raise InputError("corr_final must be 'zero' or 'random'")
    rng = np.random.default_rng(seed)
    c1, c2, c3 = cfg.stage_channels
    stages = []
    # Stage 1: the strided entry block consumes 3-channel stats as messages.
    stage1 = (
        _init_resblock(cfg, rng, 3, c1, corr_final, message_channels=3),
        _init_resblock(cfg, rng, c1, c1, corr_final),
        _init_resblock(cfg, rng, c1, c1, corr_final),
    )
    stages.append(stage1)
    for c_prev, c_next in ((c1, c2), (c2, c3)):
        stages.append(
            (
                _init_resblock(cfg, rng, c_prev, c_next, corr_final),
                _init_resblock(cfg, rng, c_next, c_next, corr_final),
                _init_resblock(cfg, rng, c_next, c_next, corr_final),
            )
        )
    d2, d_tilde = cfg.decoder_channels
    fusions = (
        FusionParams(
            VnLinear(_lecun_uniform(rng, (d2, c3 + c2), c3 + c2)),
            VnNonlinearity(_lecun_uniform(rng, (1, d2), d2)),
        ),
        FusionParams(
            VnLinear(_lecun_uniform(rng, (d_tilde, d2 + c1), d2 + c1)),
            VnNonlinearity(_lecun_uniform(rng, (1, d_tilde), d_tilde)),
        ),
    )
    head_super = VnInvariantHead(_lecun_uniform(rng, (3, c3), c3))
    head_point = VnInvariantHead(_lecun_uniform(rng, (3, d_tilde), d_tilde))
    return BackboneParams(cfg, tuple(stages), fusions, head_super, head_point)


# ---------------------------------------------------------------- backbone

def _level_counts(n0: int, ratio: float) -> tuple:
    counts = [n0]
    for _ in range(3):
        counts.append(int(round(counts[-1] / ratio)))
    return tuple(counts)


def backbone_forward(params: BackboneParams, cloud: PointCloud, dtype=np.float64) -> FeaturePyramid:
    """Hierarchical forward pass: 3 strided encoder stages, 2 decoder levels.

    Level 0 is the input cloud; levels 1..3 are farthest-point subsets, each
    1/ratio the size of the previous. Superpoint features live at level 3,
    point features at level 1. `dtype` is the storage precision of the
    returned feature arrays; the forward itself runs in double. Normalizing
    layers amplify rounding noise wherever a feature cancels, so computing in
    single end to end loses about three digits of equivariance over the full
    stack; quantizing only the results keeps the certified bounds.
    """
    cfg = params.config
    n0 = len(cloud)
    counts = _level_counts(n0, cfg.ratio)
    if counts[3] < 2:
        raise InputError("cloud too small")

    clouds = [cloud]
    level_indices = []
    for level in range(3):
        idx = farthest_point_sample(clouds[level], counts[level + 1])
        level_indices.append(idx)
        clouds.append(clouds[level].select(idx))

    k = cfg.k
    feats = [None] * 4
    # Stage 1: bootstrap strided block from raw geometry, then two blocks on level 1.
    entry, b1, b2 = params.stages[0]
    f = bootstrap_block(entry, level_indices[0], clouds[0], k, np.float64)
    graph1 = knn(clouds[1], clouds[1], k)
    own1 = np.arange(len(clouds[1]))
    f = pare_resblock(b1, graph1, f, clouds[1].points, clouds[1].points, own1)
    f = pare_resblock(b2, graph1, f, clouds[1].points, clouds[1].points, own1)
    feats[1] = f
    # Stages 2 and 3.
    for stage in (1, 2):
        strided, b1, b2 = params.stages[stage]
        f = strided_block(strided, level_indices[stage], clouds[stage], feats[stage], k)
        graph = knn(clouds[stage + 1], clouds[stage + 1], k)
        own = np.arange(len(clouds[stage + 1]))
        f = pare_resblock(b1, graph, f, clouds[stage + 1].points, clouds[stage + 1].points, own)
        f = pare_resblock(b2, graph, f, clouds[stage + 1].points, clouds[stage + 1].points, own)
        feats[stage + 1] = f

    super_feats = feats[3]
    super_invariant = vn_invariant(params.head_super, super_feats)
    up = nearest_upsample(feats[3], clouds[3], clouds[2], feats[2], params.fusions[0])
    point_feats = nearest_upsample(up, clouds[2], clouds[1], feats[1], params.fusions[1])
    point_invariant = vn_invariant(params.head_point, point_feats)
    grouping = point_to_node_group(clouds[1], clouds[3])
    return FeaturePyramid(
        superpoints=clouds[3],
        super_feats=super_feats.astype(dtype),
        super_invariant=super_invariant.astype(dtype),
        points=clouds[1],
        point_feats=point_feats.astype(dtype),
        point_invariant=point_invariant.astype(dtype),
        grouping=grouping,
        level_indices=tuple(level_indices),
    )
