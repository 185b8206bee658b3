"""Vector-neuron algebra: equivariant linear maps, nonlinearity, invariant readout.

A vector feature is any ndarray of shape (..., C, 3): C channels, each a
3-vector neuron. Rotating the underlying cloud by R maps F to F @ R.T; every
layer here commutes with that action, and the invariant readout cancels it.
Ops return the input's dtype but always compute in double: storage precision
belongs to the caller, arithmetic precision does not survive the chained
normalizations in single.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


def _check_weights(w: np.ndarray, ndim: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != ndim:
        raise InputError(f"expected {ndim}D weights, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise InputError("weights contain non-finite entries")
    w = w.copy()
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class VnLinear:
    """Channel-mixing map F -> w @ F, w of shape (C_out, C_in)."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", _check_weights(self.w, 2))

    @property
    def c_in(self) -> int:
        return self.w.shape[1]

    @property
    def c_out(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class VnNonlinearity:
    """Shared direction predictor u of shape (1, C) for the half-space ReLU."""

    u: np.ndarray

    def __post_init__(self):
        u = _check_weights(self.u, 2)
        if u.shape[0] != 1:
            raise InputError(f"direction predictor must be 1xC, got {u.shape}")
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class VnInvariantHead:
    """Three stacked channel maps producing an equivariant 3x3 frame."""

    w: np.ndarray  # (3, C)

    def __post_init__(self):
        w = _check_weights(self.w, 2)
        if w.shape[0] != 3:
            raise InputError(f"invariant head must be 3xC, got {w.shape}")
        object.__setattr__(self, "w", w)


def _as_feature(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim < 2 or f.shape[-1] != 3:
        raise InputError(f"expected (..., C, 3) feature, got shape {f.shape}")
    return f


def _storage_dtype(f: np.ndarray) -> np.dtype:
    """Dtype an op's result is returned in: the input's own floating dtype.

    Features are stored in the caller's precision, but all arithmetic here
    runs in double; single-precision storage only quantizes results. Running
    the chained normalizations natively in single instead would amplify the
    storage noise of cancelled features far past single's own resolution.
    """
    if np.issubdtype(f.dtype, np.floating):
        return f.dtype
    return np.dtype(np.float64)


def _storage_eps(f: np.ndarray) -> float:
    return float(np.finfo(_storage_dtype(f)).eps)


def vn_linear(layer: VnLinear, f: np.ndarray) -> np.ndarray:
    f = _as_feature(f)
    if f.shape[-2] != layer.c_in:
        raise InputError(f"feature has {f.shape[-2]} channels, layer expects {layer.c_in}")
    out = layer.w @ f.astype(np.float64, copy=False)
    return out.astype(_storage_dtype(f), copy=False)


def vn_concat(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    return np.concatenate([_as_feature(f1), _as_feature(f2)], axis=-2)


def vn_relu(layer: VnNonlinearity, f: np.ndarray) -> np.ndarray:
    f = _as_feature(f)
    if f.shape[-2] != layer.u.shape[1]:
        raise InputError(f"feature has {f.shape[-2]} channels, layer expects {layer.u.shape[1]}")
    work = f.astype(np.float64, copy=False)
    d = layer.u @ work  # (..., 1, 3)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if norm.size == 0:
        return f
    # A direction that has cancelled down to near the resolution of the
    # stored inputs has no usable orientation. Flooring the denominator
    # shrinks such directions smoothly toward zero (dot -> 0, pass-through)
    # instead of normalizing their noise up to unit length. The reference is
    # the direction a point with healthy channels would produce; a per-point
    # scale would leave small points exposed, since their absolute noise
    # comes from the map-wide mixing that formed them, not from their own
    # magnitude.
    eps = _storage_eps(f)
    scale = float(np.linalg.norm(layer.u)) * float(np.linalg.norm(work, axis=-1).max())
    denom = np.maximum(norm, (eps ** 0.25) * scale)
    d = np.where(denom > 0, d / np.where(denom > 0, denom, 1.0), 0.0)
    dot = np.sum(work * d, axis=-1, keepdims=True)  # (..., C, 1)
    out = np.where(dot >= 0, work, work - dot * d)
    return out.astype(_storage_dtype(f), copy=False)


def l2_normalize(f: np.ndarray) -> np.ndarray:
    f = _as_feature(f)
    work = f.astype(np.float64, copy=False)
    norm = np.linalg.norm(work, axis=-1, keepdims=True)
    if norm.size == 0:
        return f
    # A channel much smaller than the rest of the feature map was formed by
    # cancellation, so it holds fewer accurate digits than its storage dtype
    # suggests; dividing it up to unit scale would surface the lost digits
    # as noise. Flooring the denominator against the largest channel norm
    # anywhere in the map caps that amplification and keeps the op continuous
    # and scale-invariant; such channels come out short instead of unit
    # length.
    eps = _storage_eps(f)
    denom = np.maximum(norm, (eps ** 0.25) * norm.max())
    out = np.where(denom > 0, work / np.where(denom > 0, denom, 1.0), 0.0)
    return out.astype(_storage_dtype(f), copy=False)


def vn_magnitudes(f: np.ndarray) -> np.ndarray:
    return np.linalg.norm(_as_feature(f), axis=-1)


def vn_invariant(head: VnInvariantHead, f: np.ndarray) -> np.ndarray:
    """Invariant readout: flatten(F @ T.T) with the learned frame T = w @ F.

    Under F -> F @ R.T the frame transforms the same way, so the product
    F @ T.T is unchanged. Output shape (..., 3C).
    """
    f = _as_feature(f)
    if f.shape[-2] != head.w.shape[1]:
        raise InputError(f"feature has {f.shape[-2]} channels, head expects {head.w.shape[1]}")
    work = f.astype(np.float64, copy=False)
    frame = head.w @ work  # (..., 3, 3)
    gram = work @ np.swapaxes(frame, -1, -2)  # (..., C, 3)
    out = gram.reshape(*f.shape[:-2], 3 * f.shape[-2])
    return out.astype(_storage_dtype(f), copy=False)


def vn_mean_pool(features: list) -> np.ndarray:
    if not features:
        raise InputError("empty feature set")
    stack = [_as_feature(f) for f in features]
    channels = {f.shape[-2] for f in stack}
    if len(channels) != 1:
        raise InputError(f"mismatched channel counts {sorted(channels)}")
    stacked = np.stack(stack)
    out = np.mean(stacked, axis=0, dtype=np.float64)
    return out.astype(_storage_dtype(stacked), copy=False)
