"""Training losses with analytic gradients, gradcheck, and the evaluation metrics.

The two losses are implemented as pure functions of ndarray inputs; the
*_with_grad variants return (value, gradients, active-set signature) so the
finite-difference checker can reject probe points where a hinge or clamp
flips inside the +-eps window.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError, PareRegError
from .estimator import CorrespondenceSet
from .geom import RigidTransform

LOG_CLAMP = 1e-12


class ActiveSetFlip(PareRegError):
    """A finite-difference probe crossed a hinge/clamp boundary."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 1.4
    # Radii are not fixed by the loss definition itself; d_n mirrors tau_ir.
    d_p: float = 0.05
    d_n: float = 0.10

    def __post_init__(self):
        if not 0 < self.alpha < self.beta:
            raise InputError("need 0 < alpha < beta")
        if not 0 < self.d_p < self.d_n:
            raise InputError("need 0 < d_p < d_n")


@dataclass(frozen=True)
class MetricThresholds:
    tau_ir: float = 0.1
    tau_fmr: float = 0.05
    tau_rr: float = 0.2
    tau_r_deg: float = 15.0  # 5.0 for the outdoor preset
    tau_t: float = 0.3  # 2.0 for the outdoor preset

    def __post_init__(self):
        for name in ("tau_ir", "tau_fmr", "tau_rr", "tau_r_deg", "tau_t"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")


# ---------------------------------------------------------------- losses

def _as_index_pairs(pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return pairs


def point_matching_loss_with_grad(
    z: np.ndarray,
    sigma_p: np.ndarray,
    sigma_q: np.ndarray,
    positives,
    unmatched_i,
    unmatched_j,
):
    """Negative log-likelihood of positive assignments plus the unmatched
    saliency penalties; returns (loss, (dz, dsigma_p, dsigma_q), active)."""
    z = np.asarray(z, dtype=np.float64)
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    sigma_q = np.asarray(sigma_q, dtype=np.float64)
    positives = _as_index_pairs(positives)
    unmatched_i = np.asarray(unmatched_i, dtype=np.int64).reshape(-1)
    unmatched_j = np.asarray(unmatched_j, dtype=np.int64).reshape(-1)

    loss = 0.0
    dz = np.zeros_like(z)
    dsp = np.zeros_like(sigma_p)
    dsq = np.zeros_like(sigma_q)
    clamped = np.zeros(len(positives), dtype=bool)
    if len(positives):
        vals = z[positives[:, 0], positives[:, 1]]
        clamped = vals < LOG_CLAMP
        if clamped.any():
            warnings.warn(
                f"{int(clamped.sum())} positive assignment(s) clamped at {LOG_CLAMP}",
                RuntimeWarning,
            )
        safe = np.maximum(vals, LOG_CLAMP)
        loss -= float(np.mean(np.log(safe)))
        grads = np.where(clamped, 0.0, -1.0 / (len(positives) * safe))
        np.add.at(dz, (positives[:, 0], positives[:, 1]), grads)
    if len(unmatched_i):
        s = sigma_p[unmatched_i]
        loss -= float(np.sum(np.log(1.0 - s))) / (2.0 * len(unmatched_i))
        np.add.at(dsp, unmatched_i, 1.0 / (2.0 * len(unmatched_i) * (1.0 - s)))
    if len(unmatched_j):
        s = sigma_q[unmatched_j]
        loss -= float(np.sum(np.log(1.0 - s))) / (2.0 * len(unmatched_j))
        np.add.at(dsq, unmatched_j, 1.0 / (2.0 * len(unmatched_j) * (1.0 - s)))
    return loss, (dz, dsp, dsq), clamped.tobytes()


def point_matching_loss(z, sigma_p, sigma_q, positives, unmatched_i, unmatched_j) -> float:
    loss, _, _ = point_matching_loss_with_grad(
        z, sigma_p, sigma_q, positives, unmatched_i, unmatched_j
    )
    return loss


def contrastive_rotation_loss_with_grad(
    fp: np.ndarray,
    fq: np.ndarray,
    r_gt: np.ndarray,
    positives,
    negatives,
    cfg: LossConfig,
):
    """Per-channel hinge loss on squared feature distances under R_gt.

    fp/fq are (n, C, 3) equivariant features; positives and negatives are
    (k, 2) index pairs into them. Returns (loss, (dfp, dfq), active)."""
    fp = np.asarray(fp, dtype=np.float64)
    fq = np.asarray(fq, dtype=np.float64)
    r = np.asarray(r_gt, dtype=np.float64)
    if fp.ndim != 3 or fp.shape[-1] != 3 or fq.ndim != 3 or fp.shape[1] != fq.shape[1]:
        raise InputError("features must be (n, C, 3) with equal channel counts")
    positives = _as_index_pairs(positives)
    negatives = _as_index_pairs(negatives)
    channels = fp.shape[1]

    loss = 0.0
    dfp = np.zeros_like(fp)
    dfq = np.zeros_like(fq)
    active_bits = []
    for pairs, sign, margin in ((positives, +1.0, cfg.alpha), (negatives, -1.0, cfg.beta)):
        if not len(pairs):
            active_bits.append(b"")
            continue
        u = fp[pairs[:, 0]] @ r.T - fq[pairs[:, 1]]  # (k, C, 3)
        d = np.sum(u * u, axis=-1)  # (k, C)
        hinge = sign * (d - margin)  # d - alpha for positives, beta - d for negatives
        active = hinge > 0
        active_bits.append(active.tobytes())
        denom = pairs.shape[0] * channels
        loss += float(hinge[active].sum()) / denom
        scale = np.where(active, sign / denom, 0.0)[..., None]  # d(hinge)/dd
        du = 2.0 * u * scale
        np.add.at(dfp, pairs[:, 0], du @ r)
        np.add.at(dfq, pairs[:, 1], -du)
    return loss, (dfp, dfq), b"|".join(active_bits)


def contrastive_rotation_loss(fp, fq, r_gt, positives, negatives, cfg: LossConfig) -> float:
    loss, _, _ = contrastive_rotation_loss_with_grad(fp, fq, r_gt, positives, negatives, cfg)
    return loss


def finite_diff_gradcheck(fn, inputs, eps: float = 1e-6, max_probes_per_input: int = 50) -> float:
    """Central differences against the analytic gradient of fn.

    fn(*inputs) must return (loss, gradients, active_signature); a change of
    the signature across the +-eps window raises ActiveSetFlip so the caller
    can resample. Returns the max relative deviation over probed coordinates.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    _, grads, active0 = fn(*inputs)
    if len(grads) != len(inputs):
        raise InputError("fn must return one gradient per input")
    worst = 0.0
    for which, x in enumerate(inputs):
        flat = x.reshape(-1)
        n = flat.size
        if n == 0:
            continue
        stride = max(1, n // max_probes_per_input)
        for pos in range(0, n, stride):
            bumped = [a.copy() for a in inputs]
            bumped[which].reshape(-1)[pos] = flat[pos] + eps
            plus, _, act_p = fn(*bumped)
            bumped[which].reshape(-1)[pos] = flat[pos] - eps
            minus, _, act_m = fn(*bumped)
            if act_p != active0 or act_m != active0:
                raise ActiveSetFlip(f"probe at input {which} coordinate {pos}")
            numeric = (plus - minus) / (2.0 * eps)
            analytic = float(grads[which].reshape(-1)[pos])
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1.0)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------- metrics

def inlier_ratio(corrs: CorrespondenceSet, t_gt: RigidTransform, tau_ir: float) -> float:
    if tau_ir <= 0:
        raise InputError("tau_ir must be positive")
    residual = np.linalg.norm(t_gt.apply(corrs.src) - corrs.dst, axis=1)
    return float(np.mean(residual < tau_ir))


def feature_matching_recall(per_pair_ir, tau_fmr: float) -> float:
    irs = np.asarray(per_pair_ir, dtype=np.float64)
    if irs.size == 0:
        raise InputError("no pairs")
    return float(np.mean(irs > tau_fmr))


def rmse(corrs_gt: CorrespondenceSet, t_est: RigidTransform) -> float:
    residual = t_est.apply(corrs_gt.src) - corrs_gt.dst
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def registration_recall(per_pair_rmse, tau_rr: float) -> float:
    vals = np.asarray(per_pair_rmse, dtype=np.float64)
    if vals.size == 0:
        raise InputError("no pairs")
    return float(np.mean(vals < tau_rr))


def rotation_error(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic distance in degrees: acos((tr(R_est^-1 R_gt) - 1) / 2)."""
    r_est = np.asarray(r_est, dtype=np.float64)
    r_gt = np.asarray(r_gt, dtype=np.float64)
    c = (np.trace(r_est.T @ r_gt) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def transformation_recall(errors, tau_r_deg: float, tau_t: float) -> float:
    """Fraction of (RE, TE) pairs with both errors strictly below threshold."""
    arr = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
    if arr.size == 0:
        raise InputError("no pairs")
    ok = (arr[:, 0] < tau_r_deg) & (arr[:, 1] < tau_t)
    return float(np.mean(ok))


def aggregate_metrics(per_pair: dict, thresholds: MetricThresholds) -> dict:
    """Summary over {pair_id: {ir, rmse, re_deg, te_m}} dictionaries.

    Mean RE/TE are computed over the successfully aligned pairs only (the TR
    criterion); with no successful pair they are reported as None.
    """
    if not per_pair:
        raise InputError("no pairs")
    keys = sorted(per_pair)
    irs = [per_pair[k]["ir"] for k in keys]
    rmses = [per_pair[k]["rmse"] for k in keys]
    errors = [(per_pair[k]["re_deg"], per_pair[k]["te_m"]) for k in keys]
    arr = np.asarray(errors, dtype=np.float64)
    ok = (arr[:, 0] < thresholds.tau_r_deg) & (arr[:, 1] < thresholds.tau_t)
    return {
        "fmr": feature_matching_recall(irs, thresholds.tau_fmr),
        "rr": registration_recall(rmses, thresholds.tau_rr),
        "tr": transformation_recall(errors, thresholds.tau_r_deg, thresholds.tau_t),
        "mean_re": float(np.mean(arr[ok, 0])) if ok.any() else None,
        "mean_te": float(np.mean(arr[ok, 1])) if ok.any() else None,
    }
