import numpy as np
import pytest

from parereg.errors import InputError
from parereg.estimator import CorrespondenceSet
from parereg.geom import RigidTransform, Rotation, random_rotation
from parereg.losses_metrics import (
    ActiveSetFlip,
    LossConfig,
    MetricThresholds,
    aggregate_metrics,
    contrastive_rotation_loss,
    contrastive_rotation_loss_with_grad,
    feature_matching_recall,
    finite_diff_gradcheck,
    inlier_ratio,
    point_matching_loss,
    point_matching_loss_with_grad,
    registration_recall,
    rmse,
    rotation_error,
    transformation_recall,
    translation_error,
)


def _axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kx = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


# ---------------------------------------------------------------- oracles

def _pm_oracle(z, sp, sq, pos, ui, uj):
    total = 0.0
    if len(pos):
        acc = 0.0
        for x, y in pos:
            acc += np.log(max(z[x, y], 1e-12))
        total -= acc / len(pos)
    if len(ui):
        acc = sum(np.log(1.0 - sp[i]) for i in ui)
        total -= acc / (2.0 * len(ui))
    if len(uj):
        acc = sum(np.log(1.0 - sq[j]) for j in uj)
        total -= acc / (2.0 * len(uj))
    return total


def _cr_oracle(fp, fq, r, pos, neg, cfg):
    channels = fp.shape[1]
    total = 0.0
    if len(pos):
        acc = 0.0
        for x, y in pos:
            for c in range(channels):
                d = float(np.sum((fp[x, c] @ r.T - fq[y, c]) ** 2))
                acc += max(d - cfg.alpha, 0.0)
        total += acc / (len(pos) * channels)
    if len(neg):
        acc = 0.0
        for x, y in neg:
            for c in range(channels):
                d = float(np.sum((fp[x, c] @ r.T - fq[y, c]) ** 2))
                acc += max(cfg.beta - d, 0.0)
        total += acc / (len(neg) * channels)
    return total


def _contrastive_probe(seed, cfg, guard=1e-3):
    """Random features whose hinge margins all clear the kinks by `guard`."""
    rng = np.random.default_rng(seed)
    r = random_rotation(seed + 50_000).m
    channels = 4
    fp = rng.normal(size=(6, channels, 3))
    fq = rng.normal(size=(6, channels, 3))
    pos = np.array([[0, 0], [1, 1], [2, 2]])
    neg = np.array([[3, 3], [4, 4], [5, 5]])
    # Mix of active and inactive hinges on both sides, margins well clear.
    pos_d2 = rng.choice([0.02, 0.3, 0.6], size=(3, channels))
    neg_d2 = rng.choice([0.8, 2.0, 1.0], size=(3, channels))
    for (x, y), targets in [(p, pos_d2[i]) for i, p in enumerate(pos)] + [
        (p, neg_d2[i]) for i, p in enumerate(neg)
    ]:
        dirs = rng.normal(size=(channels, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        fq[y] = fp[x] @ r.T - dirs * np.sqrt(targets)[:, None]
    d_pos = np.sum((fp[pos[:, 0]] @ r.T - fq[pos[:, 1]]) ** 2, axis=-1)
    d_neg = np.sum((fp[neg[:, 0]] @ r.T - fq[neg[:, 1]]) ** 2, axis=-1)
    assert np.abs(d_pos - cfg.alpha).min() > guard
    assert np.abs(d_neg - cfg.beta).min() > guard
    return fp, fq, r, pos, neg


# ---------------------------------------------------------------- point matching loss

def test_point_loss_zero_at_perfect():
    z = np.full((3, 3), 0.5)
    pos = [[0, 0], [1, 1]]
    for x, y in pos:
        z[x, y] = 1.0
    sp = np.zeros(3)
    sq = np.zeros(3)
    assert point_matching_loss(z, sp, sq, pos, [2], [2]) == 0.0


def test_point_loss_single_positive():
    z = np.array([[np.exp(-1.0)]])
    loss = point_matching_loss(z, np.zeros(1), np.zeros(1), [[0, 0]], [], [])
    assert abs(loss - 1.0) <= 1e-12


def test_point_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        z = rng.uniform(0.05, 0.95, size=(5, 6))
        sp = rng.uniform(0.0, 0.9, size=5)
        sq = rng.uniform(0.0, 0.9, size=6)
        pos = np.stack([rng.integers(0, 5, 3), rng.integers(0, 6, 3)], axis=1)
        ui = rng.permutation(5)[:2]
        uj = rng.permutation(6)[:2]
        got = point_matching_loss(z, sp, sq, pos, ui, uj)
        assert abs(got - _pm_oracle(z, sp, sq, pos, ui, uj)) <= 1e-12


def test_point_loss_clamps_with_warning():
    z = np.zeros((1, 1))
    with pytest.warns(RuntimeWarning):
        loss = point_matching_loss(z, np.zeros(1), np.zeros(1), [[0, 0]], [], [])
    assert np.isfinite(loss)
    assert abs(loss - (-np.log(1e-12))) <= 1e-9


def test_point_loss_gradcheck():
    rng = np.random.default_rng(1)
    z = rng.uniform(0.1, 0.9, size=(4, 5))
    sp = rng.uniform(0.1, 0.8, size=4)
    sq = rng.uniform(0.1, 0.8, size=5)
    pos = np.array([[0, 0], [1, 2], [3, 4]])
    ui = np.array([2])
    uj = np.array([1, 3])

    def fn(z_, sp_, sq_):
        return point_matching_loss_with_grad(z_, sp_, sq_, pos, ui, uj)

    assert finite_diff_gradcheck(fn, [z, sp, sq]) <= 1e-4


# ---------------------------------------------------------------- contrastive loss

def test_contrastive_zero_when_exact():
    rng = np.random.default_rng(2)
    cfg = LossConfig()
    r = random_rotation(3).m
    fp = rng.normal(size=(4, 5, 3))
    fq = fp @ r.T
    pos = np.array([[i, i] for i in range(4)])
    assert contrastive_rotation_loss(fp, fq, r, pos, [], cfg) == 0.0


def test_contrastive_coincident_negative_costs_beta():
    rng = np.random.default_rng(4)
    cfg = LossConfig()
    r = random_rotation(5).m
    fp = rng.normal(size=(1, 6, 3))
    fq = fp @ r.T  # distance 0, the worst possible negative
    loss = contrastive_rotation_loss(fp, fq, r, [], [[0, 0]], cfg)
    assert abs(loss - cfg.beta) <= 1e-12


def test_contrastive_matches_loop_oracle():
    cfg = LossConfig()
    for seed in range(10):
        rng = np.random.default_rng(seed)
        r = random_rotation(900 + seed).m
        fp = rng.normal(size=(5, 4, 3))
        fq = rng.normal(size=(6, 4, 3))
        pos = np.stack([rng.integers(0, 5, 3), rng.integers(0, 6, 3)], axis=1)
        neg = np.stack([rng.integers(0, 5, 4), rng.integers(0, 6, 4)], axis=1)
        got = contrastive_rotation_loss(fp, fq, r, pos, neg, cfg)
        assert abs(got - _cr_oracle(fp, fq, r, pos, neg, cfg)) <= 1e-12


def test_contrastive_zero_iff_margins_met():
    cfg = LossConfig()
    rng = np.random.default_rng(6)
    r = np.eye(3)
    # One positive at squared distance just inside alpha, one negative just
    # outside beta: loss exactly zero.
    fp = np.zeros((2, 1, 3))
    fq = np.zeros((2, 1, 3))
    fq[0, 0, 0] = np.sqrt(cfg.alpha * 0.5)
    fq[1, 0, 0] = np.sqrt(cfg.beta * 1.5)
    pos, neg = [[0, 0]], [[1, 1]]
    assert contrastive_rotation_loss(fp, fq, r, pos, neg, cfg) == 0.0
    # Violating either side makes it strictly positive.
    fq_bad_pos = fq.copy()
    fq_bad_pos[0, 0, 0] = np.sqrt(cfg.alpha * 2.0)
    assert contrastive_rotation_loss(fp, fq_bad_pos, r, pos, neg, cfg) > 0.0
    fq_bad_neg = fq.copy()
    fq_bad_neg[1, 0, 0] = np.sqrt(cfg.beta * 0.5)
    assert contrastive_rotation_loss(fp, fq_bad_neg, r, pos, neg, cfg) > 0.0


def test_contrastive_invariant_under_frame_rotations():
    cfg = LossConfig()
    fp, fq, r, pos, neg = _contrastive_probe(7, cfg)
    base = contrastive_rotation_loss(fp, fq, r, pos, neg, cfg)
    for seed in range(10):
        r1 = random_rotation(1000 + seed).m
        r2 = random_rotation(2000 + seed).m
        moved = contrastive_rotation_loss(
            fp @ r1.T, fq @ r2.T, r2 @ r @ r1.T, pos, neg, cfg
        )
        assert abs(moved - base) <= 1e-9


def test_contrastive_gradcheck():
    cfg = LossConfig()
    fp, fq, r, pos, neg = _contrastive_probe(8, cfg)

    def fn(fp_, fq_):
        return contrastive_rotation_loss_with_grad(fp_, fq_, r, pos, neg, cfg)

    assert finite_diff_gradcheck(fn, [fp, fq]) <= 1e-4


def test_gradcheck_quadratic_sanity():
    rng = np.random.default_rng(9)
    a = rng.normal(size=7)
    b = rng.normal(size=7)
    x = rng.normal(size=7)

    def fn(x_):
        return float(np.sum(a * x_**2 + b * x_)), [2 * a * x_ + b], b""

    assert finite_diff_gradcheck(fn, [x]) <= 1e-8


def test_gradcheck_detects_hinge_flip():
    cfg = LossConfig()
    r = np.eye(3)
    fp = np.zeros((1, 1, 3))
    fq = np.zeros((1, 1, 3))
    fq[0, 0, 0] = np.sqrt(cfg.alpha)  # squared distance exactly at the kink

    def fn(fp_, fq_):
        return contrastive_rotation_loss_with_grad(fp_, fq_, r, [[0, 0]], [], cfg)

    with pytest.raises(ActiveSetFlip):
        finite_diff_gradcheck(fn, [fp, fq])


# ---------------------------------------------------------------- metrics

def _exact_corrs(seed, n=10):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(n, 3))
    r = random_rotation(seed + 10_000)
    t = rng.normal(size=3)
    t_gt = RigidTransform(r, t)
    return CorrespondenceSet(src, t_gt.apply(src)), t_gt


def test_inlier_ratio_cases():
    corrs, t_gt = _exact_corrs(0)
    assert inlier_ratio(corrs, t_gt, 0.1) == 1.0
    displaced = CorrespondenceSet(corrs.src, corrs.dst + np.array([0.2, 0, 0]))
    assert inlier_ratio(displaced, t_gt, 0.1) == 0.0
    mixed_dst = corrs.dst.copy()
    mixed_dst[7:] += np.array([0.5, 0, 0])  # 3 of 10 pushed out
    mixed = CorrespondenceSet(corrs.src, mixed_dst)
    assert inlier_ratio(mixed, t_gt, 0.1) == 0.7


def test_feature_matching_recall_strictness():
    assert feature_matching_recall([1.0, 1.0], 0.05) == 1.0
    assert feature_matching_recall([0.0, 0.0], 0.05) == 0.0
    assert feature_matching_recall([0.04, 0.06], 0.05) == 0.5
    assert feature_matching_recall([0.05], 0.05) == 0.0  # strict inequality
    with pytest.raises(InputError):
        feature_matching_recall([], 0.05)


def test_rmse_cases():
    corrs, t_gt = _exact_corrs(1)
    assert rmse(corrs, t_gt) <= 1e-12
    shifted = RigidTransform(t_gt.r, t_gt.t + np.array([0.0, 0.07, 0.0]))
    assert abs(rmse(corrs, shifted) - 0.07) <= 1e-12
    rng = np.random.default_rng(2)
    t_other = RigidTransform(random_rotation(77), rng.normal(size=3))
    expected = np.sqrt(
        np.mean([np.sum((t_other.r.m @ p + t_other.t - q) ** 2) for p, q in zip(corrs.src, corrs.dst)])
    )
    assert abs(rmse(corrs, t_other) - expected) <= 1e-12


def test_registration_recall_strictness():
    assert registration_recall([0.0, 0.1], 0.2) == 1.0
    assert registration_recall([0.2], 0.2) == 0.0
    assert registration_recall([0.1, 0.3], 0.2) == 0.5


def test_rotation_error_cases():
    assert rotation_error(np.eye(3), np.eye(3)) == 0.0
    half_turn = np.diag([-1.0, -1.0, 1.0])  # 180 degrees about z
    assert abs(rotation_error(half_turn, np.eye(3)) - 180.0) <= 1e-9
    r37 = _axis_angle([0.3, -0.5, 0.8], np.deg2rad(37.0))
    assert abs(rotation_error(r37, np.eye(3)) - 37.0) <= 1e-9


def test_translation_error_cases():
    assert translation_error(np.zeros(3), np.zeros(3)) == 0.0
    assert abs(translation_error(np.array([1.0, 0, 1.0]), np.zeros(3)) - np.sqrt(2)) <= 1e-12
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert translation_error(a, b) == float(np.linalg.norm(a - b))


def test_transformation_recall_cases():
    assert transformation_recall([(0.0, 0.0)], 15.0, 0.3) == 1.0
    assert transformation_recall([(15.0, 0.0)], 15.0, 0.3) == 0.0  # RE at threshold
    mixed = [(1.0, 0.1), (20.0, 0.1), (1.0, 0.5), (14.9, 0.29)]
    assert transformation_recall(mixed, 15.0, 0.3) == 0.5


def test_metrics_invariant_under_world_frame_change():
    # The world frame is the target-cloud frame: relocating it maps every
    # transform T to W o T and target coordinates to W q. (Moving the source
    # frame instead would change TE whenever the rotations disagree.)
    corrs, t_gt = _exact_corrs(4)
    rng = np.random.default_rng(5)
    t_est = RigidTransform(random_rotation(88), t_gt.t + rng.normal(size=3) * 0.1)
    re0 = rotation_error(t_est.r.m, t_gt.r.m)
    te0 = translation_error(t_est.t, t_gt.t)
    rmse0 = rmse(corrs, t_est)
    for seed in range(10):
        w_r = random_rotation(3000 + seed).m
        w_t = np.random.default_rng(seed).normal(size=3)

        def relocate(t):
            return RigidTransform(Rotation(w_r @ t.r.m), w_r @ t.t + w_t)

        corrs_w = CorrespondenceSet(corrs.src, corrs.dst @ w_r.T + w_t)
        est_w, gt_w = relocate(t_est), relocate(t_gt)
        assert abs(rotation_error(est_w.r.m, gt_w.r.m) - re0) <= 1e-9
        assert abs(translation_error(est_w.t, gt_w.t) - te0) <= 1e-9
        assert abs(rmse(corrs_w, est_w) - rmse0) <= 1e-9


def test_aggregate_metrics_fixture():
    per_pair = {
        "b": {"ir": 0.5, "rmse": 0.1, "re_deg": 5.0, "te_m": 0.1},
        "a": {"ir": 0.04, "rmse": 0.3, "re_deg": 20.0, "te_m": 0.1},
        "c": {"ir": 0.2, "rmse": 0.15, "re_deg": 10.0, "te_m": 0.2},
    }
    out = aggregate_metrics(per_pair, MetricThresholds())
    assert out["fmr"] == pytest.approx(2.0 / 3.0)
    assert out["rr"] == pytest.approx(2.0 / 3.0)
    assert out["tr"] == pytest.approx(2.0 / 3.0)
    assert out["mean_re"] == pytest.approx(7.5)  # pairs b and c
    assert out["mean_te"] == pytest.approx(0.15)


def test_aggregate_metrics_no_success():
    per_pair = {"a": {"ir": 0.0, "rmse": 1.0, "re_deg": 90.0, "te_m": 5.0}}
    out = aggregate_metrics(per_pair, MetricThresholds())
    assert out["tr"] == 0.0
    assert out["mean_re"] is None
    assert out["mean_te"] is None


def test_config_validation():
    with pytest.raises(InputError):
        LossConfig(alpha=1.5, beta=1.4)
    with pytest.raises(InputError):
        LossConfig(d_p=0.2, d_n=0.1)
    with pytest.raises(InputError):
        MetricThresholds(tau_ir=0.0)
