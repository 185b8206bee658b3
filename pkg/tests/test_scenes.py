import numpy as np
import pytest

from parereg.config import SceneConfig
from parereg.errors import DegenerateGeometryError, InputError
from parereg.geom import PointCloud, RigidTransform, Rotation
from parereg.scenes import OVERLAP_TOL, _SURFACES, _crop_to_overlap, gen_scene

FAST = SceneConfig(generator="box-room", n_points=400, overlap=0.5, noise_sigma=0.005)


def test_fixed_seed_is_bitwise_deterministic():
    a = gen_scene(FAST, 42, oracle_channels=3)
    b = gen_scene(FAST, 42, oracle_channels=3)
    np.testing.assert_array_equal(a.p.points, b.p.points)
    np.testing.assert_array_equal(a.q.points, b.q.points)
    np.testing.assert_array_equal(a.t_gt.r.m, b.t_gt.r.m)
    np.testing.assert_array_equal(a.corr_x, b.corr_x)
    np.testing.assert_array_equal(a.corr_y, b.corr_y)
    np.testing.assert_array_equal(a.features_p, b.features_p)
    np.testing.assert_array_equal(a.features_q, b.features_q)
    assert a.overlap == b.overlap


def test_twins_are_exact_without_noise():
    cfg = SceneConfig(generator="box-room", n_points=400, overlap=0.5, noise_sigma=0.0)
    scene = gen_scene(cfg, 3)
    assert len(scene.corr_x) > 0
    moved = scene.t_gt.apply(scene.p.points[scene.corr_x])
    np.testing.assert_array_equal(moved, scene.q.points[scene.corr_y])


def test_correspondence_indices_in_range():
    scene = gen_scene(FAST, 9)
    assert scene.corr_x.min() >= 0 and scene.corr_x.max() < len(scene.p)
    assert scene.corr_y.min() >= 0 and scene.corr_y.max() < len(scene.q)
    assert len(np.unique(scene.corr_x)) == len(scene.corr_x)
    assert len(np.unique(scene.corr_y)) == len(scene.corr_y)
    assert scene.matching_radius > 0


def test_overlap_lands_near_target():
    cfg = SceneConfig(generator="box-room", n_points=400, overlap=0.3)
    for seed in range(12):
        scene = gen_scene(cfg, seed)
        assert abs(scene.overlap - 0.3) <= OVERLAP_TOL + 1e-12


def test_noise_is_applied_after_overlap_was_measured():
    quiet = SceneConfig(generator="box-room", n_points=400, overlap=0.5, noise_sigma=0.0)
    noisy = SceneConfig(generator="box-room", n_points=400, overlap=0.5, noise_sigma=0.02)
    a = gen_scene(quiet, 17)
    b = gen_scene(noisy, 17)
    # crop decisions precede the noise draw, so bookkeeping matches exactly
    assert a.overlap == b.overlap
    np.testing.assert_array_equal(a.corr_x, b.corr_x)
    np.testing.assert_array_equal(a.corr_y, b.corr_y)
    assert not np.array_equal(a.p.points, b.p.points)


def test_full_overlap_skips_cropping():
    cfg = SceneConfig(generator="box-room", n_points=300, overlap=1.0, noise_sigma=0.0)
    scene = gen_scene(cfg, 5)
    assert scene.overlap == 1.0
    assert len(scene.p) == len(scene.q) == 300
    np.testing.assert_array_equal(scene.corr_x, np.arange(300))


def test_oracle_features_rotate_with_ground_truth():
    cfg = SceneConfig(generator="box-room", n_points=400, overlap=0.5, noise_sigma=0.0)
    scene = gen_scene(cfg, 7, oracle_channels=5)
    assert scene.features_p.shape == (len(scene.p), 5, 3)
    fp = scene.features_p[scene.corr_x]
    fq = scene.features_q[scene.corr_y]
    np.testing.assert_allclose(fq, fp @ scene.t_gt.r.m.T, atol=1e-12)


def test_feature_noise_perturbs_target_side():
    cfg = SceneConfig(generator="box-room", n_points=400, overlap=0.5, noise_sigma=0.0)
    clean = gen_scene(cfg, 7, oracle_channels=5)
    noisy = gen_scene(cfg, 7, oracle_channels=5, feature_noise=0.1)
    np.testing.assert_array_equal(clean.features_p, noisy.features_p)
    assert not np.array_equal(clean.features_q, noisy.features_q)


def test_unreachable_overlap_raises_with_achieved():
    # identical points: any crop still leaves every survivor a zero-distance
    # neighbour, so the measured overlap is pinned at 1.0
    cloud = PointCloud(np.zeros((50, 3)))
    t_id = RigidTransform(Rotation(np.eye(3)), np.zeros(3))
    with pytest.raises(
        DegenerateGeometryError, match=r"overlap target 0.5 unreachable; achieved 1.000"
    ):
        _crop_to_overlap(cloud, cloud, t_id, 0.5, 0.1, 0.3, np.random.default_rng(0), attempts=2)


def test_negative_oracle_settings_rejected():
    with pytest.raises(InputError):
        gen_scene(FAST, 0, oracle_channels=-1)
    with pytest.raises(InputError):
        gen_scene(FAST, 0, feature_noise=-0.5)


@pytest.mark.parametrize("name", sorted(_SURFACES))
def test_surfaces_have_shape(name):
    pts = _SURFACES[name](123, np.random.default_rng(1))
    assert pts.shape == (123, 3)
    assert np.isfinite(pts).all()


def test_plane_grid_is_flat():
    pts = _SURFACES["plane-grid"](100, np.random.default_rng(0))
    np.testing.assert_array_equal(pts[:, 2], np.zeros(100))


def test_box_room_within_bounds():
    pts = _SURFACES["box-room"](500, np.random.default_rng(2))
    assert pts[:, 0].min() >= 0 and pts[:, 0].max() <= 4.0
    assert pts[:, 1].min() >= 0 and pts[:, 1].max() <= 3.0
    assert pts[:, 2].min() >= 0 and pts[:, 2].max() <= 2.5
