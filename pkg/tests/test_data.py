import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dffw.data import (
    BehindCameraError, BallSimConfig, Camera, Samples, Trajectory, TrajectoryTooShortError,
    build_samples, default_camera, fit_normalizer, generate_dataset, history_feedback, integrate,
    kfold_by_trajectory, project, read_norm_stats, read_trajectories, simulate_trajectory,
    trajectory_rng, write_norm_stats, write_trajectories,
)


# -- simulator ---------------------------------------------------------------

def _apex(v0, dt, gravity=9.81):
    cfg = BallSimConfig(drag_coeff=0.0, magnus_coeff=0.0, dt=dt, frames=10 ** 6, gravity=gravity)
    pos, _ = integrate(cfg, np.zeros(3), np.array([0.0, 0.0, v0]), np.zeros(3))
    return pos[:, 2].max()


@pytest.mark.parametrize("v0", [5.0, 20.0, 45.0])
def test_drag_free_apex_matches_ballistics(v0):
    analytic = v0 ** 2 / (2 * 9.81)
    assert abs(_apex(v0, 1e-3) - analytic) / analytic < 0.01


def _mechanical_energy(cfg, pos, vel):
    return 0.5 * (vel ** 2).sum(1) + cfg.gravity * pos[:, 2]


def test_energy_drift_small_at_default_dt():
    cfg = BallSimConfig(drag_coeff=0.0, magnus_coeff=0.0)
    vel0 = 46.0 * np.array([np.cos(np.deg2rad(70)), 0.0, np.sin(np.deg2rad(70))])
    pos, vel = integrate(cfg, np.array([0.0, 0.0, 1.0]), vel0, np.zeros(3))
    e = _mechanical_energy(cfg, pos, vel)
    assert len(e) > 100
    assert np.max(np.abs(e - e[0])) / abs(e[0]) < 0.005


def test_zero_forces_give_straight_line():
    cfg = BallSimConfig(gravity=0.0, drag_coeff=0.0, magnus_coeff=0.0, frames=50)
    pos0, vel0 = np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0, 2.0])
    pos, vel = integrate(cfg, pos0, vel0, np.array([0.0, 0.0, 40.0]))
    t = np.arange(50)[:, None] * cfg.dt
    np.testing.assert_allclose(pos, pos0 + vel0 * t, atol=1e-12)
    np.testing.assert_allclose(vel, np.broadcast_to(vel0, vel.shape), atol=1e-12)


def test_opposite_side_spins_mirror_across_launch_plane():
    cfg = BallSimConfig(azimuth_range=(0.0, 0.0))
    a = simulate_trajectory(cfg, 0, np.random.default_rng(5))
    b = simulate_trajectory(cfg, 1, np.random.default_rng(5))
    assert cfg.spin_classes[0] == tuple(-c for c in cfg.spin_classes[1])
    np.testing.assert_allclose(a.xyz[:, [0, 2]], b.xyz[:, [0, 2]], atol=1e-9)
    np.testing.assert_allclose(a.xyz[:, 1], -b.xyz[:, 1], atol=1e-9)
    assert np.abs(a.xyz[:, 1]).max() > 1.0


def test_trajectory_stops_at_ground():
    cfg = BallSimConfig(frames=10 ** 5)
    traj = simulate_trajectory(cfg, 2, np.random.default_rng(0))
    assert len(traj) < cfg.frames
    assert np.all(traj.xyz[:, 2] >= 0)


def test_simulate_rejects_unknown_class():
    with pytest.raises(ValueError):
        simulate_trajectory(BallSimConfig(), 4, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        BallSimConfig(dt=0.0)
    with pytest.raises(ValueError):
        BallSimConfig(frames=1)
    assert BallSimConfig().n_classes == 4


def test_default_spin_classes_are_well_separated():
    spins = np.array(BallSimConfig().spin_classes)
    for i in range(4):
        for j in range(i + 1, 4):
            assert spins[i] @ spins[j] <= 1e-12


def test_dataset_shape_and_determinism(balls):
    assert len(balls) == 44
    assert [t.class_id for t in balls] == [c for c in range(4) for _ in range(11)]
    assert [t.traj_id for t in balls] == list(range(44))
    # a few trajectories land just before the frame budget
    assert all(300 < len(t) <= 400 for t in balls)
    again = generate_dataset(BallSimConfig(seed=0))
    for a, b in zip(balls, again):
        assert np.array_equal(a.xyz, b.xyz) and np.array_equal(a.uv, b.uv)
    other = generate_dataset(BallSimConfig(seed=1, trajectories_per_class=1))
    assert not np.array_equal(other[0].xyz, balls[0].xyz)


def test_trajectory_generation_order_independent():
    cfg = BallSimConfig(trajectories_per_class=3)
    trajs = generate_dataset(cfg)
    alone = simulate_trajectory(cfg, 1, trajectory_rng(cfg.seed, 4), traj_id=4)
    assert np.array_equal(trajs[4].xyz, alone.xyz)


def test_trajectories_project_consistently(balls):
    cam = default_camera()
    for t in balls[::7]:
        np.testing.assert_array_equal(t.uv, project(cam, t.xyz))


# -- camera ------------------------------------------------------------------

def test_point_on_optical_axis_hits_principal_point():
    cam = default_camera()
    point = cam.position + 25.0 * cam.rotation[2]
    np.testing.assert_allclose(project(cam, point), cam.principal, atol=1e-9)


def test_focal_scales_offsets_linearly():
    cam = default_camera()
    cam2 = Camera(cam.position, cam.rotation, 2 * cam.focal, cam.principal)
    pts = np.array([[10.0, 3.0, 20.0], [50.0, -2.0, 40.0]])
    pp = np.asarray(cam.principal)
    np.testing.assert_allclose(project(cam2, pts) - pp, 2 * (project(cam, pts) - pp), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_projection_matches_homogeneous_matrix(seed):
    rng = np.random.default_rng(seed)
    cam = default_camera()
    point = cam.position + cam.rotation.T @ np.array([*rng.uniform(-20, 20, 2), rng.uniform(1, 200)])
    k = np.array([[cam.focal, 0, cam.principal[0]], [0, cam.focal, cam.principal[1]], [0, 0, 1]])
    rt = np.hstack([cam.rotation, (-cam.rotation @ cam.position)[:, None]])
    hom = k @ rt @ np.append(point, 1.0)
    np.testing.assert_allclose(project(cam, point), hom[:2] / hom[2], rtol=1e-12)


def test_point_behind_camera_names_frame():
    cam = default_camera()
    pts = np.array([cam.position + cam.rotation[2], cam.position - cam.rotation[2]])
    with pytest.raises(BehindCameraError) as info:
        project(cam, pts)
    assert info.value.frame == 1


def test_camera_rejects_bad_rotation_and_focal():
    with pytest.raises(ValueError):
        Camera(np.zeros(3), np.ones((3, 3)))
    with pytest.raises(ValueError):
        Camera(np.zeros(3), np.eye(3), focal=0.0)


# -- samples ---------------------------------------------------------------------

def _toy_traj(n, traj_id=0, class_id=0):
    xyz = np.arange(3 * n, dtype=float).reshape(n, 3)
    uv = 100 + np.arange(2 * n, dtype=float).reshape(n, 2)
    return Trajectory(traj_id, class_id, xyz, uv)


def test_build_samples_counts_and_windows():
    traj = _toy_traj(4)
    s = build_samples([traj], 2, n_classes=3)
    assert len(s) == 2
    np.testing.assert_array_equal(s.hist[0], traj.uv[:2].ravel())
    np.testing.assert_array_equal(s.hist[1], traj.uv[1:3].ravel())
    np.testing.assert_array_equal(s.present[0], np.concatenate([traj.xyz[2], traj.uv[2]]))
    assert s.label.tolist() == [[1, 0, 0], [1, 0, 0]]
    assert s.frame.tolist() == [2, 3]


def test_build_samples_rejects_short_trajectory():
    with pytest.raises(TrajectoryTooShortError, match="trajectory 7"):
        build_samples([_toy_traj(3, traj_id=7)], 3)


def test_balls_sample_dimensions(balls):
    s = build_samples(balls, 50)
    assert s.present.shape[1:] == (5,) and s.hist.shape[1:] == (100,) and s.label.shape[1:] == (4,)
    assert len(s) == sum(len(t) - 50 for t in balls)
    assert np.all(np.isfinite(s.present)) and np.all(np.isfinite(s.hist))
    assert sorted(set(s.class_id.tolist())) == [0, 1, 2, 3]
    assert len(s.for_trajectories([0, 12])) == len(balls[0]) + len(balls[12]) - 100


# -- normalizer ------------------------------------------------------------------

def _random_samples(rng, n=50, n_v=3, n_hist=4):
    return Samples(rng.normal(3, 2, (n, n_v)), rng.normal(-1, 5, (n, n_hist)), np.eye(2)[rng.integers(0, 2, n)],
                   np.zeros(n, int), np.arange(n))


def test_normalizer_moments():
    s = _random_samples(np.random.default_rng(0))
    stats = fit_normalizer(s)
    z = stats.apply(s)
    feats = np.hstack([z.present, z.hist])
    assert np.abs(feats.mean(0)).max() < 1e-10
    assert np.abs(feats.var(0) - 1).max() < 1e-10
    assert np.array_equal(z.label, s.label)


def test_normalizer_flags_constant_feature():
    s = _random_samples(np.random.default_rng(1))
    s.hist[:, 2] = 4.0
    stats = fit_normalizer(s)
    assert stats.flagged.tolist() == [False] * 5 + [True] + [False]
    assert stats.std[5] == 1.0
    assert np.all(stats.apply(s).hist[:, 2] == 0.0)


def test_normalizer_needs_two_samples():
    with pytest.raises(ValueError):
        fit_normalizer(_random_samples(np.random.default_rng(2), n=1))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_normalizer_round_trip(seed):
    rng = np.random.default_rng(seed)
    s = _random_samples(rng)
    stats = fit_normalizer(s.subset(slice(0, 25)))
    back = stats.invert(stats.apply(s))
    np.testing.assert_allclose(back.present, s.present, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(back.hist, s.hist, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(stats.present_to_raw(stats.present_to_model(s.present)), s.present,
                               rtol=1e-12, atol=1e-12)


def test_history_feedback_maps_present_onto_newest_frame():
    trajs = [_toy_traj(8, i) for i in range(2)]
    for i, t in enumerate(trajs):
        t.uv = t.uv * (i + 1.5) + np.random.default_rng(i).normal(size=t.uv.shape)
    s = build_samples(trajs, 3)
    stats = fit_normalizer(s)
    z = stats.apply(s)
    fb = history_feedback(stats, (3, 4))
    # the present uv of frame t is the newest history frame of sample t+1
    np.testing.assert_allclose(fb(z.present[0]), z.hist[1, -2:], rtol=1e-12, atol=1e-12)


# -- folds -------------------------------------------------------------------------

def test_balls_folds(balls):
    folds = kfold_by_trajectory(balls)
    assert len(folds) == 11
    all_ids = {t.traj_id for t in balls}
    counts = dict.fromkeys(all_ids, 0)
    cls = {t.traj_id: t.class_id for t in balls}
    for i, (train, test) in enumerate(folds):
        assert len(train) == 4 and sorted(cls[t] for t in train) == [0, 1, 2, 3]
        assert not set(train) & set(test)
        assert set(train) | set(test) == all_ids
        assert train == [c * 11 + i for c in range(4)]
        for t in test:
            counts[t] += 1
    assert set(counts.values()) == {10}


def test_folds_with_more_training_trajectories(balls):
    folds = kfold_by_trajectory(balls, n_train=3)
    assert all(len(tr) == 12 and len(te) == 32 for tr, te in folds)
    with pytest.raises(ValueError):
        kfold_by_trajectory(balls, n_train=11)
    with pytest.raises(ValueError):
        kfold_by_trajectory(balls[:1])


# -- CSV ------------------------------------------------------------------------------

def test_trajectory_csv_round_trip(tmp_path, balls):
    path = tmp_path / "t.csv"
    write_trajectories(path, balls[:3])
    assert path.read_text().splitlines()[0] == "traj_id,class_id,frame,x,y,z,u,v"
    back = read_trajectories(path)
    for a, b in zip(balls[:3], back):
        assert (a.traj_id, a.class_id) == (b.traj_id, b.class_id)
        assert np.array_equal(a.xyz, b.xyz) and np.array_equal(a.uv, b.uv)


def test_trajectory_csv_rejects_gaps(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("traj_id,class_id,frame,x,y,z,u,v\n0,0,0,1,2,3,4,5\n0,0,2,1,2,3,4,5\n")
    with pytest.raises(ValueError, match="not contiguous"):
        read_trajectories(path)
    path.write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        read_trajectories(path)


def test_norm_stats_csv_round_trip(tmp_path, balls):
    s = build_samples(balls[:2], 50)
    stats = fit_normalizer(s)
    path = tmp_path / "norm.csv"
    write_norm_stats(path, stats)
    lines = path.read_text().splitlines()
    assert lines[0] == "feature,mean,std"
    assert lines[1].startswith("x,") and lines[6].startswith("hist_u_t-50,")
    assert len(lines) == 1 + 105
    back = read_norm_stats(path)
    assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)
    assert back.n_present == 5
