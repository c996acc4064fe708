"""Synthetic spinning-ball trajectories, camera projection and sample windows.

World frame: x downrange, y lateral, z up (metres). The ball is launched
with a small random azimuth about the x axis and integrated under gravity,
quadratic drag and a Magnus force ``magnus_coeff * (omega x v)``. Each class
is a fixed spin vector; the defaults are side-spin either way about the
vertical axis and top-/back-spin about the lateral axis, so every pair of
spin vectors is at least 90 degrees apart.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SPINS = (
    (0.0, 0.0, 40.0),
    (0.0, 0.0, -40.0),
    (0.0, 40.0, 0.0),
    (0.0, -40.0, 0.0),
)

TRAJECTORY_HEADER = ["traj_id", "class_id", "frame", "x", "y", "z", "u", "v"]


class TrajectoryTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class BallSimConfig:
    gravity: float = 9.81
    drag_coeff: float = 0.002
    magnus_coeff: float = 0.002
    dt: float = 0.02
    frames: int = 400
    spin_classes: tuple = DEFAULT_SPINS
    launch_speed_range: tuple = (43.0, 49.0)
    launch_angle_range: tuple = (65.0, 77.0)  # elevation, degrees
    azimuth_range: tuple = (-6.0, 6.0)  # degrees
    launch_height: float = 1.0
    trajectories_per_class: int = 11
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.frames < 2:
            raise ValueError(f"frames must be >= 2, got {self.frames}")
        if len(self.spin_classes) < 1:
            raise ValueError("at least one spin class is required")

    @property
    def n_classes(self) -> int:
        return len(self.spin_classes)


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    rotation: np.ndarray  # rows: camera x (right), y (down), z (optical axis) in world coords
    focal: float = 800.0
    principal: tuple = (640.0, 360.0)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation must be a 3x3 orthonormal matrix")
        if not self.focal > 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), focal=800.0, principal=(640.0, 360.0)):
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(position, np.stack([right, down, forward]), focal, tuple(principal))


def default_camera() -> Camera:
    """Fixed camera behind and beside the launch point, looking downrange."""
    return Camera.look_at(position=(-40.0, -60.0, 15.0), target=(60.0, 0.0, 45.0))


class BehindCameraError(ValueError):
    def __init__(self, frame: int, depth: float):
        super().__init__(f"point at frame {frame} has non-positive depth {depth:.6g}")
        self.frame = frame


def project(camera: Camera, xyz) -> np.ndarray:
    """Pinhole projection of one point (3,) or a sequence of points (T, 3)."""
    xyz = np.asarray(xyz, dtype=float)
    cam = (xyz - camera.position) @ camera.rotation.T
    depth = cam[..., 2]
    bad = np.flatnonzero(np.atleast_1d(depth) <= 0)
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(np.atleast_1d(depth)[bad[0]]))
    return camera.focal * cam[..., :2] / depth[..., None] + np.asarray(camera.principal)


@dataclass
class Trajectory:
    traj_id: int
    class_id: int
    xyz: np.ndarray  # (T, 3)
    uv: np.ndarray  # (T, 2)

    def __len__(self):
        return self.xyz.shape[0]


def _acceleration(cfg: BallSimConfig, vel, omega):
    g = np.array([0.0, 0.0, -cfg.gravity])
    return g - cfg.drag_coeff * np.linalg.norm(vel) * vel + cfg.magnus_coeff * np.cross(omega, vel)


def integrate(cfg: BallSimConfig, pos0, vel0, omega, frames=None):
    """Positions and velocities, one row per frame, until ground contact.

    Velocity is advanced with the acceleration at the current velocity and
    position with the mean of the old and new velocity, which is exact under
    constant acceleration (no artificial energy drift in free flight).
    """
    frames = cfg.frames if frames is None else frames
    omega = np.asarray(omega, dtype=float)
    pos = np.empty((frames, 3))
    vel = np.empty((frames, 3))
    pos[0], vel[0] = pos0, vel0
    n = 1
    while n < frames:
        v_new = vel[n - 1] + _acceleration(cfg, vel[n - 1], omega) * cfg.dt
        p_new = pos[n - 1] + 0.5 * (vel[n - 1] + v_new) * cfg.dt
        if p_new[2] < 0.0:
            break
        pos[n], vel[n] = p_new, v_new
        n += 1
    return pos[:n], vel[:n]


def simulate_trajectory(cfg: BallSimConfig, class_id: int, rng: np.random.Generator,
                        camera: Camera | None = None, traj_id: int = 0) -> Trajectory:
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class_id {class_id} outside 0..{cfg.n_classes - 1}")
    camera = default_camera() if camera is None else camera
    speed = rng.uniform(*cfg.launch_speed_range)
    elev = np.deg2rad(rng.uniform(*cfg.launch_angle_range))
    azim = np.deg2rad(rng.uniform(*cfg.azimuth_range))
    vel0 = speed * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
    pos0 = np.array([0.0, 0.0, cfg.launch_height])
    xyz, _ = integrate(cfg, pos0, vel0, cfg.spin_classes[class_id])
    return Trajectory(traj_id, class_id, xyz, project(camera, xyz))


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_dataset(cfg: BallSimConfig, camera: Camera | None = None) -> list[Trajectory]:
    """``trajectories_per_class`` trajectories for every class, ids 0..N-1
    ordered class by class. Each trajectory has its own seeded generator."""
    trajs = []
    for class_id in range(cfg.n_classes):
        for _ in range(cfg.trajectories_per_class):
            idx = len(trajs)
            trajs.append(simulate_trajectory(cfg, class_id, trajectory_rng(cfg.seed, idx), camera, idx))
    return trajs


@dataclass
class VisiblePartition:
    known_idx: tuple
    unknown_idx: tuple

    def __post_init__(self):
        known, unknown = set(self.known_idx), set(self.unknown_idx)
        if known & unknown:
            raise ValueError(f"known and unknown indices overlap: {sorted(known & unknown)}")

    def check(self, n_v: int):
        if sorted(set(self.known_idx) | set(self.unknown_idx)) != list(range(n_v)):
            raise ValueError(f"partition {self} does not cover 0..{n_v - 1}")


#: present layer = (x, y, z, u, v); the 2D projection is observed
BALLS_PARTITION = VisiblePartition(known_idx=(3, 4), unknown_idx=(0, 1, 2))


@dataclass
class Samples:
    present: np.ndarray  # (N, n_v)
    hist: np.ndarray  # (N, n_vlt), frames oldest first
    label: np.ndarray  # (N, n_l) one-hot
    traj_id: np.ndarray
    frame: np.ndarray

    def __len__(self):
        return self.present.shape[0]

    @property
    def class_id(self) -> np.ndarray:
        return self.label.argmax(axis=1)

    def subset(self, mask) -> "Samples":
        return Samples(self.present[mask], self.hist[mask], self.label[mask],
                       self.traj_id[mask], self.frame[mask])

    def for_trajectories(self, ids) -> "Samples":
        return self.subset(np.isin(self.traj_id, list(ids)))


def build_samples(trajs, history: int, n_classes: int | None = None) -> Samples:
    """One sample per frame ``t >= history`` of every trajectory."""
    if n_classes is None:
        n_classes = max(t.class_id for t in trajs) + 1
    parts = []
    for traj in trajs:
        n = len(traj)
        if n <= history:
            raise TrajectoryTooShortError(
                f"trajectory {traj.traj_id} shorter than history ({n} frames, history {history})")
        windows = np.lib.stride_tricks.sliding_window_view(traj.uv, history, axis=0)
        # windows[s] covers frames s..s+history-1 with shape (2, history)
        hist = windows[: n - history].transpose(0, 2, 1).reshape(n - history, 2 * history)
        present = np.hstack([traj.xyz, traj.uv])[history:]
        label = np.zeros((n - history, n_classes))
        label[:, traj.class_id] = 1.0
        parts.append((present, hist, label, np.full(n - history, traj.traj_id),
                      np.arange(history, n)))
    cols = list(zip(*parts))
    return Samples(*(np.concatenate(c) for c in cols))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    n_present: int
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.zeros(self.mean.shape, dtype=bool)

    def _split(self):
        k = self.n_present
        return (self.mean[:k], self.std[:k]), (self.mean[k:], self.std[k:])

    def apply(self, samples: Samples) -> Samples:
        (pm, ps), (hm, hs) = self._split()
        return Samples((samples.present - pm) / ps, (samples.hist - hm) / hs,
                       samples.label, samples.traj_id, samples.frame)

    def invert(self, samples: Samples) -> Samples:
        (pm, ps), (hm, hs) = self._split()
        return Samples(samples.present * ps + pm, samples.hist * hs + hm,
                       samples.label, samples.traj_id, samples.frame)

    def present_to_raw(self, present):
        (pm, ps), _ = self._split()
        return np.asarray(present) * ps + pm

    def present_to_model(self, present):
        (pm, ps), _ = self._split()
        return (np.asarray(present) - pm) / ps


def fit_normalizer(samples: Samples) -> NormStats:
    """Per-feature mean and std over present and history features.

    Features with zero variance keep std 1 and are flagged.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to fit a normalizer")
    feats = np.hstack([samples.present, samples.hist])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    flagged = ~(std > 0)
    std = np.where(flagged, 1.0, std)
    return NormStats(mean, std, samples.present.shape[1], flagged)


def history_feedback(stats: NormStats, known_idx, frame_dims: int = 2):
    """Map the observed part of a normalized present vector onto a
    normalized history frame (the newest slot of the window)."""
    known_idx = np.asarray(known_idx)
    hm, hs = stats.mean[stats.n_present:], stats.std[stats.n_present:]
    new_m, new_s = hm[-frame_dims:], hs[-frame_dims:]

    def feedback(present):
        raw = stats.present_to_raw(present)[..., known_idx]
        return (raw - new_m) / new_s

    return feedback


def kfold_by_trajectory(trajs, n_train: int = 1):
    """Balls protocol: fold ``i`` trains on the ``i``-th trajectory (and the
    next ``n_train - 1``, cyclically) of every class and tests on the rest.

    Returns a list of ``(train_ids, test_ids)`` tuples of trajectory ids.
    """
    by_class: dict[int, list[int]] = {}
    for t in trajs:
        by_class.setdefault(t.class_id, []).append(t.traj_id)
    counts = {len(v) for v in by_class.values()}
    n_folds = min(counts)
    if n_folds < 2:
        raise ValueError("need at least 2 trajectories per class")
    if not 1 <= n_train < n_folds:
        raise ValueError(f"n_train must be in 1..{n_folds - 1}, got {n_train}")
    folds = []
    for i in range(n_folds):
        train, test = [], []
        for cls in sorted(by_class):
            ids = by_class[cls]
            chosen = {ids[(i + k) % len(ids)] for k in range(n_train)}
            train += [t for t in ids if t in chosen]
            test += [t for t in ids if t not in chosen]
        folds.append((sorted(train), sorted(test)))
    return folds


# -- CSV IO ------------------------------------------------------------------

def write_trajectories(path, trajs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for t in trajs:
            for k in range(len(t)):
                writer.writerow([t.traj_id, t.class_id, k, *map(repr, t.xyz[k].tolist()),
                                 *map(repr, t.uv[k].tolist())])


def read_trajectories(paths) -> list[Trajectory]:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    rows: dict[int, list] = {}
    classes: dict[int, int] = {}
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != TRAJECTORY_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            for rec in reader:
                tid, cid, frame = int(rec[0]), int(rec[1]), int(rec[2])
                classes[tid] = cid
                rows.setdefault(tid, []).append((frame, [float(x) for x in rec[3:]]))
    trajs = []
    for tid in sorted(rows):
        recs = sorted(rows[tid])
        if [f for f, _ in recs] != list(range(len(recs))):
            raise ValueError(f"trajectory {tid}: frames not contiguous from 0")
        arr = np.array([vals for _, vals in recs])
        trajs.append(Trajectory(tid, classes[tid], arr[:, :3], arr[:, 3:]))
    return trajs


def feature_names(n_present_names, history: int, frame_names=("u", "v")):
    names = list(n_present_names)
    for lag in range(history, 0, -1):
        names += [f"hist_{c}_t-{lag}" for c in frame_names]
    return names


PRESENT_NAMES = ("x", "y", "z", "u", "v")


def write_norm_stats(path, stats: NormStats, names=None) -> None:
    if names is None:
        history = (stats.mean.size - stats.n_present) // 2
        names = feature_names(PRESENT_NAMES[: stats.n_present], history)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature", "mean", "std"])
        for name, m, s in zip(names, stats.mean.tolist(), stats.std.tolist()):
            writer.writerow([name, repr(m), repr(s)])


def read_norm_stats(path, n_present: int = 5) -> NormStats:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["feature", "mean", "std"]:
            raise ValueError(f"{path}: unexpected header {header}")
        recs = [(float(r[1]), float(r[2])) for r in reader]
    arr = np.array(recs)
    return NormStats(arr[:, 0], arr[:, 1], n_present)
