"""TUM-RGB-D-style sequence loading, trajectory text I/O, and ATE evaluation.

Sequence directories carry depth.txt / rgb.txt index files (timestamp path
per line, '#' comments) referencing 16-bit depth PNGs (meters = raw / scale)
and 8-bit RGB PNGs, plus an optional groundtruth.txt. Trajectories use the
text format "timestamp tx ty tz qx qy qz qw", camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import ColorFrame, DepthFrame, Intrinsics, Pose

__all__ = [
    "Trajectory",
    "Sequence",
    "SequenceFrame",
    "TUM_DEFAULT_INTRINSICS",
    "read_trajectory",
    "write_trajectory",
    "associate_timestamps",
    "ate_rmse",
    "load_tum_sequence",
    "load_intrinsics_config",
]

TUM_DEFAULT_INTRINSICS = Intrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5,
                                    width=640, height=480)
TUM_DEPTH_SCALE = 5000.0


@dataclass
class Trajectory:
    """Time-stamped camera-to-world poses, timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0.0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


def write_trajectory(traj: Trajectory, path) -> None:
    """One line per pose: timestamp tx ty tz qx qy qz qw, 6 decimals."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(traj.timestamps, traj.poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
            tx, ty, tz = pose.translation
            f.write("%.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f\n"
                    % (t, tx, ty, tz, q[0], q[1], q[2], q[3]))


def read_trajectory(path) -> Trajectory:
    timestamps = []
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError("%s:%d: expected 8 fields, got %d"
                                 % (path, lineno, len(parts)))
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError("%s:%d: %s" % (path, lineno, exc)) from exc
            q = np.asarray(vals[4:8])
            norm = np.linalg.norm(q)
            if norm == 0.0:
                raise ValueError("%s:%d: zero quaternion" % (path, lineno))
            R = Rotation.from_quat(q / norm).as_matrix()
            timestamps.append(vals[0])
            poses.append(Pose(R, np.asarray(vals[1:4])))
    return Trajectory(np.asarray(timestamps), poses)


def associate_timestamps(times_a, times_b, max_gap: float = 0.02) -> list:
    """Greedy nearest-timestamp matching: best gaps first, each side used once."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    candidates = []
    for i, ta in enumerate(times_a):
        gaps = np.abs(times_b - ta)
        for j in np.nonzero(gaps <= max_gap)[0]:
            candidates.append((gaps[j], i, int(j)))
    candidates.sort()
    used_a: set = set()
    used_b: set = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def _horn_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form rigid (no scale) least-squares alignment src -> dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ S @ U.T
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(estimated: Trajectory, gt: Trajectory, max_gap: float = 0.02) -> float:
    """Absolute trajectory error RMSE in centimeters after rigid alignment."""
    pairs = associate_timestamps(estimated.timestamps, gt.timestamps, max_gap)
    if len(pairs) < 2:
        raise ValueError("fewer than 2 time-associated pose pairs")
    est = estimated.positions()[[i for i, _ in pairs]]
    ref = gt.positions()[[j for _, j in pairs]]
    R, t = _horn_alignment(est, ref)
    residual = ref - (est @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1)))) * 100.0


@dataclass
class SequenceFrame:
    """Lazy handle on one associated frame of a sequence."""

    timestamp: float
    depth_path: Path
    color_path: Path | None
    intrinsics: Intrinsics
    depth_scale: float = TUM_DEPTH_SCALE

    def load_depth(self) -> DepthFrame:
        from PIL import Image

        raw = np.asarray(Image.open(self.depth_path))
        z = raw.astype(float) / self.depth_scale
        return DepthFrame(z, self.intrinsics, self.timestamp)

    def load_color(self) -> ColorFrame | None:
        if self.color_path is None:
            return None
        from PIL import Image

        rgb = np.asarray(Image.open(self.color_path).convert("RGB"))
        return ColorFrame(rgb.astype(float) / 255.0, self.intrinsics, self.timestamp)


@dataclass
class Sequence:
    frames: list
    gt_trajectory: Trajectory | None = None
    intrinsics: Intrinsics = TUM_DEFAULT_INTRINSICS

    def __len__(self) -> int:
        return len(self.frames)


def _read_index(path: Path) -> list:
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError("%s:%d: expected 'timestamp path'" % (path, lineno))
            entries.append((float(parts[0]), parts[1]))
    entries.sort()
    return entries


def load_intrinsics_config(path) -> tuple[Intrinsics, float]:
    """Key=value intrinsics file: fx, fy, cx, cy, width, height, depth_scale."""
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val.strip())
    intr = Intrinsics(fx=values["fx"], fy=values["fy"], cx=values["cx"],
                      cy=values["cy"], width=int(values["width"]),
                      height=int(values["height"]))
    return intr, values.get("depth_scale", TUM_DEPTH_SCALE)


def load_tum_sequence(directory, max_gap: float = 0.02) -> Sequence:
    """Associate depth/color by nearest timestamp; depth frames without a color
    partner within max_gap are kept color-less."""
    directory = Path(directory)
    depth_index = directory / "depth.txt"
    if not depth_index.exists():
        raise FileNotFoundError("missing index file %s" % depth_index)
    depth_entries = _read_index(depth_index)

    intr, depth_scale = TUM_DEFAULT_INTRINSICS, TUM_DEPTH_SCALE
    config = directory / "intrinsics.txt"
    if config.exists():
        intr, depth_scale = load_intrinsics_config(config)

    rgb_entries = []
    rgb_index = directory / "rgb.txt"
    if rgb_index.exists():
        rgb_entries = _read_index(rgb_index)
    color_of = {}
    if rgb_entries:
        pairs = associate_timestamps([t for t, _ in depth_entries],
                                     [t for t, _ in rgb_entries], max_gap)
        color_of = {i: j for i, j in pairs}

    frames = []
    for i, (t, rel) in enumerate(depth_entries):
        color_path = None
        if i in color_of:
            color_path = directory / rgb_entries[color_of[i]][1]
        frames.append(SequenceFrame(t, directory / rel, color_path, intr, depth_scale))

    gt = None
    gt_path = directory / "groundtruth.txt"
    if gt_path.exists():
        gt = read_trajectory(gt_path)
    return Sequence(frames, gt, intr)
