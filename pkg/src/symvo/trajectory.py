"""Timestamped pose sequences and their on-disk formats.

Two formats are read and written:

- tum: ``timestamp tx ty tz qx qy qz qw`` per line, unit quaternion,
  world-from-camera.
- kitti: 12 floats per line, the row-major 3x4 world-from-camera matrix;
  the line index doubles as the timestamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, SymvoError
from .geometry import Pose, quaternion_to_rotation, rotation_to_quaternion


@dataclass(frozen=True)
class Trajectory:
    """Strictly time-ordered world-from-camera poses."""

    timestamps: np.ndarray  # (n,)
    poses: tuple  # of Pose

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if ts.ndim != 1 or len(self.poses) != ts.size:
            raise ValueError("timestamps and poses must be parallel")
        if ts.size >= 2 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def transformed(self, scale: float, rotation, translation) -> "Trajectory":
        """Apply a similarity transform to every pose."""
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        new_poses = [
            Pose(R @ p.rotation, scale * (R @ p.translation) + t)
            for p in self.poses
        ]
        return Trajectory(self.timestamps.copy(), tuple(new_poses))

    def reversed(self) -> "Trajectory":
        """Frames in reverse order with spacing-preserving timestamps."""
        ts = self.timestamps
        if ts.size == 0:
            return self
        new_ts = ts[0] + (ts[-1] - ts[::-1])
        return Trajectory(new_ts, tuple(reversed(self.poses)))


def load_trajectory(path, format: str = "tum") -> Trajectory:
    if format not in ("tum", "kitti"):
        raise ValueError(f"unknown trajectory format {format!r}")
    timestamps, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if format == "tum":
                if len(fields) != 8:
                    raise ParseError(path, lineno,
                                     f"expected 8 fields, got {len(fields)}")
                try:
                    values = [float(x) for x in fields]
                except ValueError as exc:
                    raise ParseError(path, lineno, str(exc)) from exc
                t, tx, ty, tz, qx, qy, qz, qw = values
                norm = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
                if abs(norm - 1.0) > 1e-3:
                    raise ParseError(
                        path, lineno, f"quaternion norm {norm:.6f} is not 1"
                    )
                timestamps.append(t)
                poses.append(Pose(quaternion_to_rotation((qx, qy, qz, qw)),
                                  (tx, ty, tz)))
            else:
                if len(fields) != 12:
                    raise ParseError(path, lineno,
                                     f"expected 12 fields, got {len(fields)}")
                try:
                    values = np.array([float(x) for x in fields])
                except ValueError as exc:
                    raise ParseError(path, lineno, str(exc)) from exc
                M = values.reshape(3, 4)
                try:
                    pose = Pose(M[:, :3], M[:, 3])
                except ValueError as exc:
                    raise ParseError(path, lineno, str(exc)) from exc
                timestamps.append(float(len(poses)))
                poses.append(pose)
    if not poses:
        raise SymvoError(f"{path}: trajectory file holds no poses")
    return Trajectory(np.array(timestamps), tuple(poses))


def save_trajectory(path, trajectory: Trajectory, format: str = "tum"):
    if format not in ("tum", "kitti"):
        raise ValueError(f"unknown trajectory format {format!r}")
    with open(path, "w") as f:
        for t, pose in zip(trajectory.timestamps, trajectory.poses):
            if format == "tum":
                q = rotation_to_quaternion(pose.rotation)
                tx, ty, tz = pose.translation
                f.write(
                    f"{t:.9f} {tx:.17g} {ty:.17g} {tz:.17g} "
                    f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}\n"
                )
            else:
                M = np.hstack([pose.rotation, pose.translation[:, None]])
                f.write(" ".join(f"{x:.17g}" for x in M.ravel()) + "\n")
