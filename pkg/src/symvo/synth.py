"""Ground-truth scene generator for pipeline oracles.

Landmark fields, camera trajectories, projected keypoints with
octave-aware noise, per-landmark descriptor signatures with controlled
bit flips, and decoy outlier keypoints.  Everything is a pure function of
the spec (including its seed), so generated sequences are byte-identical
across runs.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, SceneSpecError
from .features import DESCRIPTOR_BITS, PyramidConfig
from .geometry import CameraIntrinsics, Pose, so3_exp
from .pipeline import FrameInput
from .trajectory import Trajectory, load_trajectory, save_trajectory

TRAJECTORY_KINDS = ("forward-corridor", "lateral", "orbit", "random-walk")

DEFAULT_CAMERA = CameraIntrinsics(
    fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480
)


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to generate one synthetic sequence."""

    n_landmarks: int = 2000
    n_frames: int = 200
    trajectory: str = "forward-corridor"
    path_length: float = 50.0
    noise_px: float = 0.0
    outlier_rate: float = 0.0
    descriptor_flip_rate: float = 0.02
    seed: int = 7
    fps: float = 20.0
    z_near: float = 2.0
    z_far: float = 60.0
    min_visible: int = 50
    orbit_cloud_scale: float = 0.3  # landmark cloud radius / orbit radius
    camera: CameraIntrinsics = field(default_factory=lambda: DEFAULT_CAMERA)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)

    def __post_init__(self):
        if self.trajectory not in TRAJECTORY_KINDS:
            raise SceneSpecError(f"unknown trajectory kind {self.trajectory!r}")
        if not (0 <= self.outlier_rate < 1):
            raise SceneSpecError("outlier_rate must lie in [0, 1)")
        if self.n_frames < 2 or self.n_landmarks < self.min_visible:
            raise SceneSpecError("scene is too small to be observable")


@dataclass
class SyntheticSequence:
    """Frames plus the ground truth they were rendered from."""

    spec: SceneSpec
    frames: list  # of FrameInput
    ground_truth: Trajectory
    landmarks: np.ndarray  # (N, 3)
    signatures: np.ndarray  # (N, n_bytes) uint8 descriptor signatures
    frame_landmark_ids: list  # per frame: (n_keypoints,) landmark id or -1

    @property
    def cam(self) -> CameraIntrinsics:
        return self.spec.camera


def _look_at_rotation(forward, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation with the camera +z along ``forward``."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=np.float64)
    r = np.cross(u, f)
    norm = np.linalg.norm(r)
    if norm < 1e-12:
        u = np.array([0.0, 0.0, 1.0])
        r = np.cross(u, f)
        norm = np.linalg.norm(r)
    r = r / norm
    d = np.cross(f, r)
    return np.stack([r, d, f], axis=1)


def _trajectory_poses(spec: SceneSpec, rng) -> list:
    n, L = spec.n_frames, spec.path_length
    s = np.linspace(0.0, 1.0, n)
    if spec.trajectory == "forward-corridor":
        # gentle lateral sway keeps the path non-collinear for alignment
        x = 0.6 * np.sin(2.0 * math.pi * 1.5 * s)
        y = 0.25 * np.sin(2.0 * math.pi * 0.9 * s + 1.0)
        centers = np.stack([x, y, L * s], axis=1)
        poses = [Pose(np.eye(3), c) for c in centers]
    elif spec.trajectory == "lateral":
        x = L * s
        y = 0.3 * np.sin(2.0 * math.pi * 1.2 * s)
        z = 0.4 * np.sin(2.0 * math.pi * 0.7 * s + 0.5)
        centers = np.stack([x, y, z], axis=1)
        poses = [Pose(np.eye(3), c) for c in centers]
    elif spec.trajectory == "orbit":
        radius = max(L / (2.0 * math.pi), 6.0)
        angle = 2.0 * math.pi * 0.9 * s
        centers = np.stack([
            radius * np.sin(angle),
            0.5 * np.sin(2.0 * math.pi * 0.8 * s),
            -radius * np.cos(angle),
        ], axis=1)
        poses = [
            Pose(_look_at_rotation(-c / np.linalg.norm(c)), c) for c in centers
        ]
    else:  # random-walk
        step = L / n
        heading = np.zeros(3)
        centers = [np.zeros(3)]
        direction = np.array([0.0, 0.0, 1.0])
        for _ in range(n - 1):
            heading = 0.9 * heading + rng.normal(scale=0.02, size=3)
            direction = so3_exp(heading) @ np.array([0.0, 0.0, 1.0])
            centers.append(centers[-1] + step * direction)
        centers = np.stack(centers)
        poses = []
        for k in range(n):
            ahead = centers[min(k + 1, n - 1)] - centers[max(k - 1, 0)]
            poses.append(Pose(_look_at_rotation(ahead), centers[k]))
    return poses


def _landmark_field(spec: SceneSpec, poses, rng) -> np.ndarray:
    centers = np.stack([p.translation for p in poses])
    lo = centers.min(axis=0)
    hi = centers.max(axis=0)
    if spec.trajectory == "orbit":
        # a central cloud small enough to stay fully inside the field of
        # view from everywhere on the orbit
        orbit_radius = 0.5 * float(max(hi[0] - lo[0], hi[2] - lo[2]))
        radius = spec.orbit_cloud_scale * orbit_radius
        pts = rng.uniform(-1.0, 1.0, size=(spec.n_landmarks, 3))
        return pts * np.array([radius, 0.55 * radius, radius])
    margin_side = 7.0
    box_lo = lo - margin_side
    box_hi = hi + margin_side
    if spec.trajectory == "forward-corridor":
        box_lo[2] = lo[2] + spec.z_near
        box_hi[2] = hi[2] + 0.6 * spec.z_far
    elif spec.trajectory == "lateral":
        box_lo[2] = hi[2] + spec.z_near + 2.0
        box_hi[2] = hi[2] + 0.75 * spec.z_far
    return rng.uniform(box_lo, box_hi, size=(spec.n_landmarks, 3))


def generate(spec: SceneSpec) -> SyntheticSequence:
    """Render a full sequence; raises SceneSpecError on starved frames."""
    rng = np.random.default_rng(spec.seed)
    poses = _trajectory_poses(spec, rng)
    landmarks = _landmark_field(spec, poses, rng)
    n_bytes = DESCRIPTOR_BITS // 8
    signatures = rng.integers(0, 256, size=(spec.n_landmarks, n_bytes),
                              dtype=np.uint8)
    cam, pyr = spec.camera, spec.pyramid
    timestamps = np.arange(spec.n_frames, dtype=np.float64) / spec.fps

    # visibility prepass; the deepest visible depth anchors octave 0 so
    # the octave range is exercised regardless of the scene's depth span
    per_frame = []
    z_ref = 0.0
    for k, pose in enumerate(poses):
        rel = pose.inverse().apply(landmarks)
        z = rel[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * rel[:, 0] / z + cam.cx
            v = cam.fy * rel[:, 1] / z + cam.cy
        visible = (
            (z > spec.z_near) & (z < spec.z_far)
            & (u >= 1.0) & (u <= cam.width - 2.0)
            & (v >= 1.0) & (v <= cam.height - 2.0)
        )
        ids = np.nonzero(visible)[0]
        if ids.size < spec.min_visible:
            raise SceneSpecError(
                f"frame {k} observes only {ids.size} landmarks "
                f"(minimum {spec.min_visible})"
            )
        per_frame.append((ids, np.stack([u[ids], v[ids]], axis=1), z[ids]))
        z_ref = max(z_ref, float(z[ids].max()))

    frames = []
    frame_landmark_ids = []
    for k in range(spec.n_frames):
        ids, uv_exact, z_vis = per_frame[k]
        octaves = pyr.octave_for_depth(z_vis, z_far=z_ref)
        uv = uv_exact.copy()
        if spec.noise_px > 0:
            sigma = spec.noise_px * pyr.scale ** octaves.astype(np.float64)
            uv = uv + rng.normal(size=uv.shape) * sigma[:, None]
            uv[:, 0] = np.clip(uv[:, 0], 0.0, cam.width - 1.0)
            uv[:, 1] = np.clip(uv[:, 1], 0.0, cam.height - 1.0)
        descs = signatures[ids].copy()
        if spec.descriptor_flip_rate > 0:
            flips = rng.random((ids.size, DESCRIPTOR_BITS)) < spec.descriptor_flip_rate
            descs ^= np.packbits(flips, axis=1)
        landmark_ids = ids.astype(np.int64)

        n_out = int(round(spec.outlier_rate * ids.size))
        if n_out:
            out_uv = np.stack([
                rng.uniform(1.0, cam.width - 2.0, size=n_out),
                rng.uniform(1.0, cam.height - 2.0, size=n_out),
            ], axis=1)
            out_oct = rng.integers(0, pyr.n_octaves, size=n_out)
            out_desc = rng.integers(0, 256, size=(n_out, n_bytes), dtype=np.uint8)
            uv = np.vstack([uv, out_uv])
            octaves = np.concatenate([octaves, out_oct])
            descs = np.vstack([descs, out_desc])
            landmark_ids = np.concatenate(
                [landmark_ids, np.full(n_out, -1, dtype=np.int64)]
            )

        # detection-like ordering: coarse-to-fine octave, then scanline
        order = np.lexsort((uv[:, 0], uv[:, 1], octaves))
        frames.append(FrameInput(
            timestamp=float(timestamps[k]),
            keypoints=np.ascontiguousarray(uv[order]),
            octaves=np.ascontiguousarray(octaves[order]),
            descriptors=np.ascontiguousarray(descs[order]),
        ))
        frame_landmark_ids.append(np.ascontiguousarray(landmark_ids[order]))

    return SyntheticSequence(
        spec=spec,
        frames=frames,
        ground_truth=Trajectory(timestamps, tuple(poses)),
        landmarks=landmarks,
        signatures=signatures,
        frame_landmark_ids=frame_landmark_ids,
    )


# ----------------------------------------------------------------------
# on-disk layout


def export(seq: SyntheticSequence, out_dir):
    """Write a sequence as the directory layout the runner consumes."""
    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    cam = seq.cam
    pyr = seq.spec.pyramid
    with open(os.path.join(out_dir, "intrinsics.txt"), "w") as f:
        f.write(f"camera.fx = {cam.fx:.17g}\n")
        f.write(f"camera.fy = {cam.fy:.17g}\n")
        f.write(f"camera.cx = {cam.cx:.17g}\n")
        f.write(f"camera.cy = {cam.cy:.17g}\n")
        f.write(f"camera.width = {cam.width}\n")
        f.write(f"camera.height = {cam.height}\n")
        f.write(f"pyramid.scale = {pyr.scale:.17g}\n")
        f.write(f"pyramid.octaves = {pyr.n_octaves}\n")
    with open(os.path.join(out_dir, "times.txt"), "w") as f:
        for frame in seq.frames:
            f.write(f"{frame.timestamp:.9f}\n")
    for k, frame in enumerate(seq.frames):
        path = os.path.join(frames_dir, f"frame_{k:06d}.csv")
        with open(path, "w") as f:
            f.write("u,v,octave,descriptor_hex\n")
            for i in range(frame.n_keypoints):
                f.write(
                    f"{frame.keypoints[i, 0]:.17g},{frame.keypoints[i, 1]:.17g},"
                    f"{int(frame.octaves[i])},"
                    f"{frame.descriptors[i].tobytes().hex()}\n"
                )
    save_trajectory(os.path.join(out_dir, "groundtruth.txt"), seq.ground_truth)
    with open(os.path.join(out_dir, "landmarks.csv"), "w") as f:
        f.write("id,x,y,z\n")
        for i, p in enumerate(seq.landmarks):
            f.write(f"{i},{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}\n")


def load_intrinsics(path) -> tuple:
    """(CameraIntrinsics, PyramidConfig) from an intrinsics file."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            m = re.match(r"^([A-Za-z0-9_.]+)\s*=\s*(.+)$", text)
            if not m:
                raise ParseError(path, lineno, f"malformed line {text!r}")
            values[m.group(1)] = m.group(2)
    try:
        cam = CameraIntrinsics(
            fx=float(values["camera.fx"]), fy=float(values["camera.fy"]),
            cx=float(values["camera.cx"]), cy=float(values["camera.cy"]),
            width=int(values["camera.width"]),
            height=int(values["camera.height"]),
        )
        pyr = PyramidConfig(
            scale=float(values.get("pyramid.scale", 1.2)),
            n_octaves=int(values.get("pyramid.octaves", 8)),
            base_width=int(values["camera.width"]),
            base_height=int(values["camera.height"]),
        )
    except KeyError as exc:
        raise ParseError(path, 0, f"missing key {exc}") from exc
    return cam, pyr


def load_frames(seq_dir) -> tuple:
    """(frames, cam, pyramid) from an exported sequence directory."""
    cam, pyr = load_intrinsics(os.path.join(seq_dir, "intrinsics.txt"))
    times_path = os.path.join(seq_dir, "times.txt")
    with open(times_path) as f:
        timestamps = [float(line) for line in f if line.strip()]
    frames_dir = os.path.join(seq_dir, "frames")
    names = sorted(os.listdir(frames_dir))
    if len(names) != len(timestamps):
        raise ParseError(times_path, 0,
                         f"{len(timestamps)} timestamps for {len(names)} frames")
    frames = []
    for k, name in enumerate(names):
        path = os.path.join(frames_dir, name)
        uv, octs, descs = [], [], []
        with open(path) as f:
            header = f.readline().strip()
            if header != "u,v,octave,descriptor_hex":
                raise ParseError(path, 1, f"unexpected header {header!r}")
            for lineno, line in enumerate(f, start=2):
                text = line.strip()
                if not text:
                    continue
                parts = text.split(",")
                if len(parts) != 4:
                    raise ParseError(path, lineno, "expected 4 columns")
                try:
                    uv.append((float(parts[0]), float(parts[1])))
                    octs.append(int(parts[2]))
                    descs.append(np.frombuffer(bytes.fromhex(parts[3]),
                                               dtype=np.uint8))
                except ValueError as exc:
                    raise ParseError(path, lineno, str(exc)) from exc
        frames.append(FrameInput(
            timestamp=timestamps[k],
            keypoints=np.array(uv, dtype=np.float64).reshape(len(uv), 2),
            octaves=np.array(octs, dtype=np.int64),
            descriptors=(np.stack(descs) if descs
                         else np.zeros((0, DESCRIPTOR_BITS // 8), np.uint8)),
        ))
    return frames, cam, pyr


def load_ground_truth(seq_dir) -> Trajectory:
    return load_trajectory(os.path.join(seq_dir, "groundtruth.txt"), "tum")
