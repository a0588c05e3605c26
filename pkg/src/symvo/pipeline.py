"""Sequential deterministic tracking and mapping.

Every frame is processed to completion before the next one starts:
initialization (seeded RANSAC on an essential matrix), constant-velocity
tracking with two projection-search stages, keyframe creation, point
creation and fusion, local bundle adjustment, and keyframe retention.
The only random draws in a run come from the generator seeded by
``rng_seed``; all container traversal is id-ordered, so identical inputs
reproduce bit-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .association import (
    AssociationPolicy,
    ConstraintMode,
    Ordering,
    Site,
    fuse,
    search_by_projection,
    search_for_triangulation,
    triangulate_midpoint,
)
from .errors import DegenerateProblemError, SymvoError
from .features import PyramidConfig, hamming_matrix
from .geometry import CameraIntrinsics, Pose, project, unit_ray
from .optimizer import (
    ObsTerm,
    OptimizationProblem,
    OutlierMode,
    OutlierPolicy,
    local_bundle_adjustment,
    optimize_pose,
)
from .trajectory import Trajectory
from .uncertainty import CovarianceModel, ResidualWeighting
from .worldmap import WorldMap

_FRAME_SENTINEL = 0  # pseudo keyframe id of the frame being tracked


@dataclass(frozen=True)
class FrameInput:
    """Extracted features of one frame; coordinates at octave-0 scale."""

    timestamp: float
    keypoints: np.ndarray  # (N, 2)
    octaves: np.ndarray  # (N,)
    descriptors: np.ndarray  # (N, n_bytes) packed

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]


def reverse(frames) -> list:
    """Frames in reverse order; timestamps keep origin and spacing."""
    frames = list(frames)
    if not frames:
        return []
    ts = np.array([f.timestamp for f in frames])
    new_ts = ts[0] + (ts[-1] - ts[::-1])
    return [
        replace(f, timestamp=float(t))
        for f, t in zip(reversed(frames), new_ts)
    ]


@dataclass(frozen=True)
class PipelineConfig:
    """Every bias toggle plus the numeric knobs behind them."""

    # the six ablation toggles
    descriptor_selection: str = "geometric"  # geometric | appearance
    use_depth_filter: bool = True
    association_ordering: str = "hamming_ordered"  # hamming_ordered | sequential
    constraint_mode: str = "symmetric"  # symmetric | heterogeneous
    covariance_model: str = "symmetric"  # symmetric | standard
    outlier_policy: str = "keep_all"  # keep_all | early_removal
    rng_seed: int = 13
    # pyramid and depth filter
    pyramid_scale: float = 1.2
    pyramid_octaves: int = 8
    base_sigma2: float = 1.0
    delta_l: int = 1
    # association gates
    descriptor_threshold: int = 50
    threshold_c1: int = -1  # heterogeneous per-site overrides; -1 = shared
    threshold_c2: int = -1
    threshold_c3: int = -1
    threshold_c4: int = -1
    min_parallax_deg: float = 1.0
    epipolar_sigma_factor: float = 2.0
    # optimization
    huber_delta: float = 2.447
    chi2_threshold: float = 5.991
    max_iterations: int = 50
    eps_scalarization: str = "det"
    # initialization
    ransac_iterations: int = 200
    ransac_threshold_px: float = 1.5
    min_init_matches: int = 50
    # keyframe management
    retention_mod: int = 5
    retention_latest: int = 5
    # diagnostics
    collect_matches: bool = False
    validate_world: bool = True

    def association_policy(self) -> AssociationPolicy:
        policy = AssociationPolicy(
            descriptor_threshold=self.descriptor_threshold,
            min_parallax=math.radians(self.min_parallax_deg),
            use_depth_filter=self.use_depth_filter,
            epipolar_sigma_factor=self.epipolar_sigma_factor,
            ordering=Ordering(self.association_ordering),
            constraint_mode=ConstraintMode(self.constraint_mode),
        )
        overrides = {}
        for key, c in zip(
            ("c1", "c2", "c3", "c4"),
            (self.threshold_c1, self.threshold_c2,
             self.threshold_c3, self.threshold_c4),
        ):
            if c >= 0:
                overrides[key] = c
        if overrides:
            policy = policy.with_site_thresholds(**overrides)
        return policy

    def residual_weighting(self) -> ResidualWeighting:
        return ResidualWeighting(
            model=CovarianceModel(self.covariance_model),
            huber_delta=self.huber_delta,
        )

    def outlier(self) -> OutlierPolicy:
        return OutlierPolicy(
            mode=OutlierMode(self.outlier_policy),
            chi2_threshold=self.chi2_threshold,
        )

    def pyramid(self, cam: CameraIntrinsics) -> PyramidConfig:
        return PyramidConfig(
            scale=self.pyramid_scale,
            n_octaves=self.pyramid_octaves,
            base_width=cam.width,
            base_height=cam.height,
            base_sigma2=self.base_sigma2,
        )

    def snapshot(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    n_matches_track: int
    n_matches_local: int
    n_dropped: int


@dataclass
class RunReport:
    """Everything a run leaves behind apart from the trajectory."""

    health: str  # ok | tracking_lost | init_failed
    n_frames: int
    n_tracked: int
    lost_at_frame: int | None
    graph_stats: tuple
    digest: str
    frame_records: list = field(default_factory=list)
    n_observations_removed: int = 0
    config_snapshot: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "health": self.health,
            "n_frames": self.n_frames,
            "n_tracked": self.n_tracked,
            "lost_at_frame": self.lost_at_frame,
            "graph_stats": {
                "n_map_points": self.graph_stats[0],
                "n_local_keyframes": self.graph_stats[1],
                "n_observation_inliers": self.graph_stats[2],
            },
            "digest": self.digest,
            "n_observations_removed": self.n_observations_removed,
            "config": self.config_snapshot,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def poses_digest(timestamps, poses) -> str:
    """sha256 over the raw bytes of every estimated pose, in order."""
    h = hashlib.sha256()
    for t, pose in zip(timestamps, poses):
        h.update(np.float64(t).tobytes())
        h.update(np.ascontiguousarray(pose.rotation).tobytes())
        h.update(np.ascontiguousarray(pose.translation).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------
# two-view initialization


def _eight_point(x1, x2):
    """Essential matrix from >= 8 normalized correspondences."""
    A = np.stack([
        x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
        x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
        x1[:, 0], x1[:, 1], np.ones(len(x1)),
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, s, Vt = np.linalg.svd(E)
    sigma = (s[0] + s[1]) / 2.0
    return U @ np.diag([sigma, sigma, 0.0]) @ Vt


def _epipolar_residuals_px(E, x1, x2, cam):
    """Symmetric point-to-epipolar-line distances in pixels."""
    K = cam.matrix
    K_inv = np.linalg.inv(K)
    F = K_inv.T @ E @ K_inv
    u1 = np.hstack([x1 @ K[:2, :2].T + K[:2, 2], np.ones((len(x1), 1))])
    u2 = np.hstack([x2 @ K[:2, :2].T + K[:2, 2], np.ones((len(x2), 1))])
    l2 = u1 @ F.T
    l1 = u2 @ F
    d2 = np.abs(np.sum(l2 * u2, axis=1)) / np.hypot(l2[:, 0], l2[:, 1])
    d1 = np.abs(np.sum(l1 * u1, axis=1)) / np.hypot(l1[:, 0], l1[:, 1])
    return np.maximum(d1, d2)


def _decompose_essential(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


@dataclass
class TwoViewResult:
    rel: Pose  # camera-from-camera: maps view-1 coords into view 2
    points: np.ndarray  # (N, 3) in the first camera's frame
    pair_indices: np.ndarray  # (N, 2) keypoint indices (view1, view2)
    parallax: np.ndarray  # (N,)


def initialize_two_view(uv1, uv2, cam: CameraIntrinsics, rng,
                        iterations: int = 200, threshold_px: float = 1.5,
                        sigma=None):
    """Seeded-RANSAC relative pose and triangulation of two views.

    Returns (rel_pose, points, inlier_mask, parallax) or None when no
    usable model exists.  No adaptive early exit: the iteration count is
    fixed so the draw sequence never depends on the data.  ``sigma`` is
    the per-pair keypoint deviation; the pixel threshold scales with it
    so coarse-octave matches are gated fairly.
    """
    n = len(uv1)
    if n < 8:
        return None
    x1 = unit_ray(uv1, cam)[:, :2]
    x2 = unit_ray(uv2, cam)[:, :2]
    cutoff = threshold_px * (np.ones(n) if sigma is None else np.asarray(sigma))
    best_count, best_mask, best_E = 0, None, None
    for _ in range(iterations):
        sample = rng.choice(n, size=8, replace=False)
        try:
            E = _eight_point(x1[sample], x2[sample])
        except np.linalg.LinAlgError:
            continue
        res = _epipolar_residuals_px(E, x1, x2, cam)
        mask = res <= cutoff
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_count, best_mask, best_E = count, mask, E
    if best_E is None or best_count < 8:
        return None
    # refit on the consensus set
    E = _eight_point(x1[best_mask], x2[best_mask])
    res = _epipolar_residuals_px(E, x1, x2, cam)
    mask = res <= cutoff
    if np.count_nonzero(mask) >= 8:
        best_E, best_mask = E, mask

    idx = np.nonzero(best_mask)[0]
    d1 = unit_ray(uv1[idx], cam)
    best = None
    for R, t in _decompose_essential(best_E):
        rel = Pose(R, t)
        cam2_wc = rel.inverse()  # pose of view 2 in view-1 coordinates
        d2_world = unit_ray(uv2[idx], cam) @ cam2_wc.rotation.T
        pts, ok = _triangulate_rays(
            np.zeros(3), d1, cam2_wc.translation, d2_world
        )
        z1 = pts[:, 2]
        z2 = (rel.apply(pts))[:, 2]
        good = ok & (z1 > 0) & (z2 > 0)
        count = int(np.count_nonzero(good))
        if best is None or count > best[0]:
            best = (count, rel, pts, good)
    count, rel, pts, good = best
    if count < 8:
        return None
    keep = idx[good]
    pts = pts[good]
    rays1 = unit_ray(uv1[keep], cam)
    rays2 = unit_ray(uv2[keep], cam) @ rel.inverse().rotation.T
    na = np.linalg.norm(rays1, axis=1)
    nb = np.linalg.norm(rays2, axis=1)
    cosang = np.einsum("ij,ij->i", rays1, rays2) / (na * nb)
    parallax = np.arccos(np.clip(cosang, -1.0, 1.0))
    return rel, pts, keep, parallax


def _triangulate_rays(c1, d1, c2, d2):
    """Vectorized midpoint triangulation of paired rays."""
    b = np.asarray(c2) - np.asarray(c1)
    a11 = np.einsum("ij,ij->i", d1, d1)
    a12 = -np.einsum("ij,ij->i", d1, d2)
    a22 = np.einsum("ij,ij->i", d2, d2)
    r1 = d1 @ b
    r2 = -(d2 @ b)
    det = a11 * a22 - a12 * a12
    ok = np.abs(det) > 1e-14 * np.maximum(a11 * a22, 1e-300)
    det_safe = np.where(ok, det, 1.0)
    s1 = (a22 * r1 - a12 * r2) / det_safe
    s2 = (a11 * r2 - a12 * r1) / det_safe
    p1 = np.asarray(c1) + s1[:, None] * d1
    p2 = np.asarray(c2) + s2[:, None] * d2
    return (p1 + p2) / 2.0, ok


# ----------------------------------------------------------------------


class Pipeline:
    """Owns the world model and processes frames strictly in sequence."""

    def __init__(self, cam: CameraIntrinsics, config: PipelineConfig):
        self.cam = cam
        self.config = config
        self.policy = config.association_policy()
        self.weighting = config.residual_weighting()
        self.outlier_policy = config.outlier()
        self.pyramid = config.pyramid(cam)
        self.world = WorldMap(
            cam, self.pyramid,
            delta_l=config.delta_l,
            descriptor_selection=config.descriptor_selection,
            retention_mod=config.retention_mod,
            retention_latest=config.retention_latest,
        )
        self.rng = np.random.default_rng(config.rng_seed)
        self.initialized = False
        self.init_ref: FrameInput | None = None
        self.prev_pose_cw: Pose | None = None
        self.velocity_cw = Pose.identity()
        self.traj_timestamps: list = []
        self.traj_poses: list = []
        self.frame_records: list = []
        self.match_log: list = []
        self.n_removed = 0
        self._frame_index = 0

    # ------------------------------------------------------------------

    def _noise_sigma2(self, octaves) -> np.ndarray:
        return np.asarray(self.pyramid.sigma2_at(octaves), dtype=np.float64)

    def _match_frame_descriptors(self, frame_a, frame_b):
        """Descriptor-only one-to-one matching used by initialization."""
        from .association import match

        return match(
            np.arange(frame_a.n_keypoints), frame_a.descriptors,
            np.arange(frame_b.n_keypoints), frame_b.descriptors,
            self.policy, Site.TRIANGULATION,
        )

    def _try_initialize(self, frame: FrameInput) -> bool:
        if self.init_ref is None:
            self.init_ref = frame
            self._init_failures = 0
            return False
        ref = self.init_ref

        def give_up():
            # a stale reference view blocks initialization forever; move on
            self._init_failures += 1
            if self._init_failures >= 10:
                self.init_ref = frame
                self._init_failures = 0
            return False

        candidates = self._match_frame_descriptors(ref, frame)
        if len(candidates) < self.config.min_init_matches:
            return give_up()
        pairs = np.array(
            [(c.query_index, c.target_index) for c in candidates], dtype=np.int64
        )
        uv1 = ref.keypoints[pairs[:, 0]]
        uv2 = frame.keypoints[pairs[:, 1]]
        sigma = np.sqrt(np.maximum(
            self._noise_sigma2(ref.octaves[pairs[:, 0]]),
            self._noise_sigma2(frame.octaves[pairs[:, 1]]),
        ))
        got = initialize_two_view(
            uv1, uv2, self.cam, self.rng,
            iterations=self.config.ransac_iterations,
            threshold_px=self.config.ransac_threshold_px,
            sigma=sigma,
        )
        if got is None:
            return give_up()
        rel, pts, keep, parallax = got
        if keep.size < self.config.min_init_matches:
            return give_up()
        if np.median(parallax) < math.radians(self.config.min_parallax_deg):
            return give_up()
        # the triangulation-site parallax gate applies to each created
        # point; ill-conditioned depths would poison the first adjustment
        solid = parallax >= self.policy.min_parallax
        if int(np.count_nonzero(solid)) < self.config.min_init_matches:
            return give_up()
        keep = keep[solid]
        pts = pts[solid]
        # monocular scale gauge: unit median depth in the first view
        scale = 1.0 / float(np.median(pts[:, 2]))
        pts = pts * scale
        rel = Pose(rel.rotation, rel.translation * scale)

        world = self.world
        kf1 = world.add_keyframe(
            ref.timestamp, Pose.identity(), ref.keypoints, ref.octaves,
            ref.descriptors,
        )
        kf2 = world.add_keyframe(
            frame.timestamp, rel.inverse(), frame.keypoints, frame.octaves,
            frame.descriptors,
        )
        for row, (i1, i2) in zip(
            range(keep.size), pairs[keep]
        ):
            world.create_point(pts[row], [(kf1.kf_id, int(i1)), (kf2.kf_id, int(i2))])
        self.initialized = True
        self.prev_pose_cw = Pose.identity()  # kf1 camera-from-world
        pose2_cw = kf2.pose.inverse()
        self.velocity_cw = pose2_cw.compose(self.prev_pose_cw.inverse())
        self.prev_pose_cw = pose2_cw
        self._mapping_step(kf2)
        # both initial poses enter the trajectory after the mapping step
        self._record_pose(ref.timestamp, world.keyframes[kf1.kf_id].pose)
        self._record_pose(frame.timestamp, world.keyframes[kf2.kf_id].pose)
        return True

    # ------------------------------------------------------------------

    def _record_pose(self, timestamp, pose_wc):
        self.traj_timestamps.append(float(timestamp))
        self.traj_poses.append(pose_wc)

    def _candidate_points(self, kf_ids):
        seen = set()
        out = []
        for kf_id in kf_ids:
            kf = self.world.keyframes.get(kf_id)
            if kf is None:
                continue
            for kp_index in sorted(kf.claims):
                pid = kf.claims[kp_index]
                if pid not in seen:
                    seen.add(pid)
                    out.append(self.world.points[pid])
        return out

    def _pose_problem(self, frame, pose_wc, matches):
        sigma2 = self._noise_sigma2(frame.octaves)
        poses = {_FRAME_SENTINEL: pose_wc}
        points = {}
        terms = []
        symmetric = self.weighting.model is CovarianceModel.SYMMETRIC
        for cand in sorted(matches, key=lambda c: c.query_index):
            point = self.world.points.get(cand.query_index)
            if point is None:
                continue
            points[point.point_id] = point.position
            term_kwargs = {}
            if symmetric:
                ref_id = point.reference_kf_id
                ref_kf = self.world.keyframes[ref_id]
                kp_ref = point.observations[ref_id]
                poses.setdefault(ref_id, ref_kf.pose)
                term_kwargs = dict(
                    ref_kf_id=ref_id,
                    ref_uv=tuple(ref_kf.keypoints[kp_ref]),
                    ref_sigma2=2.0 * float(ref_kf.noise_sigma2[kp_ref]),
                )
            terms.append(ObsTerm(
                point.point_id, _FRAME_SENTINEL,
                tuple(frame.keypoints[cand.target_index]),
                2.0 * float(sigma2[cand.target_index]),
                **term_kwargs,
            ))
        return OptimizationProblem(
            cam=self.cam, poses=poses, points=points, observations=terms,
            weighting=self.weighting, variable_pose_ids=(_FRAME_SENTINEL,),
        )

    def _track(self, frame: FrameInput):
        """Two-stage projection search plus pose refinement.

        Returns (pose_wc, matches) or None when tracking is lost.
        """
        pred_cw = self.velocity_cw.compose(self.prev_pose_cw)
        pose_wc = pred_cw.inverse()

        last_kf_id = self.world.keyframe_ids()[-1]
        stage1 = self._candidate_points([last_kf_id])
        self.world.reselect_references(stage1, pose_wc.translation)
        matches = search_by_projection(
            _FrameView(frame, self._noise_sigma2(frame.octaves)),
            stage1, pose_wc, self.policy, self.cam,
            site=Site.PROJECTION_TRACK,
        )
        if self.config.collect_matches:
            self.match_log.extend(matches)
        n_track = len(matches)
        if n_track >= 6:
            try:
                result = optimize_pose(
                    self._pose_problem(frame, pose_wc, matches),
                    self.config.max_iterations,
                )
                pose_wc = result.pose
            except DegenerateProblemError:
                pass

        local_ids = self.world.local_keyframe_ids()
        stage2 = self._candidate_points(local_ids)
        self.world.reselect_references(stage2, pose_wc.translation)
        matches = search_by_projection(
            _FrameView(frame, self._noise_sigma2(frame.octaves)),
            stage2, pose_wc, self.policy, self.cam,
            site=Site.PROJECTION_LOCAL,
        )
        if self.config.collect_matches:
            self.match_log.extend(matches)
        n_local = len(matches)
        if n_local < 6:
            return None, n_track, n_local
        result = optimize_pose(
            self._pose_problem(frame, pose_wc, matches),
            self.config.max_iterations,
        )
        pose_wc = result.pose
        dropped = 0
        if self.outlier_policy.mode is OutlierMode.EARLY_REMOVAL:
            kept = [
                c for c in matches
                if result.inlier.get((c.query_index, _FRAME_SENTINEL), False)
            ]
            dropped = len(matches) - len(kept)
            if len(kept) >= 6:
                matches = kept
        self.frame_records.append(FrameRecord(
            self._frame_index, frame.timestamp, n_track, n_local, dropped,
        ))
        return (pose_wc, matches), n_track, n_local

    # ------------------------------------------------------------------

    def _local_ba(self, new_kf_id):
        world = self.world
        window = world.latest_keyframe_ids()
        window_set = set(window)
        # points observed from the window, with every observing keyframe
        point_ids = []
        for pid in sorted(world.points):
            obs = world.points[pid].observations
            if any(k in window_set for k in obs):
                point_ids.append(pid)
        if not point_ids:
            return
        included_kfs = set()
        for pid in point_ids:
            included_kfs |= set(world.points[pid].observations)
        anchors = sorted(included_kfs - window_set)
        fixed = list(anchors)
        variable = list(window)
        while len(fixed) < 2 and len(variable) > 1:
            fixed.append(variable.pop(0))
        if not fixed:
            fixed.append(variable.pop(0))

        poses = {k: world.keyframes[k].pose for k in sorted(included_kfs | window_set)}
        points = {}
        terms = []
        symmetric = self.weighting.model is CovarianceModel.SYMMETRIC
        for pid in point_ids:
            point = world.points[pid]
            points[pid] = point.position
            ref_id = point.reference_kf_id
            ref_kf = world.keyframes[ref_id]
            kp_ref = point.observations[ref_id]
            for kf_id, kp_index in point.observation_items():
                kf = world.keyframes[kf_id]
                kwargs = {}
                if symmetric and kf_id != ref_id:
                    kwargs = dict(
                        ref_kf_id=ref_id,
                        ref_uv=tuple(ref_kf.keypoints[kp_ref]),
                        ref_sigma2=2.0 * float(ref_kf.noise_sigma2[kp_ref]),
                    )
                terms.append(ObsTerm(
                    pid, kf_id, tuple(kf.keypoints[kp_index]),
                    2.0 * float(kf.noise_sigma2[kp_index]), **kwargs,
                ))
        variable_points = tuple(
            pid for pid in point_ids
            if len(world.points[pid].observations) >= 2
        )
        problem = OptimizationProblem(
            cam=self.cam, poses=poses, points=points, observations=terms,
            weighting=self.weighting,
            variable_pose_ids=tuple(sorted(variable)),
            variable_point_ids=variable_points,
        )
        result = local_bundle_adjustment(
            problem, self.outlier_policy, self.config.max_iterations
        )
        for kf_id in variable:
            world.keyframes[kf_id].pose = result.poses[kf_id]
        for pid in variable_points:
            world.points[pid].position = result.points[pid]
        for (pid, kf_id), flag in result.inlier.items():
            point = world.points.get(pid)
            if point is not None and kf_id in point.observations:
                point.inlier[kf_id] = flag
        for pid, kf_id in result.removed:
            point = world.points.get(pid)
            if point is not None and kf_id in point.observations:
                world.remove_observation(point, kf_id)
                self.n_removed += 1
        # moved poses and points leave cached intervals stale
        world.refresh_points(point_ids)

    def _mapping_step(self, kf_new):
        world = self.world
        world.cull_points()

        # triangulate new points against the recent keyframes
        neighbors = [k for k in world.latest_keyframe_ids() if k != kf_new.kf_id]
        new_point_ids = []
        for kf_prev_id in neighbors:
            kf_prev = world.keyframes[kf_prev_id]
            if np.linalg.norm(
                kf_prev.pose.translation - kf_new.pose.translation
            ) < 1e-6:
                continue
            found = search_for_triangulation(
                kf_prev, kf_new, self.policy, self.cam,
                free_a=kf_prev.free_keypoints(), free_b=kf_new.free_keypoints(),
            )
            for tri in found:
                point = world.create_point(tri.position, [
                    (kf_prev.kf_id, tri.candidate.query_index),
                    (kf_new.kf_id, tri.candidate.target_index),
                ])
                new_point_ids.append(point.point_id)
            if self.config.collect_matches:
                self.match_log.extend(t.candidate for t in found)

        # fuse the new points into the other local keyframes
        local_ids = [
            k for k in world.local_keyframe_ids() if k != kf_new.kf_id
        ]
        for kf_id in local_ids:
            kf = world.keyframes[kf_id]
            alive = [
                world.points[p] for p in sorted(new_point_ids)
                if p in world.points and kf_id not in world.points[p].observations
            ]
            if alive:
                self._apply_fuse(alive, kf)

        # fuse the local map into the new keyframe
        local_points = [
            p for p in self._candidate_points(local_ids)
            if kf_new.kf_id not in p.observations
        ]
        if local_points:
            self._apply_fuse(local_points, world.keyframes[kf_new.kf_id])

        self._local_ba(kf_new.kf_id)
        world.apply_retention(kf_new.kf_id)
        if self.config.validate_world:
            world.check_integrity()

    def _apply_fuse(self, points, kf):
        world = self.world
        self.world.reselect_references(points, kf.pose.translation)
        decisions = fuse(points, kf, self.policy, self.cam, claims=kf.claims)
        for dec in decisions:
            point = world.points.get(dec.point_id)
            if point is None:
                continue
            if dec.merged_into is None:
                if kf.kf_id not in point.observations and \
                        dec.keypoint_index not in kf.claims:
                    world.add_observation(point, kf.kf_id, dec.keypoint_index)
            else:
                owner = kf.claims.get(dec.keypoint_index)
                if owner is None or owner == dec.point_id:
                    continue
                survivor, absorbed = sorted((owner, dec.point_id))
                if survivor in world.points and absorbed in world.points:
                    world.merge_points(survivor, absorbed)

    # ------------------------------------------------------------------

    def process_frame(self, frame: FrameInput) -> bool:
        """Advance the pipeline by one frame; False once tracking is lost."""
        self._frame_index += 1
        if not self.initialized:
            self._try_initialize(frame)
            return True
        tracked, n_track, n_local = self._track(frame)
        if tracked is None:
            return False
        pose_wc, matches = tracked
        kf = self.world.add_keyframe(
            frame.timestamp, pose_wc, frame.keypoints, frame.octaves,
            frame.descriptors,
        )
        for cand in sorted(matches, key=lambda c: c.query_index):
            point = self.world.points.get(cand.query_index)
            if point is None or kf.kf_id in point.observations:
                continue
            if cand.target_index in kf.claims:
                continue
            self.world.add_observation(point, kf.kf_id, cand.target_index)
        self._mapping_step(kf)
        self.velocity_cw = kf.pose.inverse().compose(self.prev_pose_cw.inverse())
        self.prev_pose_cw = kf.pose.inverse()
        self._record_pose(frame.timestamp, self.world.keyframes[kf.kf_id].pose
                          if kf.kf_id in self.world.keyframes else kf.pose)
        return True

    def run(self, frames) -> tuple:
        """Process a frame stream; returns (Trajectory, RunReport)."""
        frames = list(frames)
        if len(frames) < 2:
            raise SymvoError("a run needs at least two frames")
        health = "ok"
        lost_at = None
        for frame in frames:
            if not self.process_frame(frame):
                health = "tracking_lost"
                lost_at = self._frame_index
                break
        if not self.initialized:
            health = "init_failed"
        trajectory = (
            Trajectory(np.array(self.traj_timestamps), tuple(self.traj_poses))
            if self.traj_poses else Trajectory(np.zeros(0), ())
        )
        stats = self.world.graph_stats()
        report = RunReport(
            health=health,
            n_frames=len(frames),
            n_tracked=len(self.traj_poses),
            lost_at_frame=lost_at,
            graph_stats=(stats.n_map_points, stats.n_local_keyframes,
                         stats.n_observation_inliers),
            digest=poses_digest(self.traj_timestamps, self.traj_poses),
            frame_records=self.frame_records,
            n_observations_removed=self.n_removed,
            config_snapshot=self.config.snapshot(),
        )
        return trajectory, report


class _FrameView:
    """Adapter giving a FrameInput the keyframe surface association expects."""

    def __init__(self, frame: FrameInput, noise_sigma2):
        self.kf_id = _FRAME_SENTINEL
        self.keypoints = frame.keypoints
        self.octaves = frame.octaves
        self.descriptors = frame.descriptors
        self.noise_sigma2 = noise_sigma2
        self.pose = Pose.identity()
        self.claims = {}

    @property
    def n_keypoints(self):
        return self.keypoints.shape[0]


def run(frames, cam: CameraIntrinsics, config: PipelineConfig) -> tuple:
    """Convenience wrapper: one pipeline, one run."""
    return Pipeline(cam, config).run(frames)
