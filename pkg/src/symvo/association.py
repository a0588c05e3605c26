"""Data association between keypoints, keyframes, and map points.

Two axes are selectable independently:

- ordering: ``HAMMING_ORDERED`` builds every admissible candidate pair and
  accepts them globally by ascending descriptor distance, which makes the
  result independent of input ordering.  ``SEQUENTIAL`` walks the queries
  in the order given and greedily grabs the best remaining target, which
  is order-sensitive by design (the bias witness).
- constraint mode: ``SYMMETRIC`` applies one shared descriptor threshold
  and one shared gate set at every call site; ``HETEROGENEOUS`` allows a
  separate threshold per call site, mimicking pipelines whose matching
  stages were tuned independently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NoBaselineError
from .features import hamming_matrix
from .geometry import (
    CameraIntrinsics,
    Pose,
    parallax_angles,
    projection_jacobian,
    unit_ray,
)


class Ordering(enum.Enum):
    SEQUENTIAL = "sequential"
    HAMMING_ORDERED = "hamming_ordered"


class ConstraintMode(enum.Enum):
    HETEROGENEOUS = "heterogeneous"
    SYMMETRIC = "symmetric"


class Site(enum.Enum):
    """The four association call sites of the tracking/mapping loop."""

    PROJECTION_TRACK = "projection_track"      # c1: motion-model tracking
    PROJECTION_LOCAL = "projection_local"      # c2: local-map tracking
    TRIANGULATION = "triangulation"            # c3: new-point creation
    FUSE = "fuse"                              # c4: duplicate merging


@dataclass(frozen=True)
class AssociationPolicy:
    """Gate thresholds and regime selection for all association sites."""

    descriptor_threshold: int = 50
    site_thresholds: dict = field(default_factory=dict)
    min_parallax: float = math.radians(1.0)
    use_depth_filter: bool = True
    epipolar_sigma_factor: float = 2.0
    ordering: Ordering = Ordering.HAMMING_ORDERED
    constraint_mode: ConstraintMode = ConstraintMode.SYMMETRIC

    def threshold_for(self, site: Site) -> int:
        if self.constraint_mode is ConstraintMode.SYMMETRIC:
            return self.descriptor_threshold
        return int(self.site_thresholds.get(site, self.descriptor_threshold))

    def with_site_thresholds(self, c1=None, c2=None, c3=None, c4=None):
        table = dict(self.site_thresholds)
        for site, c in zip(
            (Site.PROJECTION_TRACK, Site.PROJECTION_LOCAL,
             Site.TRIANGULATION, Site.FUSE),
            (c1, c2, c3, c4),
        ):
            if c is not None:
                table[site] = int(c)
        return replace(self, site_thresholds=table)


@dataclass(frozen=True)
class MatchCandidate:
    """A gated query/target pairing with its gate diagnostics."""

    query_index: int
    target_index: int
    hamming: int
    parallax: float | None = None
    predicted_depth_ok: bool | None = None


def passes_gates(candidate: MatchCandidate, policy: AssociationPolicy,
                 site: Site) -> bool:
    """The one gate predicate shared by every association site.

    Clauses whose inputs are undefined for a pairing (parallax for an
    already-triangulated point, the depth filter where no interval exists)
    are vacuous at every site alike.
    """
    if candidate.hamming > policy.threshold_for(site):
        return False
    if policy.use_depth_filter and candidate.predicted_depth_ok is False:
        return False
    if candidate.parallax is not None and candidate.parallax < policy.min_parallax:
        return False
    return True


def _admissible_pairs(dist, threshold, pair_mask=None, query_mask=None):
    ok = dist <= threshold
    if query_mask is not None:
        ok &= np.asarray(query_mask, dtype=bool)[:, None]
    if pair_mask is not None:
        ok &= np.asarray(pair_mask, dtype=bool)
    return ok


def match(query_ids, query_descriptors, target_ids, target_descriptors,
          policy: AssociationPolicy, site: Site,
          pair_mask=None, query_mask=None, parallax=None, depth_ok=None):
    """One-to-one matching between two descriptor stacks.

    ``pair_mask`` (Nq, Nt) carries any geometric admissibility computed by
    the call site; ``depth_ok`` (Nq,) the per-query depth-filter verdict;
    ``parallax`` (Nq, Nt) per-pair angles where triangulation applies.
    Returns accepted MatchCandidate records.
    """
    query_ids = np.asarray(query_ids, dtype=np.int64)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if query_ids.size == 0 or target_ids.size == 0:
        return []
    dist = hamming_matrix(query_descriptors, target_descriptors)
    threshold = policy.threshold_for(site)
    ok = _admissible_pairs(dist, threshold, pair_mask)
    if policy.use_depth_filter and depth_ok is not None:
        ok &= np.asarray(depth_ok, dtype=bool)[:, None]
    if parallax is not None:
        ok &= np.asarray(parallax) >= policy.min_parallax
    if query_mask is not None:
        ok &= np.asarray(query_mask, dtype=bool)[:, None]
    qi, ti = np.nonzero(ok)
    if qi.size == 0:
        return []

    def candidate(q, t):
        return MatchCandidate(
            query_index=int(query_ids[q]),
            target_index=int(target_ids[t]),
            hamming=int(dist[q, t]),
            parallax=None if parallax is None else float(parallax[q, t]),
            predicted_depth_ok=None if depth_ok is None else bool(depth_ok[q]),
        )

    accepted = []
    if policy.ordering is Ordering.HAMMING_ORDERED:
        order = np.lexsort((target_ids[ti], query_ids[qi], dist[qi, ti]))
        used_q, used_t = set(), set()
        for k in order:
            q, t = int(qi[k]), int(ti[k])
            if q in used_q or t in used_t:
                continue
            used_q.add(q)
            used_t.add(t)
            accepted.append(candidate(q, t))
    else:
        used_t = set()
        by_query = {}
        for k in range(qi.size):
            by_query.setdefault(int(qi[k]), []).append(int(ti[k]))
        for q in range(query_ids.size):
            best_t, best_d = None, None
            for t in by_query.get(q, ()):
                if t in used_t:
                    continue
                d = int(dist[q, t])
                if best_d is None or d < best_d:
                    best_t, best_d = t, d
            if best_t is not None:
                used_t.add(best_t)
                accepted.append(candidate(q, best_t))
    return accepted


def search_by_projection(keyframe, map_points, predicted_pose_wc: Pose,
                         policy: AssociationPolicy, cam: CameraIntrinsics,
                         site: Site = Site.PROJECTION_TRACK,
                         exclude_point_ids=()):
    """Match map points against a frame's keypoints under a predicted pose.

    Candidate gating: positive depth, projection inside the image, the
    depth-invariance filter, then the descriptor threshold.  Returns
    accepted candidates with query ids = point ids, target ids = keypoint
    indices.
    """
    points = [p for p in map_points if p.point_id not in exclude_point_ids]
    if not points or keyframe.n_keypoints == 0:
        return []
    pose_cw = predicted_pose_wc.inverse()
    positions = np.stack([p.position for p in points])
    in_cam = pose_cw.apply(positions)
    z = in_cam[:, 2]
    visible = z > 1e-9
    uv = np.zeros((len(points), 2))
    if np.any(visible):
        vis_pts = in_cam[visible]
        uv[visible, 0] = cam.fx * vis_pts[:, 0] / vis_pts[:, 2] + cam.cx
        uv[visible, 1] = cam.fy * vis_pts[:, 1] / vis_pts[:, 2] + cam.cy
    visible &= cam.contains(uv)
    if not np.any(visible):
        return []
    depth_ok = np.array(
        [
            bool(visible[k]) and points[k].depth_interval.contains(float(z[k]))
            for k in range(len(points))
        ]
    )
    descriptors = np.stack([p.reference_descriptor.as_array() for p in points])
    return match(
        query_ids=[p.point_id for p in points],
        query_descriptors=descriptors,
        target_ids=np.arange(keyframe.n_keypoints),
        target_descriptors=keyframe.descriptors,
        policy=policy,
        site=site,
        query_mask=visible,
        depth_ok=depth_ok,
    )


def _epipolar_distances(uv_from, uv_to, fundamental, cam):
    """Point-to-epipolar-line distances of ``uv_to`` w.r.t. lines from ``uv_from``."""
    ones = np.ones((uv_from.shape[0], 1))
    x1 = np.hstack([uv_from, ones])
    lines = x1 @ fundamental.T  # (N_from, 3) lines in the target image
    x2 = np.hstack([uv_to, np.ones((uv_to.shape[0], 1))])
    num = np.abs(lines @ x2.T)  # (N_from, N_to)
    den = np.sqrt(lines[:, 0] ** 2 + lines[:, 1] ** 2)[:, None]
    den = np.where(den < 1e-12, 1e-12, den)
    return num / den


def fundamental_from_relative(rel: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """Fundamental matrix for x2' F x1 = 0 given the 1->2 relative pose."""
    t = rel.translation
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    E = tx @ rel.rotation
    K_inv = np.linalg.inv(cam.matrix)
    return K_inv.T @ E @ K_inv


def triangulate_midpoint(center_a, ray_a, center_b, ray_b):
    """Midpoint of the closest approach of two world-frame rays.

    Returns None when the rays are numerically parallel.
    """
    d1 = np.asarray(ray_a, dtype=np.float64)
    d2 = np.asarray(ray_b, dtype=np.float64)
    b = np.asarray(center_b) - np.asarray(center_a)
    a11 = d1 @ d1
    a12 = -(d1 @ d2)
    a22 = d2 @ d2
    det = a11 * a22 - a12 * a12
    if abs(det) < 1e-14 * max(a11 * a22, 1e-300):
        return None
    r1 = d1 @ b
    r2 = -(d2 @ b)
    s1 = (a22 * r1 - a12 * r2) / det
    s2 = (a11 * r2 - a12 * r1) / det
    p1 = np.asarray(center_a) + s1 * d1
    p2 = np.asarray(center_b) + s2 * d2
    return (p1 + p2) / 2.0


@dataclass(frozen=True)
class TriangulatedMatch:
    candidate: MatchCandidate
    position: np.ndarray
    depth_a: float
    depth_b: float


def search_for_triangulation(kf_a, kf_b, policy: AssociationPolicy,
                             cam: CameraIntrinsics,
                             free_a=None, free_b=None):
    """Epipolar-gated matching plus midpoint triangulation of a keyframe pair.

    ``free_a``/``free_b`` restrict the search to keypoints not yet bound
    to a map point.  Raises NoBaselineError for a near-zero baseline.
    """
    baseline = kf_b.pose.translation - kf_a.pose.translation
    if np.linalg.norm(baseline) < 1e-6:
        raise NoBaselineError(
            f"keyframes {kf_a.kf_id} and {kf_b.kf_id} have no baseline"
        )
    if kf_a.n_keypoints == 0 or kf_b.n_keypoints == 0:
        return []
    idx_a = np.arange(kf_a.n_keypoints) if free_a is None else np.asarray(free_a)
    idx_b = np.arange(kf_b.n_keypoints) if free_b is None else np.asarray(free_b)
    if idx_a.size == 0 or idx_b.size == 0:
        return []
    uv_a = kf_a.keypoints[idx_a]
    uv_b = kf_b.keypoints[idx_b]

    rel_ab = kf_b.pose.inverse().compose(kf_a.pose)  # frame a -> frame b
    F_ab = fundamental_from_relative(rel_ab, cam)
    F_ba = fundamental_from_relative(rel_ab.inverse(), cam)
    dist_in_b = _epipolar_distances(uv_a, uv_b, F_ab, cam)
    dist_in_a = _epipolar_distances(uv_b, uv_a, F_ba, cam).T
    sigma_a = np.sqrt(kf_a.noise_sigma2[idx_a])[:, None]
    sigma_b = np.sqrt(kf_b.noise_sigma2[idx_b])[None, :]
    epi_ok = (dist_in_b <= policy.epipolar_sigma_factor * sigma_b) & (
        dist_in_a <= policy.epipolar_sigma_factor * sigma_a
    )

    rays_a = unit_ray(uv_a, cam) @ kf_a.pose.rotation.T
    rays_b = unit_ray(uv_b, cam) @ kf_b.pose.rotation.T
    parallax = parallax_angles(rays_a[:, None, :], rays_b[None, :, :])

    candidates = match(
        query_ids=idx_a,
        query_descriptors=kf_a.descriptors[idx_a],
        target_ids=idx_b,
        target_descriptors=kf_b.descriptors[idx_b],
        policy=policy,
        site=Site.TRIANGULATION,
        pair_mask=epi_ok,
        parallax=parallax,
    )

    center_a = kf_a.pose.translation
    center_b = kf_b.pose.translation
    pos_a = {int(i): k for k, i in enumerate(idx_a)}
    pos_b = {int(i): k for k, i in enumerate(idx_b)}
    results = []
    for cand in candidates:
        ka, kb = pos_a[cand.query_index], pos_b[cand.target_index]
        p = triangulate_midpoint(center_a, rays_a[ka], center_b, rays_b[kb])
        if p is None:
            continue
        z_a = float((kf_a.pose.inverse().apply(p))[2])
        z_b = float((kf_b.pose.inverse().apply(p))[2])
        if z_a <= 0 or z_b <= 0:
            continue
        results.append(TriangulatedMatch(cand, p, z_a, z_b))
    return results


@dataclass(frozen=True)
class FuseDecision:
    """Outcome of projecting a point into a keyframe during fusion."""

    point_id: int
    keypoint_index: int
    merged_into: int | None  # set when the keypoint already belongs elsewhere


def fuse(points, keyframe, policy: AssociationPolicy, cam: CameraIntrinsics,
         claims) -> list:
    """Attach points to a keyframe's keypoints, detecting duplicates.

    ``claims`` maps keypoint index -> point id for already-bound
    keypoints.  A candidate landing on a free keypoint becomes a new
    observation; one landing on a keypoint bound to a different point is a
    merge (survivor = lower point id).  Decisions are returned in point-id
    order and do not mutate anything.
    """
    candidates = search_by_projection(
        keyframe, points, keyframe.pose, policy, cam, site=Site.FUSE
    )
    decisions = []
    for cand in sorted(candidates, key=lambda c: (c.query_index, c.target_index)):
        owner = claims.get(cand.target_index)
        if owner == cand.query_index:
            continue
        decisions.append(
            FuseDecision(
                point_id=cand.query_index,
                keypoint_index=cand.target_index,
                merged_into=None if owner is None else min(owner, cand.query_index),
            )
        )
    return decisions


def dump_matches_csv(path, candidates):
    """Debug emission of accepted candidates."""
    with open(path, "w") as f:
        f.write("query_id,target_id,hamming,parallax_deg\n")
        for c in candidates:
            par = "" if c.parallax is None else f"{math.degrees(c.parallax):.6f}"
            f.write(f"{c.query_index},{c.target_index},{c.hamming},{par}\n")
