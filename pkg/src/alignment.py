"""
Frame-to-frame alignment of two robots' maps and abs-max log-odds fusion.

Candidate correspondences come from corner features on the occupied grid and
from same-category object landmarks; both are matched with a rotation
invariant radial descriptor, filtered by RANSAC and validated by obstacle IoU.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.config import (
    CANDIDATE_MAX,
    DESCRIPTOR_MAX_DIST,
    DESCRIPTOR_RING_WIDTH,
    DESCRIPTOR_RINGS,
    IOU_MIN,
    MIN_INLIERS,
    MIN_OVERLAP_CELLS,
    RANSAC_INLIER_CELLS,
    RANSAC_ITERATIONS,
    SNAP_TOLERANCE_DEG,
)
from src.errors import ConsensusError, NoFeaturesError
from src.mapping import InstanceRecord, LogOddsMap, fuse_detection

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


@dataclass(frozen=True)
class RigidTransform2D:
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @property
    def t(self) -> Tuple[float, float]:
        return self.tx, self.ty

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return pts @ self.rotation().T + np.array([self.tx, self.ty])

    def apply_point(self, x: float, y: float) -> Point:
        px, py = self.apply(np.array([[x, y]]))[0]
        return float(px), float(py)

    def inverse(self) -> "RigidTransform2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return RigidTransform2D(-self.theta, -(c * self.tx + s * self.ty), s * self.tx - c * self.ty)

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """
        self ∘ other: apply `other` first.
        """
        tx, ty = self.apply_point(other.tx, other.ty)
        return RigidTransform2D(_wrap(self.theta + other.theta), tx, ty)

    @classmethod
    def identity(cls) -> "RigidTransform2D":
        return cls()


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class AlignmentResult:
    transform: RigidTransform2D
    inlier_count: int
    iou: float
    accepted: bool
    overlap_cells: int = 0


@dataclass(frozen=True)
class AlignmentParams:
    iterations: int = RANSAC_ITERATIONS
    inlier_cells: float = RANSAC_INLIER_CELLS
    min_inliers: int = MIN_INLIERS
    iou_min: float = IOU_MIN
    min_overlap: int = MIN_OVERLAP_CELLS
    rings: int = DESCRIPTOR_RINGS
    ring_width: int = DESCRIPTOR_RING_WIDTH
    candidate_max: int = CANDIDATE_MAX
    descriptor_max_dist: float = DESCRIPTOR_MAX_DIST
    harris_k: float = 0.05
    nms_size: int = 5
    matches_per_corner: int = 3
    snap_tolerance_deg: float = SNAP_TOLERANCE_DEG


@dataclass(frozen=True)
class CandidatePair:
    point_a: Point  # in map A's frame
    point_b: Point  # in map B's frame
    distance: float
    source: str = "corner"


class TransformCache:
    """
    Accepted alignments of one robot, keyed by the unordered robot pair.
    Each stored transform maps the neighbor's frame into the owner's frame.
    """

    def __init__(self, owner_id: int):
        self.owner_id = owner_id
        self._entries: Dict[FrozenSet[int], AlignmentResult] = {}

    def _key(self, neighbor_id: int) -> FrozenSet[int]:
        return frozenset((self.owner_id, neighbor_id))

    def get(self, neighbor_id: int) -> Optional[AlignmentResult]:
        return self._entries.get(self._key(neighbor_id))

    def put(self, neighbor_id: int, result: AlignmentResult) -> None:
        if not result.accepted:
            raise ValueError("Only accepted alignments can be cached.")
        self._entries[self._key(neighbor_id)] = result

    def discard(self, neighbor_id: int) -> Optional[AlignmentResult]:
        return self._entries.pop(self._key(neighbor_id), None)

    def __contains__(self, neighbor_id: int) -> bool:
        return self._key(neighbor_id) in self._entries

    def __len__(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------------
# Descriptors


@dataclass(frozen=True, eq=False)
class RadialDescriptor:
    histogram: np.ndarray

    def distance(self, other: "RadialDescriptor") -> float:
        return float(np.abs(self.histogram - other.histogram).sum())


def _point_to_index(grid: LogOddsMap, point: Point) -> Tuple[float, float]:
    x, y = point
    return y / grid.resolution - 0.5 + grid.origin[0], x / grid.resolution - 0.5 + grid.origin[1]


def radial_descriptor(
    occupied: np.ndarray,
    center: Tuple[float, float],
    rings: int = DESCRIPTOR_RINGS,
    ring_width: int = DESCRIPTOR_RING_WIDTH,
) -> RadialDescriptor:
    """
    Occupied-cell fraction per concentric annulus around a continuous index position.
    """
    radius = rings * ring_width
    ci, cj = center
    i0, j0 = int(math.floor(ci)) - radius - 1, int(math.floor(cj)) - radius - 1
    size = 2 * radius + 3
    ii, jj = np.mgrid[i0 : i0 + size, j0 : j0 + size]
    dist = np.hypot(ii - ci, jj - cj)
    ring = np.floor(dist / ring_width).astype(np.int64)
    inside_disc = dist < radius
    h, w = occupied.shape
    in_grid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
    occ = np.zeros_like(inside_disc)
    occ[in_grid] = occupied[ii[in_grid], jj[in_grid]]
    area = np.bincount(ring[inside_disc], minlength=rings)[:rings].astype(float)
    hits = np.bincount(ring[inside_disc & occ], minlength=rings)[:rings].astype(float)
    return RadialDescriptor(np.divide(hits, area, out=np.zeros(rings), where=area > 0))


def detect_corners(grid: LogOddsMap, params: AlignmentParams = AlignmentParams()) -> List[Tuple[int, int]]:
    """
    Harris corners of the binarised occupied grid, inside explored space.
    Returns array indices.
    """
    occupied = grid.occupied_mask().astype(float)
    if not occupied.any():
        return []
    ix = ndimage.sobel(occupied, axis=1)
    iy = ndimage.sobel(occupied, axis=0)
    sxx = ndimage.gaussian_filter(ix * ix, 1.0)
    syy = ndimage.gaussian_filter(iy * iy, 1.0)
    sxy = ndimage.gaussian_filter(ix * iy, 1.0)
    response = sxx * syy - sxy * sxy - params.harris_k * (sxx + syy) ** 2
    peak = response.max()
    if peak <= 0:
        return []
    local_max = response == ndimage.maximum_filter(response, size=params.nms_size)
    keep = local_max & (response > 0.01 * peak) & grid.explored
    return [(int(i), int(j)) for i, j in np.argwhere(keep)]


def _index_to_point(grid: LogOddsMap, i: int, j: int) -> Point:
    r, c = grid.to_cell(i, j)
    return grid.cell_center((r, c))


def corner_candidates(
    map_a: LogOddsMap, map_b: LogOddsMap, params: AlignmentParams = AlignmentParams()
) -> List[CandidatePair]:
    """
    Cross-map corner pairs ranked by radial-descriptor distance.
    """
    corners_a, corners_b = detect_corners(map_a, params), detect_corners(map_b, params)
    if len(corners_a) < 3 or len(corners_b) < 3:
        raise NoFeaturesError(f"Too few corners ({len(corners_a)}, {len(corners_b)}).")
    occ_a, occ_b = map_a.occupied_mask(), map_b.occupied_mask()
    desc_a = np.stack([radial_descriptor(occ_a, (i, j), params.rings, params.ring_width).histogram for i, j in corners_a])
    desc_b = np.stack([radial_descriptor(occ_b, (i, j), params.rings, params.ring_width).histogram for i, j in corners_b])
    dist = np.abs(desc_a[:, None, :] - desc_b[None, :, :]).sum(axis=2)

    k = min(params.matches_per_corner, len(corners_b))
    pairs = []
    for ia in range(len(corners_a)):
        for ib in np.argsort(dist[ia], kind="stable")[:k]:
            pairs.append((float(dist[ia, ib]), ia, int(ib)))
    pairs.sort()
    return [
        CandidatePair(_index_to_point(map_a, *corners_a[ia]), _index_to_point(map_b, *corners_b[ib]), d, "corner")
        for d, ia, ib in pairs[: params.candidate_max]
    ]


def landmark_candidates(
    registry_a: Sequence[InstanceRecord],
    registry_b: Sequence[InstanceRecord],
    map_a: LogOddsMap,
    map_b: LogOddsMap,
    params: AlignmentParams = AlignmentParams(),
) -> List[CandidatePair]:
    """
    Same-category object centroids whose surrounding obstacle structure agrees.
    """
    occ_a, occ_b = map_a.occupied_mask(), map_b.occupied_mask()
    pairs = []
    for rec_a in registry_a:
        if rec_a.is_spurious:
            continue
        desc_a = radial_descriptor(occ_a, _point_to_index(map_a, rec_a.centroid), params.rings, params.ring_width)
        for rec_b in registry_b:
            if rec_b.category != rec_a.category or rec_b.is_spurious:
                continue
            desc_b = radial_descriptor(occ_b, _point_to_index(map_b, rec_b.centroid), params.rings, params.ring_width)
            d = desc_a.distance(desc_b)
            if d <= params.descriptor_max_dist:
                pairs.append(CandidatePair(rec_a.centroid, rec_b.centroid, d, "landmark"))
    pairs.sort(key=lambda p: (p.distance, p.point_a, p.point_b))
    return pairs


# ---------------------------------------------------------------------------
# Robust estimation


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform2D:
    """
    Least-squares rotation + translation (no scale) mapping src onto dst.
    """
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, d]) @ u.T
    t = mu_d - rot @ mu_s
    return RigidTransform2D(math.atan2(rot[1, 0], rot[0, 0]), float(t[0]), float(t[1]))


def estimate_transform(
    candidates: Sequence[CandidatePair],
    rng: np.random.Generator,
    params: AlignmentParams = AlignmentParams(),
    resolution: float = 0.25,
) -> Tuple[RigidTransform2D, List[int]]:
    """
    RANSAC over 2-pair samples, refit on the best consensus. The transform
    maps B's frame into A's frame.
    """
    if len(candidates) < 2:
        raise ConsensusError("Need at least two candidate pairs.")
    src = np.array([c.point_b for c in candidates], dtype=float)
    dst = np.array([c.point_a for c in candidates], dtype=float)
    eps = params.inlier_cells * resolution
    n = len(candidates)

    i = rng.integers(n, size=params.iterations)
    j = rng.integers(n - 1, size=params.iterations)
    j = j + (j >= i)
    vs, vd = src[j] - src[i], dst[j] - dst[i]
    len_s, len_d = np.hypot(vs[:, 0], vs[:, 1]), np.hypot(vd[:, 0], vd[:, 1])
    valid = (len_s > 1e-9) & (np.abs(len_s - len_d) <= 2 * eps)

    theta = np.arctan2(vd[:, 1], vd[:, 0]) - np.arctan2(vs[:, 1], vs[:, 0])
    cos, sin = np.cos(theta), np.sin(theta)
    tx = dst[i, 0] - (cos * src[i, 0] - sin * src[i, 1])
    ty = dst[i, 1] - (sin * src[i, 0] + cos * src[i, 1])
    px = cos[:, None] * src[None, :, 0] - sin[:, None] * src[None, :, 1] + tx[:, None]
    py = sin[:, None] * src[None, :, 0] + cos[:, None] * src[None, :, 1] + ty[:, None]
    residual = np.hypot(px - dst[None, :, 0], py - dst[None, :, 1])
    inliers = residual <= eps
    counts = np.where(valid, inliers.sum(axis=1), -1)
    spread = np.where(inliers, residual, 0.0).sum(axis=1)
    best = int(np.lexsort((spread, -counts))[0])
    if counts[best] < params.min_inliers:
        raise ConsensusError(f"Best consensus {max(int(counts[best]), 0)} < {params.min_inliers}.")

    members = np.flatnonzero(inliers[best])
    transform = fit_rigid(src[members], dst[members])
    refit = np.hypot(*(transform.apply(src) - dst).T) <= eps
    if refit.sum() >= len(members):
        members = np.flatnonzero(refit)
        transform = fit_rigid(src[members], dst[members])
    if len(members) < params.min_inliers:
        raise ConsensusError(f"Refit consensus {len(members)} < {params.min_inliers}.")
    return transform, [int(m) for m in members]


def snap_transform(
    transform: RigidTransform2D,
    candidates: Sequence[CandidatePair],
    params: AlignmentParams = AlignmentParams(),
    resolution: float = 0.25,
) -> Tuple[RigidTransform2D, List[int]]:
    """
    Round an estimate onto the lattice of frame offsets and recount its consensus.

    Local frames differ by whole quarter turns and whole cells, so the rotation
    is snapped to the nearest quarter turn and the translation becomes the
    whole-cell offset most of the current inliers agree on (ties go to the one
    nearest the estimate). Raises ConsensusError when the estimate sits more
    than `snap_tolerance_deg` off a quarter turn or the snapped transform keeps
    fewer than `min_inliers` pairs.
    """
    quarter = math.pi / 2
    theta = _wrap(quarter * round(transform.theta / quarter))
    off = math.degrees(abs(_wrap(transform.theta - theta)))
    if off > params.snap_tolerance_deg:
        raise ConsensusError(f"Rotation is {off:.1f} deg off a quarter turn.")

    src = np.array([c.point_b for c in candidates], dtype=float)
    dst = np.array([c.point_a for c in candidates], dtype=float)
    eps = params.inlier_cells * resolution
    near = np.hypot(*(transform.apply(src) - dst).T) <= eps
    offsets = dst - src @ RigidTransform2D(theta).rotation().T
    pool = offsets[near] if near.any() else offsets
    keys, counts = np.unique(np.round(pool / resolution).astype(np.int64), axis=0, return_counts=True)
    gap = np.hypot(*(keys - np.array(transform.t) / resolution).T)
    tx, ty = keys[np.lexsort((gap, -counts))[0]] * resolution
    snapped = RigidTransform2D(theta, float(tx), float(ty))

    members = np.flatnonzero(np.hypot(*(snapped.apply(src) - dst).T) <= eps)
    if len(members) < params.min_inliers:
        raise ConsensusError(f"Snapped consensus {len(members)} < {params.min_inliers}.")
    return snapped, [int(m) for m in members]


# ---------------------------------------------------------------------------
# Warping, validation, merging


def warp_cells(src: LogOddsMap, transform: RigidTransform2D, dst: LogOddsMap):
    """
    Array indices of src's explored cells and of their nearest dst cells.
    """
    si, sj = np.nonzero(src.explored)
    cells = np.stack([si - src.origin[0], sj - src.origin[1]], axis=1)
    centers = np.stack([(cells[:, 1] + 0.5) * src.resolution, (cells[:, 0] + 0.5) * src.resolution], axis=1)
    moved = transform.apply(centers)
    dst_cells = np.stack(
        [np.floor(moved[:, 1] / dst.resolution), np.floor(moved[:, 0] / dst.resolution)], axis=1
    ).astype(np.int64)
    return si, sj, dst_cells


def _absmax_scatter(flat: np.ndarray, values: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    out = np.zeros(size, dtype=float)
    filled = np.zeros(size, dtype=bool)
    if flat.size == 0:
        return out, filled
    order = np.lexsort((np.arange(flat.size), np.abs(values), flat))
    ordered = flat[order]
    last = np.r_[ordered[1:] != ordered[:-1], True]
    chosen = order[last]
    out[flat[chosen]] = values[chosen]
    filled[flat[chosen]] = True
    return out, filled


def _warped_channel(values: np.ndarray, di: np.ndarray, dj: np.ndarray, shape: Tuple[int, int]):
    flat = di * shape[1] + dj
    out, filled = _absmax_scatter(flat, values, shape[0] * shape[1])
    return out.reshape(shape), filled.reshape(shape)


def validate_alignment(
    map_a: LogOddsMap,
    map_b: LogOddsMap,
    transform: RigidTransform2D,
    params: AlignmentParams = AlignmentParams(),
) -> Tuple[float, bool, int]:
    """
    Obstacle IoU over cells explored in both maps once B is warped into A.
    Returns (iou, accepted, overlap cell count).
    """
    if not all(math.isfinite(v) for v in (transform.theta, transform.tx, transform.ty)):
        return 0.0, False, 0
    si, sj, dst_cells = warp_cells(map_b, transform, map_a)
    di, dj = dst_cells[:, 0] + map_a.origin[0], dst_cells[:, 1] + map_a.origin[1]
    inside = (di >= 0) & (di < map_a.shape[0]) & (dj >= 0) & (dj < map_a.shape[1])
    occ_b, explored_b = _warped_channel(map_b.occupancy[si[inside], sj[inside]], di[inside], dj[inside], map_a.shape)
    overlap = map_a.explored & explored_b
    occupied_a = overlap & (map_a.occupancy > 0)
    occupied_b = overlap & (occ_b > 0)
    union = int((occupied_a | occupied_b).sum())
    iou = float((occupied_a & occupied_b).sum()) / union if union else 0.0
    overlap_cells = int(overlap.sum())
    return iou, bool(iou >= params.iou_min and overlap_cells >= params.min_overlap), overlap_cells


def merge_maps(dst: LogOddsMap, src: LogOddsMap, transform: RigidTransform2D) -> None:
    """
    Warp src into dst and keep, per cell and channel, the value with the larger
    magnitude (dst wins ties). Values are never summed.
    """
    si, sj, dst_cells = warp_cells(src, transform, dst)
    if dst_cells.size == 0:
        return
    dst.ensure(dst_cells)
    di, dj = dst_cells[:, 0] + dst.origin[0], dst_cells[:, 1] + dst.origin[1]

    warped, filled = _warped_channel(src.occupancy[si, sj], di, dj, dst.shape)
    dst.occupancy = np.where(filled & (np.abs(warped) > np.abs(dst.occupancy)), warped, dst.occupancy)
    dst.explored |= filled
    for category, channel in src.semantic.items():
        warped, filled = _warped_channel(channel[si, sj], di, dj, dst.shape)
        own = dst.channel(category)
        dst.semantic[category] = np.where(filled & (np.abs(warped) > np.abs(own)), warped, own)


def merge_registry(
    dst: List[InstanceRecord],
    src: Sequence[InstanceRecord],
    transform: RigidTransform2D,
    resolution: float,
) -> None:
    for record in src:
        cells = np.asarray(sorted(record.cells), dtype=float)
        centers = np.stack([(cells[:, 1] + 0.5) * resolution, (cells[:, 0] + 0.5) * resolution], axis=1)
        moved = transform.apply(centers)
        warped = {(int(math.floor(y / resolution)), int(math.floor(x / resolution))) for x, y in moved}
        fuse_detection(dst, record.category, warped, record.best_score, record.source_instance_id, resolution, count=record.observation_count)


def align_maps(
    map_a: LogOddsMap,
    registry_a: Sequence[InstanceRecord],
    map_b: LogOddsMap,
    registry_b: Sequence[InstanceRecord],
    rng: np.random.Generator,
    params: AlignmentParams = AlignmentParams(),
) -> Optional[AlignmentResult]:
    """
    Full pipeline: candidates, RANSAC, lattice snap, IoU gate. The transform
    maps B into A. None when no transform could be estimated at all.
    """
    candidates: List[CandidatePair] = []
    try:
        candidates.extend(corner_candidates(map_a, map_b, params))
    except NoFeaturesError as exc:
        logger.debug("[Alignment] %s", exc)
    candidates.extend(landmark_candidates(registry_a, registry_b, map_a, map_b, params))
    if len(candidates) < 2:
        return None
    try:
        transform, inliers = estimate_transform(candidates, rng, params, map_a.resolution)
        transform, inliers = snap_transform(transform, candidates, params, map_a.resolution)
    except ConsensusError as exc:
        logger.debug("[Alignment] %s", exc)
        return None
    iou, accepted, overlap = validate_alignment(map_a, map_b, transform, params)
    return AlignmentResult(transform, len(inliers), iou, accepted, overlap)


def alignment_to_json(result: AlignmentResult) -> dict:
    return {
        "theta": result.transform.theta,
        "t": [result.transform.tx, result.transform.ty],
        "iou": result.iou,
        "inliers": result.inlier_count,
        "accepted": result.accepted,
        "overlap_cells": result.overlap_cells,
    }


def alignment_from_json(data: dict) -> AlignmentResult:
    return AlignmentResult(
        RigidTransform2D(float(data["theta"]), float(data["t"][0]), float(data["t"][1])),
        int(data["inliers"]),
        float(data["iou"]),
        bool(data["accepted"]),
        int(data.get("overlap_cells", 0)),
    )
