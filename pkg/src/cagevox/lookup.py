"""Accelerated point location and ray segmentation over a deformed cage.

A BVH over the deformed face triangles (cage faces plus any region shell
faces) answers three queries:

* ray_hits     -- all ray/triangle intersections, sorted by depth;
* locate_point -- region containing a point, via a single random ray and a
                  front/back test on the first hit;
* segment_ray  -- decomposition of a ray into (t_enter, t_exit, region)
                  intervals by walking the sorted hits and the face
                  adjacency, with barycentric coordinates at tet segment
                  endpoints.

Triangle intersection uses signed edge functions (scalar triple products of
the ray direction with the edge endpoints relative to the origin).  IEEE
negation is exact, so the two triangles incident to a shared edge see
exactly opposite edge values and a ray never falls through the crack
between them, nor double-counts it, except exactly on the edge where both
sides report the crossing and the hits are merged.

Regions are encoded as integers: tets are 0..nt-1, extra regions (rigid
shells, plane-split shells) are nt..nt+m-1, outside is -1.  The segment
walk assumes these regions partition space: shell interiors are cavities of
the tet mesh, not nested inside tets.  A self-intersecting deformed state
breaks the face adjacency along rays and is surfaced as
InconsistentTraversal.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import InconsistentTraversal
from .geometry import OUTSIDE, DeformedState, TetCage, barycentric_many, locate_points_bruteforce

_LEAF_SIZE = 4


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product without np.cross overhead; shape (n, 3)."""
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] + a[:, 2] * b[:, 2]


@dataclass(frozen=True)
class Hit:
    """One ray/triangle intersection."""

    face_index: int
    t: float
    side: str  # 'front' | 'back': the side of the face the ray origin is on


@dataclass
class RaySegments:
    """Ordered interval decomposition of one ray.

    region holds OUTSIDE (-1), a tet index, or an extra-region code.
    entry_bary/exit_bary are barycentric coordinates in the deformed tet at
    the segment endpoints (NaN rows for non-tet segments).
    """

    t_enter: np.ndarray  # (k,)
    t_exit: np.ndarray  # (k,)
    region: np.ndarray  # (k,) int64
    entry_bary: np.ndarray  # (k, 4)
    exit_bary: np.ndarray  # (k, 4)

    def __len__(self) -> int:
        return len(self.region)


@dataclass
class SegmentsBatch:
    """Flattened RaySegments for a batch of rays (offsets index per ray)."""

    offsets: np.ndarray  # (R + 1,)
    t_enter: np.ndarray
    t_exit: np.ndarray
    region: np.ndarray
    entry_bary: np.ndarray
    exit_bary: np.ndarray

    def ray(self, i: int) -> RaySegments:
        a, b = self.offsets[i], self.offsets[i + 1]
        return RaySegments(
            t_enter=self.t_enter[a:b],
            t_exit=self.t_exit[a:b],
            region=self.region[a:b],
            entry_bary=self.entry_bary[a:b],
            exit_bary=self.exit_bary[a:b],
        )


class Bvh:
    """Median-split BVH over the deformed face soup of a cage.

    Immutable for readers after build/refit.  `update` refits boxes in
    place when the frame-to-frame vertex motion is small relative to the
    leaf extents and rebuilds the topology otherwise.
    """

    def __init__(self, cage: TetCage, state: DeformedState | None = None):
        self.cage = cage
        self.num_tets = cage.num_tets
        self._assemble(state)
        self._build()

    # -- face soup --------------------------------------------------------

    def _assemble(self, state: DeformedState | None) -> None:
        cage = self.cage
        verts = cage.rest_vertices if state is None else state.vertices
        pools = [verts]
        tri = [cage.faces.vertex_ids]
        front = [cage.faces.front_tet]
        back = [cage.faces.back_tet]
        offset = len(verts)
        region_states = () if state is None else state.region_states
        for j, reg in enumerate(region_states):
            code = cage.num_tets + j
            pools.append(reg.shell_vertices)
            tri.append(np.asarray(reg.shell_faces, dtype=np.int64) + offset)
            nf = len(reg.shell_faces)
            # outward shell normals: interior is the back side
            front.append(np.full(nf, OUTSIDE, dtype=np.int64))
            back.append(np.full(nf, code, dtype=np.int64))
            offset += len(reg.shell_vertices)
        self.points = np.ascontiguousarray(np.concatenate(pools, axis=0))
        self.tri_vidx = np.ascontiguousarray(np.concatenate(tri, axis=0))
        self.front_region = np.concatenate(front)
        self.back_region = np.concatenate(back)
        self.sorted_vidx = np.sort(self.tri_vidx, axis=1)
        self.state = state

    def _tri_bounds(self):
        p = self.points[self.tri_vidx]  # (F, 3, 3)
        lo, hi = p.min(axis=1), p.max(axis=1)
        # cached per-face data for the intersection prefilters
        self._tri_lo = [np.ascontiguousarray(lo[:, k]) for k in range(3)]
        self._tri_hi = [np.ascontiguousarray(hi[:, k]) for k in range(3)]
        self._face_normal = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        self._face_point = np.ascontiguousarray(p[:, 0])
        return lo, hi

    # -- construction ------------------------------------------------------

    def _build(self) -> None:
        lo, hi = self._tri_bounds()
        centroid = 0.5 * (lo + hi)
        nf = len(self.tri_vidx)
        perm = np.arange(nf, dtype=np.int64)

        left: list[int] = []
        right: list[int] = []
        leaf_start: list[int] = []
        leaf_count: list[int] = []

        def make_node(start: int, count: int) -> int:
            idx = len(left)
            left.append(-1)
            right.append(-1)
            leaf_start.append(start)
            leaf_count.append(count)
            if count > _LEAF_SIZE:
                sl = perm[start : start + count]
                c = centroid[sl]
                axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
                half = count // 2
                perm[start : start + count] = sl[np.argpartition(c[:, axis], half)]
                left[idx] = make_node(start, half)
                right[idx] = make_node(start + half, count - half)
            return idx

        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, 10000))
        try:
            make_node(0, nf)
        finally:
            sys.setrecursionlimit(old_limit)

        self.perm = perm
        self.node_left = np.array(left, dtype=np.int64)
        self.node_right = np.array(right, dtype=np.int64)
        self.leaf_start = np.array(leaf_start, dtype=np.int64)
        self.leaf_count = np.array(leaf_count, dtype=np.int64)
        n = len(left)
        self.node_lo = np.empty((n, 3))
        self.node_hi = np.empty((n, 3))
        self._refit_boxes(lo, hi)
        self._built_points = self.points.copy()

    def _refit_boxes(self, tri_lo=None, tri_hi=None) -> None:
        if tri_lo is None:
            tri_lo, tri_hi = self._tri_bounds()
        n = len(self.node_left)
        for i in range(n - 1, -1, -1):
            if self.node_left[i] < 0:  # leaf
                s, c = self.leaf_start[i], self.leaf_count[i]
                faces = self.perm[s : s + c]
                self.node_lo[i] = tri_lo[faces].min(axis=0)
                self.node_hi[i] = tri_hi[faces].max(axis=0)
            else:
                l, r = self.node_left[i], self.node_right[i]
                self.node_lo[i] = np.minimum(self.node_lo[l], self.node_lo[r])
                self.node_hi[i] = np.maximum(self.node_hi[l], self.node_hi[r])
        # contiguous per-axis views for the traversal inner loop
        self._nlo = [np.ascontiguousarray(self.node_lo[:, k]) for k in range(3)]
        self._nhi = [np.ascontiguousarray(self.node_hi[:, k]) for k in range(3)]

    def update(self, state: DeformedState) -> str:
        """Adopt a new deformed state; refit when motion is small.

        Returns 'refit' or 'rebuild' (for timing reports).
        """
        old_points = self.points
        self._assemble(state)
        if len(self.points) != len(self._built_points):
            self._build()
            return "rebuild"
        disp = float(np.abs(self.points - self._built_points).max())
        leaf_mask = self.node_left < 0
        extent = float(np.mean(self.node_hi[leaf_mask] - self.node_lo[leaf_mask]))
        if disp < 0.1 * extent:
            self._refit_boxes()
            return "refit"
        self._build()
        return "rebuild"

    # -- traversal ---------------------------------------------------------

    def _candidates(self, origins: np.ndarray, dirs: np.ndarray, t_min: float, t_max):
        """(ray, face) candidate pairs whose leaf boxes the rays overlap."""
        nr = len(origins)
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs
        t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (nr,))
        o_cols = [np.ascontiguousarray(origins[:, k]) for k in range(3)]
        iv_cols = [np.ascontiguousarray(inv[:, k]) for k in range(3)]

        rid = np.arange(nr, dtype=np.int64)
        nid = np.zeros(nr, dtype=np.int64)
        keep = self._box_overlap(rid, nid, o_cols, iv_cols, t_min, t_max)
        rid, nid = rid[keep], nid[keep]

        out_r: list[np.ndarray] = []
        out_f: list[np.ndarray] = []
        while rid.size:
            is_leaf = self.node_left[nid] < 0
            if is_leaf.any():
                lr, ln = rid[is_leaf], nid[is_leaf]
                counts = self.leaf_count[ln]
                starts = self.leaf_start[ln]
                total = int(counts.sum())
                base = np.repeat(starts, counts)
                offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
                out_r.append(np.repeat(lr, counts))
                out_f.append(self.perm[base + offs])
            rid, nid = rid[~is_leaf], nid[~is_leaf]
            if not rid.size:
                break
            rid2 = np.concatenate([rid, rid])
            nid2 = np.concatenate([self.node_left[nid], self.node_right[nid]])
            keep = self._box_overlap(rid2, nid2, o_cols, iv_cols, t_min, t_max)
            rid, nid = rid2[keep], nid2[keep]

        if out_r:
            return np.concatenate(out_r), np.concatenate(out_f)
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)

    def _box_overlap(self, rid, nid, o_cols, iv_cols, t_min, t_max):
        enter = np.full(len(rid), t_min)
        exit_ = t_max[rid]
        with np.errstate(invalid="ignore"):  # 0 * inf when o sits on a slab
            for k in range(3):
                ok = o_cols[k][rid]
                ik = iv_cols[k][rid]
                lo = (self._nlo[k][nid] - ok) * ik
                hi = (self._nhi[k][nid] - ok) * ik
                # fmin/fmax drop the NaNs from 0 * inf
                enter = np.maximum(enter, np.fmin(lo, hi))
                exit_ = np.minimum(exit_, np.fmax(lo, hi))
        return enter <= exit_

    def _intersect(self, origins, dirs, t_min, t_max):
        """All hits for a batch of rays, sorted by (ray, t).

        Candidates from the BVH pass a per-triangle slab test and a plane
        depth test before the (exact, shared-edge-consistent) edge-function
        test runs on the survivors.  Returns rid, t, face, before_region,
        after_region arrays.
        """
        cr, cf = self._candidates(origins, dirs, t_min, t_max)
        empty = (np.empty(0, dtype=np.int64), np.empty(0))
        if not cr.size:
            e = empty[0]
            return e, empty[1], e.copy(), e.copy(), e.copy()
        nr = len(origins)
        t_max_b = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (nr,))

        # per-triangle slab prefilter
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs
        enter = np.full(len(cr), t_min)
        exit_ = t_max_b[cr]
        with np.errstate(invalid="ignore"):
            for k in range(3):
                ok = origins[cr, k]
                ik = inv[cr, k]
                lo = (self._tri_lo[k][cf] - ok) * ik
                hi = (self._tri_hi[k][cf] - ok) * ik
                enter = np.maximum(enter, np.fmin(lo, hi))
                exit_ = np.minimum(exit_, np.fmax(lo, hi))
        keep = enter <= exit_
        cr, cf = cr[keep], cf[keep]
        if not cr.size:
            e = empty[0]
            return e, empty[1], e.copy(), e.copy(), e.copy()

        # plane depth prefilter
        o = origins[cr]
        d = dirs[cr]
        n = self._face_normal[cf]
        denom = _dot(d, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = _dot(self._face_point[cf] - o, n) / denom
        ok = (denom != 0.0) & (t > t_min) & (t <= t_max_b[cr])
        cr, cf, t, denom, o, d = cr[ok], cf[ok], t[ok], denom[ok], o[ok], d[ok]
        if not cr.size:
            e = empty[0]
            return e, empty[1], e.copy(), e.copy(), e.copy()

        # signed edge functions; exact antisymmetry under operand swap makes
        # shared-edge classification consistent across incident triangles
        tri = self.tri_vidx[cf]
        a = self.points[tri[:, 0]] - o
        b = self.points[tri[:, 1]] - o
        c = self.points[tri[:, 2]] - o
        w0 = _dot(d, _cross(a, b))
        w1 = _dot(d, _cross(b, c))
        w2 = _dot(d, _cross(c, a))
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))

        cr, cf, t, denom = cr[inside], cf[inside], t[inside], denom[inside]
        forward = denom > 0  # crossing back -> front
        after = np.where(forward, self.front_region[cf], self.back_region[cf])
        before = np.where(forward, self.back_region[cf], self.front_region[cf])
        order = np.lexsort((t, cr))
        return cr[order], t[order], cf[order], before[order], after[order]


def build_bvh(cage: TetCage, state: DeformedState | None = None) -> Bvh:
    """Build the acceleration structure for a cage in a given state."""
    return Bvh(cage, state)


def ray_hits(bvh: Bvh, origin, direction, t_min: float = 0.0, t_max: float = np.inf):
    """All intersections with t in (t_min, t_max], ascending; list of Hit."""
    o = np.asarray(origin, dtype=np.float64)[None, :]
    d = np.asarray(direction, dtype=np.float64)[None, :]
    _, t, f, before, after = bvh._intersect(o, d, t_min, t_max)
    hits = []
    for ti, fi, bi in zip(t, f, before):
        side = "back" if bi == bvh.back_region[fi] else "front"
        hits.append(Hit(face_index=int(fi), t=float(ti), side=side))
    return hits


def locate_points(bvh: Bvh, points: np.ndarray, seed: int = 0, max_retries: int = 8) -> np.ndarray:
    """Region per point via one random ray each; OUTSIDE when nothing is hit.

    Probe directions come from a counter-based generator keyed by the point
    index, so results are reproducible regardless of chunking or threads.
    Degenerate first hits (grazing, or a tie between two faces) retry with
    a fresh direction; after max_retries the brute-force locator decides.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    out = np.full(n, OUTSIDE, dtype=np.int64)
    pending = np.arange(n, dtype=np.int64)
    diam = float(np.linalg.norm(bvh.points.max(axis=0) - bvh.points.min(axis=0)))
    eps_t = 1e-9 * max(diam, 1e-30)

    for retry in range(max_retries):
        if not pending.size:
            return out
        dirs = rng.unit_directions(seed, rng.STREAM_LOCATE_DIR, pending, retry)
        rid, t, f, before, _ = bvh._intersect(points[pending], dirs, 0.0, np.inf)
        first = np.full(pending.size, -1, dtype=np.int64)
        ambiguous = np.zeros(pending.size, dtype=bool)
        if rid.size:
            is_first = np.ones(len(rid), dtype=bool)
            is_first[1:] = rid[1:] != rid[:-1]
            fidx = np.flatnonzero(is_first)
            first[rid[fidx]] = fidx
            # a second hit almost at the same depth makes the verdict unsafe
            second = fidx + 1
            has2 = (second < len(rid)) & (rid[np.minimum(second, len(rid) - 1)] == rid[fidx])
            tie = np.zeros(len(fidx), dtype=bool)
            tie[has2] = (t[second[has2]] - t[fidx[has2]]) < eps_t
            # grazing first hit: direction nearly parallel to the face plane
            tri = bvh.tri_vidx[f[fidx]]
            nrm = np.cross(
                bvh.points[tri[:, 1]] - bvh.points[tri[:, 0]],
                bvh.points[tri[:, 2]] - bvh.points[tri[:, 0]],
            )
            nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
            grazing = np.abs(np.einsum("ij,ij->i", dirs[rid[fidx]], nrm)) < 1e-10
            ambiguous[rid[fidx]] = tie | grazing

        resolved = (first >= 0) & ~ambiguous
        out[pending[resolved]] = before[first[resolved]]
        miss = first < 0
        out[pending[miss]] = OUTSIDE
        pending = pending[ambiguous]

    if pending.size:
        out[pending] = locate_points_bruteforce(bvh.cage, points[pending], bvh.state)
    return out


def locate_point(bvh: Bvh, p, seed: int = 0):
    """Single-point region query; None when outside."""
    r = int(locate_points(bvh, np.asarray(p, dtype=np.float64)[None, :], seed)[0])
    return None if r == OUTSIDE else r


def _share_edge(sorted_vidx: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """True where faces f1[i], f2[i] share at least two vertex indices."""
    a = sorted_vidx[f1]  # (k, 3)
    b = sorted_vidx[f2]
    common = (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1)
    return common >= 2


def segment_rays(
    bvh: Bvh,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_min: float,
    t_max,
) -> SegmentsBatch:
    """Interval decomposition for a batch of rays.

    Walks the depth-sorted hits; between consecutive hits the region is the
    one both bracketing faces agree on.  Hits closer than 1e-9 * t_max on
    edge-sharing faces are reordered/merged (the exact edge-crossing case);
    any remaining adjacency contradiction raises InconsistentTraversal.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    nr = len(origins)
    rid, t, f, before, after = bvh._intersect(origins, dirs, t_min, t_max)
    t_max_arr = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (nr,))
    eps = 1e-9 * float(np.max(t_max_arr)) if np.isfinite(np.max(t_max_arr)) else 1e-9

    # repair: adjacency mismatches within merge distance on edge-sharing
    # faces are ordering artefacts of exact edge crossings
    for _ in range(4):
        same = rid[:-1] == rid[1:]
        bad = same & (after[:-1] != before[1:])
        if not bad.any():
            break
        idx = np.flatnonzero(bad)
        close = (t[idx + 1] - t[idx]) < eps
        idx = idx[close]
        if idx.size:
            idx = idx[_share_edge(bvh.sorted_vidx, f[idx], f[idx + 1])]
        if not idx.size:
            break
        # avoid swapping overlapping pairs in one pass
        keep = np.ones(len(idx), dtype=bool)
        keep[1:] = np.diff(idx) > 1
        idx = idx[keep]
        for arr in (t, f, before, after):
            arr[idx], arr[idx + 1] = arr[idx + 1].copy(), arr[idx].copy()

    same = rid[:-1] == rid[1:]
    bad = same & (after[:-1] != before[1:])
    if bad.any():
        rid, t, f, before, after = _collapse_degenerate_clusters(
            bvh, origins, dirs, rid, t, f, before, after, bad, eps
        )
        same = rid[:-1] == rid[1:]
        bad = same & (after[:-1] != before[1:])
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InconsistentTraversal(
                f"ray {int(rid[i])}: region {int(after[i])} exits into face claiming "
                f"{int(before[i + 1])} at t={t[i + 1]:.6g}; deformed state likely "
                "self-intersects"
            )

    # intervals per ray: hits split [t_min, t_max] into counts[r] + 1 pieces
    counts = np.bincount(rid, minlength=nr)
    seg_counts = counts + 1
    offsets = np.concatenate([[0], np.cumsum(seg_counts)])
    total = int(offsets[-1])
    seg_t0 = np.empty(total)
    seg_t1 = np.empty(total)
    seg_reg = np.empty(total, dtype=np.int64)

    starts = offsets[:-1]
    seg_t0[starts] = t_min
    seg_reg[starts] = OUTSIDE
    ends = offsets[1:] - 1
    seg_t1[ends] = t_max_arr

    if rid.size:
        ray_first = np.concatenate([[0], np.cumsum(counts)])[:-1]
        pos_in_ray = np.arange(len(rid)) - ray_first[rid]
        slot = starts[rid] + pos_in_ray  # segment ending at this hit
        seg_t1[slot] = t
        seg_t0[slot + 1] = t
        seg_reg[slot + 1] = after
        first_hit = pos_in_ray == 0
        seg_reg[starts[rid[first_hit]]] = before[first_hit]

    # drop zero-length slivers (merged edge crossings), then fuse any
    # resulting same-region neighbours
    ray_of_seg = np.repeat(np.arange(nr, dtype=np.int64), seg_counts)
    keep = (seg_t1 - seg_t0) > eps
    seg_t0, seg_t1, seg_reg, ray_of_seg = (
        seg_t0[keep], seg_t1[keep], seg_reg[keep], ray_of_seg[keep],
    )
    if len(seg_reg):
        new_group = np.ones(len(seg_reg), dtype=bool)
        new_group[1:] = (ray_of_seg[1:] != ray_of_seg[:-1]) | (seg_reg[1:] != seg_reg[:-1])
        firsts = np.flatnonzero(new_group)
        lasts = np.concatenate([firsts[1:] - 1, [len(seg_reg) - 1]])
        seg_t0 = seg_t0[firsts]
        seg_t1 = seg_t1[lasts]
        seg_reg = seg_reg[firsts]
        ray_of_seg = ray_of_seg[firsts]

    offsets = np.concatenate([[0], np.cumsum(np.bincount(ray_of_seg, minlength=nr))]).astype(
        np.int64
    )

    entry_bary = np.full((len(seg_reg), 4), np.nan)
    exit_bary = np.full((len(seg_reg), 4), np.nan)
    is_tet = (seg_reg >= 0) & (seg_reg < bvh.num_tets)
    if is_tet.any():
        ti = np.flatnonzero(is_tet)
        tets = seg_reg[ti]
        cage = bvh.cage
        state = bvh.state
        inv = cage.rest_inverses if state is None else state.tet_inverses
        verts = cage.rest_vertices if state is None else state.vertices
        v0 = verts[cage.tets[tets, 0]]
        o = origins[ray_of_seg[ti]]
        d = dirs[ray_of_seg[ti]]
        p_in = o + seg_t0[ti, None] * d
        p_out = o + seg_t1[ti, None] * d
        entry_bary[ti] = barycentric_many(inv[tets], v0, p_in)
        exit_bary[ti] = barycentric_many(inv[tets], v0, p_out)

    return SegmentsBatch(
        offsets=offsets,
        t_enter=seg_t0,
        t_exit=seg_t1,
        region=seg_reg,
        entry_bary=entry_bary,
        exit_bary=exit_bary,
    )


def _collapse_degenerate_clusters(bvh, origins, dirs, rid, t, f, before, after, bad, eps):
    """Resolve rays whose hit chain is inconsistent at coincident depths.

    A ray exactly through an edge or vertex crosses several face planes at
    one point (e.g. an edge shared by two boundary faces and an interior
    face); no ordering of those hits forms a consistent chain.  Each
    cluster of hits within the merge distance collapses to one transition
    whose near/far regions are decided by brute-force location just before
    and after the cluster.  Contradictions at well-separated depths are a
    real self-intersection and are left for the caller to raise on.

    Only rays flagged `bad` are touched; shells are outside the brute-force
    vocabulary, so degenerate crossings exactly on shell edges may still
    surface as InconsistentTraversal.
    """
    affected = np.unique(rid[:-1][bad])
    keep = np.ones(len(rid), dtype=bool)
    before = before.copy()
    after = after.copy()
    probe = max(eps * 8.0, 1e-12)
    for r in affected:
        idx = np.flatnonzero(rid == r)
        ts = t[idx]
        cluster_id = np.concatenate([[0], np.cumsum(np.diff(ts) > eps)])
        for c in range(cluster_id[-1] + 1):
            members = idx[cluster_id == c]
            if len(members) < 2:
                continue
            keep[members[:-1]] = False
            agree = (before[members] == before[members[0]]).all() and (
                after[members] == after[members[0]]
            ).all()
            if agree:
                # the same transition reported by every face sharing the
                # crossed edge: collapse to one hit
                continue
            t_lo, t_hi = t[members[0]], t[members[-1]]
            p_pair = np.stack(
                [
                    origins[r] + (t_lo - probe) * dirs[r],
                    origins[r] + (t_hi + probe) * dirs[r],
                ]
            )
            regions = locate_points_bruteforce(bvh.cage, p_pair, bvh.state)
            before[members[-1]] = regions[0]
            after[members[-1]] = regions[1]
    return rid[keep], t[keep], f[keep], before[keep], after[keep]


def segment_ray(bvh: Bvh, origin, direction, t_min: float, t_max: float) -> RaySegments:
    """Single-ray interval decomposition (see segment_rays)."""
    batch = segment_rays(
        bvh,
        np.asarray(origin, dtype=np.float64)[None, :],
        np.asarray(direction, dtype=np.float64)[None, :],
        t_min,
        t_max,
    )
    return batch.ray(0)
