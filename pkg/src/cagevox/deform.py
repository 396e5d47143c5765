"""Mapping deformed-space samples and view directions to canonical space.

Tet samples transfer through barycentric coordinates with matched vertex
correspondence; non-simplex regions (rigid shells, plane-split shells) map
through affine transforms.  View directions rotate per tetrahedron with a
stochastic rotation field: rotations are estimated by orthogonal Procrustes
for a seeded fraction of tets and propagated to the rest by nearest
rest-centroid assignment.

Convention: the stored per-tet rotation R maps the rest frame to the
deformed frame.  The canonical field is queried with R^T v for a
deformed-space view direction v, so a rigidly rotated scene reflects light
as if seen by the counter-rotated camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import affine
from .errors import DegenerateTet, FormatError, NotATetSegment, UnknownRegion
from .geometry import (
    OUTSIDE,
    DeformedState,
    TetCage,
    barycentric_many,
    signed_volume,
)
from .lookup import RaySegments, SegmentsBatch

# per-sample classification codes
KIND_TET = 0
KIND_RIGID = 1
KIND_GAP = 2
KIND_OUTSIDE = 3


# ---------------------------------------------------------------------------
# non-simplex regions


def ensure_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Return faces wound so normals point out of the closed shell."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    vol6 = np.einsum("ij,ij->i", a, np.cross(b, c)).sum()
    if vol6 < 0:
        f = f[:, ::-1].copy()
    return f


def check_closed(faces: np.ndarray) -> None:
    """Every edge of a closed shell is shared by exactly two faces."""
    f = np.asarray(faces, dtype=np.int64)
    edges = np.sort(
        np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1
    )
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if not np.all(counts == 2):
        raise FormatError("shell is not closed (edge shared by != 2 faces)")


@dataclass(frozen=True)
class RigidRegion:
    """Closed shell whose interior moves as a single affine unit."""

    name: str
    shell_vertices: np.ndarray  # (m, 3) canonical space
    shell_faces: np.ndarray  # (k, 3) outward winding

    @classmethod
    def create(cls, name, vertices, faces) -> "RigidRegion":
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = ensure_outward(vertices, faces)
        check_closed(faces)
        return cls(name=name, shell_vertices=vertices, shell_faces=faces)

    def posed(self, canon_to_deformed: np.ndarray) -> "RegionState":
        """Per-frame state for the shell moved by a canonical->deformed affine."""
        c2d = np.asarray(canon_to_deformed, dtype=np.float64)
        d2c = affine.invert(c2d)
        return RegionState(
            kind="rigid",
            gap_color=None,
            shell_vertices=affine.apply(c2d, self.shell_vertices),
            shell_faces=self.shell_faces,
            transform=d2c,
            rotation=affine.polar_rotation(d2c[:, :3]),
        )


@dataclass(frozen=True)
class PlaneSplitRegion:
    """Closed shell split by two planes into two rigid parts and a gap.

    Planes are given in canonical space as (point, normal) with both
    normals pointing from the bottom part toward the top part; per frame
    the top plane moves with the top transform and the bottom plane with
    the bottom transform.  Samples between the planes are not rendered
    (the gap), except for the colour override applied by the renderer.
    """

    name: str
    shell_vertices: np.ndarray
    shell_faces: np.ndarray
    plane_top: np.ndarray  # (2, 3): point, unit normal
    plane_bottom: np.ndarray
    gap_color: np.ndarray  # (3,) in [0, 1]

    @classmethod
    def create(cls, name, vertices, faces, plane_top, plane_bottom, gap_color) -> "PlaneSplitRegion":
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = ensure_outward(vertices, faces)
        check_closed(faces)
        pt = _normalize_plane(plane_top)
        pb = _normalize_plane(plane_bottom)
        if np.dot(pt[1], pb[1]) <= 0:
            raise FormatError(
                f"region {name!r}: both plane normals must point from the bottom "
                "part toward the top part"
            )
        if np.dot(pb[0] - pt[0], pt[1]) >= 0:
            raise FormatError(
                f"region {name!r}: plane_top must lie strictly above plane_bottom "
                "along its normal"
            )
        return cls(
            name=name,
            shell_vertices=vertices,
            shell_faces=faces,
            plane_top=pt,
            plane_bottom=pb,
            gap_color=np.clip(np.asarray(gap_color, dtype=np.float64), 0.0, 1.0),
        )

    def posed(
        self,
        canon_to_deformed_top: np.ndarray,
        canon_to_deformed_bottom: np.ndarray,
        canon_to_deformed_shell: np.ndarray | None = None,
    ) -> "RegionState":
        c2d_top = np.asarray(canon_to_deformed_top, dtype=np.float64)
        c2d_bot = np.asarray(canon_to_deformed_bottom, dtype=np.float64)
        shell_t = c2d_top if canon_to_deformed_shell is None else canon_to_deformed_shell
        d2c_top = affine.invert(c2d_top)
        d2c_bot = affine.invert(c2d_bot)
        return RegionState(
            kind="plane_split",
            gap_color=self.gap_color,
            shell_vertices=affine.apply(shell_t, self.shell_vertices),
            shell_faces=self.shell_faces,
            transform=d2c_top,
            transform_bottom=d2c_bot,
            plane_top=_transform_plane(c2d_top, self.plane_top),
            plane_bottom=_transform_plane(c2d_bot, self.plane_bottom),
            rotation=affine.polar_rotation(d2c_top[:, :3]),
            rotation_bottom=affine.polar_rotation(d2c_bot[:, :3]),
        )


def _normalize_plane(plane) -> np.ndarray:
    p = np.asarray(plane, dtype=np.float64).reshape(2, 3).copy()
    n = np.linalg.norm(p[1])
    if n == 0:
        raise FormatError("plane normal must be non-zero")
    p[1] /= n
    return p


def _transform_plane(c2d: np.ndarray, plane: np.ndarray) -> np.ndarray:
    point = affine.apply(c2d, plane[0])
    normal = c2d[:, :3] @ plane[1]
    normal = normal / np.linalg.norm(normal)
    return np.stack([point, normal])


@dataclass(frozen=True)
class RegionState:
    """Per-frame data of one non-simplex region (stored on DeformedState).

    transform maps deformed -> canonical (the top transform for plane-split
    regions); rotation is the proper-rotation part used for view mapping.
    """

    kind: str  # 'rigid' | 'plane_split'
    shell_vertices: np.ndarray  # deformed space, feeds the lookup BVH
    shell_faces: np.ndarray
    transform: np.ndarray  # (3, 4) deformed -> canonical
    rotation: np.ndarray  # (3, 3) deformed -> canonical proper rotation
    gap_color: np.ndarray | None = None
    transform_bottom: np.ndarray | None = None
    plane_top: np.ndarray | None = None  # deformed space (point, unit normal)
    plane_bottom: np.ndarray | None = None
    rotation_bottom: np.ndarray | None = None


# ---------------------------------------------------------------------------
# point mapping


def map_points(
    cage: TetCage,
    state: DeformedState,
    region_codes: np.ndarray,
    points: np.ndarray,
    want_sub: bool = False,
):
    """Map deformed-space points to canonical space.

    region_codes come from the lookup module.  Returns (canonical points,
    kind codes); gap and outside samples keep their input position and are
    flagged via the kind code.  With want_sub, a third array flags samples
    mapped by the bottom transform of a plane-split region.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    codes = np.atleast_1d(np.asarray(region_codes, dtype=np.int64))
    n = len(points)
    out = points.copy()
    kind = np.full(n, KIND_OUTSIDE, dtype=np.int64)
    sub_bottom = np.zeros(n, dtype=bool)

    nt = cage.num_tets
    bad = codes >= nt + len(state.region_states)
    if bad.any():
        raise UnknownRegion(f"region code {int(codes[bad][0])} out of range")

    tet_mask = (codes >= 0) & (codes < nt)
    if tet_mask.any():
        idx = np.flatnonzero(tet_mask)
        tets = codes[idx]
        v0 = state.vertices[cage.tets[tets, 0]]
        lam = barycentric_many(state.tet_inverses[tets], v0, points[idx])
        rest = cage.rest_vertices[cage.tets[tets]]  # (k, 4, 3)
        out[idx] = np.einsum("ki,kij->kj", lam, rest)
        kind[idx] = KIND_TET

    for j, reg in enumerate(state.region_states):
        mask = codes == nt + j
        if not mask.any():
            continue
        idx = np.flatnonzero(mask)
        p = points[idx]
        if reg.kind == "rigid":
            out[idx] = affine.apply(reg.transform, p)
            kind[idx] = KIND_RIGID
        else:
            s_top = (p - reg.plane_top[0]) @ reg.plane_top[1]
            s_bot = (p - reg.plane_bottom[0]) @ reg.plane_bottom[1]
            top = s_top >= 0
            bottom = ~top & (s_bot <= 0)
            gap = ~top & ~bottom
            out[idx[top]] = affine.apply(reg.transform, p[top])
            out[idx[bottom]] = affine.apply(reg.transform_bottom, p[bottom])
            kind[idx[top]] = KIND_RIGID
            kind[idx[bottom]] = KIND_RIGID
            kind[idx[gap]] = KIND_GAP
            sub_bottom[idx[bottom]] = True
    if want_sub:
        return out, kind, sub_bottom
    return out, kind


def map_point(cage: TetCage, state: DeformedState, region_id, p):
    """Single-point mapping; returns (canonical point, kind code)."""
    code = OUTSIDE if region_id is None else int(region_id)
    pts, kind = map_points(cage, state, np.array([code]), np.asarray(p)[None, :])
    return pts[0], int(kind[0])


def segment_canonical_endpoints(cage: TetCage, segments: SegmentsBatch | RaySegments):
    """Canonical-space positions of tet segment endpoints.

    Applies the rest-tet vertex correspondence to the stored deformed-state
    barycentric coordinates; NaN rows for non-tet segments.
    """
    reg = segments.region
    entry = np.full((len(reg), 3), np.nan)
    exit_ = np.full((len(reg), 3), np.nan)
    is_tet = (reg >= 0) & (reg < cage.num_tets)
    if is_tet.any():
        idx = np.flatnonzero(is_tet)
        rest = cage.rest_vertices[cage.tets[reg[idx]]]
        entry[idx] = np.einsum("ki,kij->kj", segments.entry_bary[idx], rest)
        exit_[idx] = np.einsum("ki,kij->kj", segments.exit_bary[idx], rest)
    return entry, exit_


def map_sample_on_segment(cage: TetCage, segments: RaySegments, index: int, alpha: float):
    """Canonical point at normalised position alpha within a tet segment.

    alpha = 1 is the segment entry, alpha = 0 the exit: the canonical point
    interpolates the canonical images of the two intersections.
    """
    reg = int(segments.region[index])
    if not (0 <= reg < cage.num_tets):
        raise NotATetSegment(f"segment {index} has region {reg}")
    rest = cage.rest_vertices[cage.tets[reg]]
    p_in = segments.entry_bary[index] @ rest
    p_out = segments.exit_bary[index] @ rest
    return alpha * p_in + (1.0 - alpha) * p_out


# ---------------------------------------------------------------------------
# rotation field


def estimate_rotation(rest_tet, deformed_tet) -> np.ndarray:
    """Proper rotation aligning a rest tet to its deformed pose.

    Orthogonal Procrustes on centred vertices: SVD of the 3x3 covariance,
    with the reflection case corrected by negating the singular vector of
    the smallest singular value.
    """
    x = np.asarray(rest_tet, dtype=np.float64)
    y = np.asarray(deformed_tet, dtype=np.float64)
    for v in (x, y):
        diam = float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
        if abs(signed_volume(v)) <= 1e-12 * diam**3:
            raise DegenerateTet("cannot estimate rotation of a degenerate tet")
    h = (x - x.mean(axis=0)).T @ (y - y.mean(axis=0))
    u, _, vh = np.linalg.svd(h)
    r = vh.T @ u.T  # rest -> deformed
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = vh.T @ u.T
    return r


def _estimate_rotations_batch(rest: np.ndarray, deformed: np.ndarray) -> np.ndarray:
    """Vectorised Procrustes for stacked tets: (k, 4, 3) -> (k, 3, 3)."""
    xc = rest - rest.mean(axis=1, keepdims=True)
    yc = deformed - deformed.mean(axis=1, keepdims=True)
    h = np.einsum("kni,knj->kij", xc, yc)
    u, _, vh = np.linalg.svd(h)
    r = np.einsum("kji,klj->kil", vh, u)  # V @ U^T per item
    neg = np.linalg.det(r) < 0
    if neg.any():
        u = u.copy()
        u[neg, :, -1] = -u[neg, :, -1]
        r[neg] = np.einsum("kji,klj->kil", vh[neg], u[neg])
    return r


@dataclass(frozen=True)
class RotationField:
    """Per-tet view rotations (rest -> deformed frame)."""

    rotations: np.ndarray  # (nt, 3, 3)
    subset_fraction: float
    seed: int
    computed: np.ndarray  # (k,) tet indices that got their own SVD


class RotationFieldBuilder:
    """Builds per-frame rotation fields for one cage.

    The seeded subset and the nearest-centroid assignment of the remaining
    tets depend only on (cage, rho, seed), so they are computed once and
    reused every frame; only the SVDs rerun per frame.
    """

    def __init__(self, cage: TetCage, subset_fraction: float = 0.05, seed: int = 0):
        if not (0.0 < subset_fraction <= 1.0):
            raise ValueError("subset_fraction must be in (0, 1]")
        self.cage = cage
        self.subset_fraction = float(subset_fraction)
        self.seed = int(seed)

        nt = cage.num_tets
        k = int(np.ceil(subset_fraction * nt))
        gen = np.random.Generator(np.random.PCG64(seed))
        self.selected = np.sort(gen.choice(nt, size=k, replace=False))
        centroids = cage.rest_vertices[cage.tets].mean(axis=1)
        self.assignment = self._nearest(centroids, centroids[self.selected])

    @staticmethod
    def _nearest(queries: np.ndarray, anchors: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """Index of the nearest anchor per query; ties to the lowest index."""
        out = np.empty(len(queries), dtype=np.int64)
        for lo in range(0, len(queries), chunk):
            q = queries[lo : lo + chunk]
            d2 = np.sum((q[:, None, :] - anchors[None, :, :]) ** 2, axis=2)
            out[lo : lo + chunk] = np.argmin(d2, axis=1)
        return out

    def build(self, state: DeformedState) -> RotationField:
        cage = self.cage
        sel = self.selected
        rest = cage.rest_vertices[cage.tets[sel]]
        deformed = state.vertices[cage.tets[sel]]
        r_sel = _estimate_rotations_batch(rest, deformed)
        rotations = r_sel[self.assignment]
        return RotationField(
            rotations=np.ascontiguousarray(rotations),
            subset_fraction=self.subset_fraction,
            seed=self.seed,
            computed=sel,
        )


def build_rotation_field(
    cage: TetCage, state: DeformedState, subset_fraction: float = 0.05, seed: int = 0
) -> RotationField:
    """One-shot rotation field build (see RotationFieldBuilder for reuse)."""
    return RotationFieldBuilder(cage, subset_fraction, seed).build(state)


def canonical_view_dirs(
    field: RotationField,
    state: DeformedState,
    num_tets: int,
    region_codes: np.ndarray,
    kinds: np.ndarray,
    views: np.ndarray,
    sub_bottom: np.ndarray | None = None,
) -> np.ndarray:
    """Canonical-space query directions for deformed-space view directions.

    Tet samples use the stored rotation transposed; rigid and plane-split
    samples use the polar rotation of their region transform (the bottom
    transform where sub_bottom flags it).  Gap and outside samples keep the
    top-region rotation and the input direction respectively.
    """
    views = np.atleast_2d(views)
    codes = np.atleast_1d(region_codes)
    out = views.copy()
    tet_mask = kinds == KIND_TET
    if tet_mask.any():
        idx = np.flatnonzero(tet_mask)
        r = field.rotations[codes[idx]]
        out[idx] = np.einsum("nji,nj->ni", r, views[idx])  # R^T v
    for j, reg in enumerate(state.region_states):
        mask = (codes == num_tets + j) & (kinds != KIND_OUTSIDE)
        if not mask.any():
            continue
        idx = np.flatnonzero(mask)
        rot = np.broadcast_to(reg.rotation, (len(idx), 3, 3))
        if reg.kind == "plane_split" and sub_bottom is not None:
            rot = np.where(
                sub_bottom[idx, None, None], reg.rotation_bottom[None], reg.rotation[None]
            )
        out[idx] = np.einsum("nij,nj->ni", rot, views[idx])
    return out


def rotate_view(field: RotationField, region_id, v, region_states: tuple = (), num_tets=None):
    """Canonical query direction for one deformed-space view direction."""
    v = np.asarray(v, dtype=np.float64)
    nt = len(field.rotations) if num_tets is None else num_tets
    if region_id is None:
        raise UnknownRegion("cannot rotate a view for the outside region")
    code = int(region_id)
    if 0 <= code < nt:
        return field.rotations[code].T @ v
    j = code - nt
    if 0 <= j < len(region_states):
        return region_states[j].rotation @ v
    raise UnknownRegion(f"region code {code} out of range")
