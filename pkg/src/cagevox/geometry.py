"""Tetrahedral cage geometry.

Holds the cage representation (rest vertices, tets, derived face table with
front/back incidence), barycentric coordinate math, brute-force point
location used as the oracle for the accelerated lookup, and the text file
formats for cages and per-frame deformed vertex sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateTet,
    FormatError,
    InconsistentOrientation,
    NonManifold,
)

# Face k is opposite vertex k, wound so the normal points OUT of a
# positively oriented tet.  The owning tet is therefore behind each of its
# own faces ("back"), and a neighbour sharing the face sits in front.
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)

# Containment slack on barycentric coordinates: points exactly on a face
# must be claimed by some tet.
EPS_BARY = 1e-9

OUTSIDE = -1


def signed_volume(tet_vertices) -> float:
    """One sixth of the scalar triple product of edge vectors from vertex 0."""
    v = np.asarray(tet_vertices, dtype=np.float64)
    e = v[1:] - v[0]
    return float(np.dot(e[0], np.cross(e[1], e[2])) / 6.0)


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes of all tets, vectorized."""
    p = vertices[tets]  # (nt, 4, 3)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    e3 = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


def _edge_matrix_inverses(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Inverse of the 3x3 edge matrix [v1-v0 | v2-v0 | v3-v0] per tet.

    Explicit adjugate/determinant form: fixed size, branch-free, and cheap
    to evaluate for every tet at once.  Degenerate tets yield inf/nan rows;
    callers validate volumes before trusting the result.
    """
    p = vertices[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    # adjugate rows are cross products of column pairs
    r0 = np.cross(b, c)
    r1 = np.cross(c, a)
    r2 = np.cross(a, b)
    det = np.einsum("ij,ij->i", a, r0)
    inv = np.stack([r0, r1, r2], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv /= det[:, None, None]
    return inv


def barycentric_coords(tet_vertices, p) -> np.ndarray:
    """Barycentric coordinates of p with respect to a single tet.

    Works for exterior points (coordinates outside [0, 1]).  Raises
    DegenerateTet when the tet volume vanishes relative to its own size.
    """
    v = np.asarray(tet_vertices, dtype=np.float64)
    vol = signed_volume(v)
    diam = float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
    if abs(vol) <= 1e-12 * diam**3:
        raise DegenerateTet(f"tet volume {vol:g} below degeneracy threshold")
    m = np.linalg.inv((v[1:] - v[0]).T)
    lam = m @ (np.asarray(p, dtype=np.float64) - v[0])
    return np.concatenate([[1.0 - lam.sum()], lam])


def reconstruct(lam, tet_vertices) -> np.ndarray:
    """Affine combination of the tet vertices with weights lam."""
    return np.asarray(lam, dtype=np.float64) @ np.asarray(tet_vertices, dtype=np.float64)


def barycentric_many(inverses: np.ndarray, origins: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coords of points[i] in the tet with precomputed inverse i.

    inverses: (n, 3, 3) from _edge_matrix_inverses, gathered per point;
    origins: (n, 3) matching vertex-0 positions; points: (n, 3).
    Returns (n, 4).
    """
    rel = points - origins
    lam123 = np.einsum("nij,nj->ni", inverses, rel)
    lam0 = 1.0 - lam123.sum(axis=1)
    return np.concatenate([lam0[:, None], lam123], axis=1)


@dataclass(frozen=True)
class FaceTable:
    """Oriented triangle faces of a cage with tet incidence.

    The stored winding normal points from back_tet toward front_tet;
    boundary faces have front_tet == OUTSIDE and the normal points out of
    the mesh.
    """

    vertex_ids: np.ndarray  # (F, 3) int64 indices into the cage vertex array
    front_tet: np.ndarray  # (F,) int64, OUTSIDE on boundaries
    back_tet: np.ndarray  # (F,) int64

    def __len__(self) -> int:
        return len(self.vertex_ids)

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.front_tet == OUTSIDE


def derive_faces(vertices: np.ndarray, tets: np.ndarray) -> FaceTable:
    """Build the face table from consistently oriented tets.

    Each interior face appears once with both incident tets recorded;
    winding is taken from the first (back) tet's outward face so the normal
    points from back_tet toward front_tet.
    """
    vols = signed_volumes(vertices, tets)
    bad = np.flatnonzero(vols <= 0)
    if bad.size:
        raise InconsistentOrientation(
            f"{bad.size} tet(s) with non-positive rest volume, first at index {bad[0]}"
        )

    nt = len(tets)
    corners = tets[:, TET_FACES]  # (nt, 4, 3) winding order per local face
    tri = corners.reshape(-1, 3)
    owner = np.repeat(np.arange(nt, dtype=np.int64), 4)
    key = np.sort(tri, axis=1)

    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    key_s, tri_s, owner_s = key[order], tri[order], owner[order]
    new_group = np.ones(len(key_s), dtype=bool)
    new_group[1:] = np.any(key_s[1:] != key_s[:-1], axis=1)
    group_id = np.cumsum(new_group) - 1
    counts = np.bincount(group_id)
    if counts.max(initial=0) > 2:
        g = int(np.argmax(counts > 2))
        verts = key_s[np.searchsorted(group_id, g)]
        raise NonManifold(f"face {tuple(verts)} incident to {counts[g]} tets")

    first = np.flatnonzero(new_group)
    vertex_ids = tri_s[first]
    back = owner_s[first]
    front = np.full(len(first), OUTSIDE, dtype=np.int64)
    shared = np.flatnonzero(counts == 2)
    # second occurrence of a shared face directly follows the first
    front[shared] = owner_s[first[shared] + 1]
    return FaceTable(vertex_ids=vertex_ids, front_tet=front, back_tet=back)


@dataclass(frozen=True)
class TetCage:
    """Immutable rest-state tetrahedral cage with derived tables."""

    rest_vertices: np.ndarray  # (nv, 3) float64
    tets: np.ndarray  # (nt, 4) int64
    faces: FaceTable
    bounds: np.ndarray  # (2, 3) min/max of rest vertices
    rest_inverses: np.ndarray = field(repr=False)  # (nt, 3, 3)

    @classmethod
    def from_arrays(cls, vertices, tets) -> "TetCage":
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        tets = np.ascontiguousarray(tets, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise FormatError("vertices must be (nv, 3)")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise FormatError("tets must be (nt, 4)")
        if not np.isfinite(vertices).all():
            raise FormatError("non-finite vertex coordinates")
        if tets.size and (tets.min() < 0 or tets.max() >= len(vertices)):
            raise FormatError("tet vertex index out of range")

        bounds = np.stack([vertices.min(axis=0), vertices.max(axis=0)])
        diam = float(np.linalg.norm(bounds[1] - bounds[0]))
        vols = signed_volumes(vertices, tets)
        neg = np.flatnonzero(vols < 0)
        if neg.size:
            raise InconsistentOrientation(
                f"{neg.size} tet(s) with negative rest volume (first index {neg[0]}); "
                "fix the asset winding instead of silently reorienting"
            )
        tiny = np.flatnonzero(vols <= 1e-12 * diam**3)
        if tiny.size:
            raise DegenerateTet(f"{tiny.size} degenerate tet(s), first at index {tiny[0]}")

        faces = derive_faces(vertices, tets)
        inv = _edge_matrix_inverses(vertices, tets)
        return cls(
            rest_vertices=vertices,
            tets=tets,
            faces=faces,
            bounds=bounds,
            rest_inverses=inv,
        )

    @property
    def num_vertices(self) -> int:
        return len(self.rest_vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def rest_state(self) -> "DeformedState":
        """DeformedState equal to the rest pose (identity deformation)."""
        return DeformedState.for_cage(self, self.rest_vertices)


@dataclass(frozen=True)
class DeformedState:
    """Per-frame deformed cage vertices plus derived tet inverses.

    Replaced wholesale each frame; immutable afterwards.  region_states
    holds per-frame data of non-tet regions (see deform module).
    """

    vertices: np.ndarray  # (nv, 3)
    tet_inverses: np.ndarray = field(repr=False)  # (nt, 3, 3)
    region_states: tuple = ()

    @classmethod
    def for_cage(cls, cage: TetCage, vertices, region_states: tuple = ()) -> "DeformedState":
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        if vertices.shape != cage.rest_vertices.shape:
            raise FormatError(
                f"deformed vertex array {vertices.shape} does not match cage "
                f"{cage.rest_vertices.shape}"
            )
        if not np.isfinite(vertices).all():
            raise FormatError("non-finite deformed vertex coordinates")
        inv = _edge_matrix_inverses(vertices, cage.tets)
        return cls(vertices=vertices, tet_inverses=inv, region_states=tuple(region_states))


def _state_arrays(cage: TetCage, state: DeformedState | None):
    if state is None:
        return cage.rest_vertices, cage.rest_inverses
    return state.vertices, state.tet_inverses


def locate_points_bruteforce(
    cage: TetCage,
    points: np.ndarray,
    state: DeformedState | None = None,
    eps_b: float = EPS_BARY,
    chunk: int = 2048,
) -> np.ndarray:
    """Containing tet per point by testing every tet; OUTSIDE if none.

    Every tet is screened per point through its (slack-inflated) bounding
    box, a conservative superset of barycentric containment, and the exact
    test runs on the survivors.  Ties on shared faces resolve to the lowest
    tet index.  This is the reference oracle for the accelerated lookup.
    """
    vertices, inverses = _state_arrays(cage, state)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    corners = vertices[cage.tets]  # (nt, 4, 3)
    v0 = corners[:, 0]
    # inflate per-tet boxes so the [-eps_b, 1+eps_b] slack stays inside them
    box_lo = corners.min(axis=1)
    box_hi = corners.max(axis=1)
    slack = eps_b * np.linalg.norm(box_hi - box_lo, axis=1, keepdims=True)
    box_lo = box_lo - slack
    box_hi = box_hi + slack

    out = np.full(len(points), OUTSIDE, dtype=np.int64)
    for lo in range(0, len(points), chunk):
        p = points[lo : lo + chunk]
        inbox = (
            (p[:, None, 0] >= box_lo[None, :, 0]) & (p[:, None, 0] <= box_hi[None, :, 0])
            & (p[:, None, 1] >= box_lo[None, :, 1]) & (p[:, None, 1] <= box_hi[None, :, 1])
            & (p[:, None, 2] >= box_lo[None, :, 2]) & (p[:, None, 2] <= box_hi[None, :, 2])
        )
        cand_pt, cand_tet = np.nonzero(inbox)
        if not cand_pt.size:
            continue
        lam = barycentric_many(inverses[cand_tet], v0[cand_tet], p[cand_pt])
        ok = ((lam >= -eps_b) & (lam <= 1.0 + eps_b)).all(axis=1)
        # candidates are row-major: tets ascend within each point, so the
        # first hit per point is the lowest tet index
        pts_ok = cand_pt[ok]
        firsts = np.unique(pts_ok, return_index=True)[1]
        out[lo + pts_ok[firsts]] = cand_tet[ok][firsts]
    return out


def locate_point_bruteforce(
    cage: TetCage, p, state: DeformedState | None = None, eps_b: float = EPS_BARY
):
    """Single-point variant of locate_points_bruteforce; None when outside."""
    r = int(locate_points_bruteforce(cage, np.asarray(p)[None, :], state, eps_b)[0])
    return None if r == OUTSIDE else r


# ---------------------------------------------------------------------------
# file formats


def save_cage(path, cage: TetCage) -> None:
    """Write `tetcage v1` text format."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"tetcage v1 {cage.num_vertices} {cage.num_tets}\n")
        for v in cage.rest_vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in cage.tets:
            f.write(f"t {t[0]} {t[1]} {t[2]} {t[3]}\n")


def load_cage(path) -> TetCage:
    """Read `tetcage v1` text format."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "tetcage" or header[1] != "v1":
            raise FormatError(f"{path}: bad tetcage header")
        nv, nt = int(header[2]), int(header[3])
        verts = np.empty((nv, 3), dtype=np.float64)
        tets = np.empty((nt, 4), dtype=np.int64)
        for i in range(nv):
            parts = f.readline().split()
            if len(parts) != 4 or parts[0] != "v":
                raise FormatError(f"{path}: bad vertex line {i}")
            verts[i] = [float(x) for x in parts[1:]]
        for i in range(nt):
            parts = f.readline().split()
            if len(parts) != 5 or parts[0] != "t":
                raise FormatError(f"{path}: bad tet line {i}")
            tets[i] = [int(x) for x in parts[1:]]
    return TetCage.from_arrays(verts, tets)


def save_frame(path, vertices: np.ndarray) -> None:
    """Write `tetframe v1` deformed vertex set."""
    vertices = np.asarray(vertices, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"tetframe v1 {len(vertices)}\n")
        for v in vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")


def load_frame(path) -> np.ndarray:
    """Read `tetframe v1`; vertex order matches the cage."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "tetframe" or header[1] != "v1":
            raise FormatError(f"{path}: bad tetframe header")
        nv = int(header[2])
        verts = np.empty((nv, 3), dtype=np.float64)
        for i in range(nv):
            parts = f.readline().split()
            if len(parts) != 4 or parts[0] != "v":
                raise FormatError(f"{path}: bad vertex line {i}")
            verts[i] = [float(x) for x in parts[1:]]
    return verts
