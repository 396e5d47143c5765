"""Shared cage constructions for tests: unit tets, cube splits, Kuhn grids,
and smooth non-rigid warps."""

import numpy as np

from cagevox import DeformedState, TetCage
from cagevox.geometry import signed_volumes

UNIT_TET_VERTS = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)

# Kuhn subdivision: six tets along monotone paths from corner 0 to corner 7
# of a cell; face diagonals agree between neighbouring cells.
_KUHN_PATHS = [
    (0, 1, 3, 7),
    (0, 1, 5, 7),
    (0, 2, 3, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 6, 7),
]


def _fix_winding(vertices, tets):
    tets = np.asarray(tets, dtype=np.int64).copy()
    vols = signed_volumes(vertices, tets)
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    assert (signed_volumes(vertices, tets) > 0).all()
    return tets


def unit_tet_cage() -> TetCage:
    return TetCage.from_arrays(UNIT_TET_VERTS, [[0, 1, 2, 3]])


def two_tet_cage() -> TetCage:
    """Two tets sharing the interior face (1, 2, 3)."""
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=np.float64
    )
    tets = _fix_winding(verts, [[0, 1, 2, 3], [4, 1, 2, 3]])
    return TetCage.from_arrays(verts, tets)


def five_tet_cube() -> TetCage:
    """Unit cube split into five tets (one central, four corners)."""
    verts = np.array(
        [
            [0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
            [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1],
        ],
        dtype=np.float64,
    )
    tets = _fix_winding(
        verts, [[1, 2, 4, 7], [0, 1, 2, 4], [1, 3, 2, 7], [1, 5, 4, 7], [2, 4, 6, 7]]
    )
    return TetCage.from_arrays(verts, tets)


def kuhn_grid_cage(n: int, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)) -> TetCage:
    """n x n x n cell grid, six tets per cell (6 n^3 tets total)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    axes = [np.linspace(lo[k], hi[k], n + 1) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                corner = [
                    vid(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1)) for c in range(8)
                ]
                # map cell-corner code (xyz bits) to the Kuhn path ids
                code = {0: corner[0], 1: corner[4], 2: corner[2], 3: corner[6],
                        4: corner[1], 5: corner[5], 6: corner[3], 7: corner[7]}
                for path in _KUHN_PATHS:
                    tets.append([code[p] for p in path])
    tets = _fix_winding(verts, tets)
    return TetCage.from_arrays(verts, tets)


def cage_2000() -> TetCage:
    """Exactly 2000 tets: a 7^3 Kuhn grid with the last 58 cells' tets dropped."""
    full = kuhn_grid_cage(7)
    return TetCage.from_arrays(full.rest_vertices, full.tets[:2000])


def twist_state(cage: TetCage, rate: float = 0.3, bend: float = 0.1) -> DeformedState:
    """Smooth non-rigid warp: twist about z plus a lateral bend.

    Small enough rates keep all tet volumes positive (asserted).
    """
    v = cage.rest_vertices
    theta = rate * v[:, 2]
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty_like(v)
    out[:, 0] = c * v[:, 0] - s * v[:, 1] + bend * v[:, 2] ** 2
    out[:, 1] = s * v[:, 0] + c * v[:, 1]
    out[:, 2] = v[:, 2]
    assert (signed_volumes(out, cage.tets) > 0).all(), "warp inverted a tet"
    return DeformedState.for_cage(cage, out)


def rigid_state(cage: TetCage, rotation, translation=(0.0, 0.0, 0.0)) -> DeformedState:
    r = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    return DeformedState.for_cage(cage, cage.rest_vertices @ r.T + t)


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_axis(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def box_shell(lo, hi):
    """Closed triangulated box surface (12 faces) for region shells."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array(
        [
            [lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
            [lo[0], hi[1], lo[2]], [hi[0], hi[1], lo[2]],
            [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
            [lo[0], hi[1], hi[2]], [hi[0], hi[1], hi[2]],
        ]
    )
    quads = [
        (0, 2, 3, 1), (4, 5, 7, 6),  # z- and z+
        (0, 1, 5, 4), (2, 6, 7, 3),  # y- and y+
        (0, 4, 6, 2), (1, 3, 7, 5),  # x- and x+
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    return corners, np.array(faces, dtype=np.int64)
