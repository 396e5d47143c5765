"""Cage animation: linear volumetric blendshapes and linear blend skinning.

pose() applies blendshape deltas to the base vertices first and skins the
result with per-vertex bone weights: v' = sum_b w_vb * T_b (base_v +
sum_k beta_k * delta_k[v]).  transfer_weights copies skinning weights from
the nearest vertex of a driving surface mesh onto the cage vertices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptySurface, FormatError


@dataclass(frozen=True)
class DeformRig:
    """Blendshape deltas and skinning weights over a cage's vertices."""

    base: np.ndarray  # (nv, 3) rest vertices
    blendshapes: np.ndarray  # (K, nv, 3) per-vertex deltas
    skin_weights: np.ndarray  # (nv, B), rows sum to 1

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64)
        shapes = np.asarray(self.blendshapes, dtype=np.float64)
        weights = np.asarray(self.skin_weights, dtype=np.float64)
        if shapes.ndim != 3 or shapes.shape[1:] != base.shape:
            raise DimensionMismatch(
                f"blendshapes {shapes.shape} do not match base {base.shape}"
            )
        if weights.ndim != 2 or weights.shape[0] != len(base):
            raise DimensionMismatch("skin weights must be (nv, num_bones)")
        if (weights < 0).any():
            raise FormatError("skin weights must be non-negative")
        if np.abs(weights.sum(axis=1) - 1.0).max() > 1e-9:
            raise FormatError("skin weight rows must sum to 1")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "blendshapes", shapes)
        object.__setattr__(self, "skin_weights", weights)

    @property
    def num_shapes(self) -> int:
        return len(self.blendshapes)

    @property
    def num_bones(self) -> int:
        return self.skin_weights.shape[1]


@dataclass(frozen=True)
class PoseParams:
    """Blend coefficients and rigid bone transforms for one frame."""

    beta: np.ndarray  # (K,)
    bones: np.ndarray  # (B, 3, 4) rigid

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        bones = np.asarray(self.bones, dtype=np.float64).reshape(-1, 3, 4)
        if not np.isfinite(beta).all() or not np.isfinite(bones).all():
            raise FormatError("pose parameters must be finite")
        lin = bones[:, :, :3]
        err = np.abs(np.einsum("bij,bkj->bik", lin, lin) - np.eye(3)).max(initial=0.0)
        if err > 1e-9 or (len(bones) and (np.linalg.det(lin) < 0).any()):
            raise FormatError("bone transforms must be rigid (orthonormal, det +1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "bones", bones)


def pose(rig: DeformRig, params: PoseParams) -> np.ndarray:
    """Deformed cage vertices for the given parameters."""
    if len(params.beta) != rig.num_shapes:
        raise DimensionMismatch(
            f"{len(params.beta)} blend coefficients for {rig.num_shapes} shapes"
        )
    if len(params.bones) != rig.num_bones:
        raise DimensionMismatch(
            f"{len(params.bones)} bone transforms for {rig.num_bones} bones"
        )
    v = rig.base
    if rig.num_shapes:
        v = v + np.einsum("k,kvi->vi", params.beta, rig.blendshapes)
    # per-bone rigid motion of the blended vertices, mixed by skin weights
    moved = np.einsum("bij,vj->bvi", params.bones[:, :, :3], v) + params.bones[:, None, :, 3]
    return np.einsum("vb,bvi->vi", rig.skin_weights, moved)


def transfer_weights(surface_vertices, surface_weights, cage_vertices, chunk: int = 1024):
    """Copy each cage vertex's weights from the nearest surface vertex.

    Euclidean nearest; ties resolve to the lowest surface vertex index.
    """
    sv = np.atleast_2d(np.asarray(surface_vertices, dtype=np.float64))
    sw = np.atleast_2d(np.asarray(surface_weights, dtype=np.float64))
    cv = np.atleast_2d(np.asarray(cage_vertices, dtype=np.float64))
    if len(sv) == 0:
        raise EmptySurface("cannot transfer weights from an empty surface")
    if len(sw) != len(sv):
        raise DimensionMismatch("surface weights must match surface vertices")
    nearest = np.empty(len(cv), dtype=np.int64)
    for lo in range(0, len(cv), chunk):
        q = cv[lo : lo + chunk]
        d2 = np.sum((q[:, None, :] - sv[None, :, :]) ** 2, axis=2)
        nearest[lo : lo + chunk] = np.argmin(d2, axis=1)
    return sw[nearest].copy()


# ---------------------------------------------------------------------------
# file formats


def save_rig(path, rig: DeformRig) -> None:
    """Write `defrig v1`: header, weight rows, then one delta block per shape."""
    nv = len(rig.base)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"defrig v1 {nv} {rig.num_shapes} {rig.num_bones}\n")
        for row in rig.skin_weights:
            f.write("w " + " ".join(repr(float(x)) for x in row) + "\n")
        for k in range(rig.num_shapes):
            f.write(f"shape {k}\n")
            for d in rig.blendshapes[k]:
                f.write(f"d {float(d[0])!r} {float(d[1])!r} {float(d[2])!r}\n")


def load_rig(path, base_vertices) -> DeformRig:
    """Read `defrig v1`; the base cage vertices are supplied by the caller."""
    base = np.asarray(base_vertices, dtype=np.float64)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 5 or header[0] != "defrig" or header[1] != "v1":
            raise FormatError(f"{path}: bad defrig header")
        nv, k, b = int(header[2]), int(header[3]), int(header[4])
        if nv != len(base):
            raise DimensionMismatch(
                f"{path}: rig has {nv} vertices, cage has {len(base)}"
            )
        weights = np.empty((nv, b), dtype=np.float64)
        for i in range(nv):
            parts = f.readline().split()
            if len(parts) != b + 1 or parts[0] != "w":
                raise FormatError(f"{path}: bad weight line {i}")
            weights[i] = [float(x) for x in parts[1:]]
        shapes = np.empty((k, nv, 3), dtype=np.float64)
        for s in range(k):
            parts = f.readline().split()
            if len(parts) != 2 or parts[0] != "shape" or int(parts[1]) != s:
                raise FormatError(f"{path}: bad shape header {s}")
            for i in range(nv):
                parts = f.readline().split()
                if len(parts) != 4 or parts[0] != "d":
                    raise FormatError(f"{path}: bad delta line {s}/{i}")
                shapes[s, i] = [float(x) for x in parts[1:]]
    return DeformRig(base=base, blendshapes=shapes, skin_weights=weights)


def load_pose_stream(path, num_shapes: int, num_bones: int):
    """Read the per-frame parameter CSV: frame, beta_1..K, theta (B x 12).

    Returns a list of (frame index, PoseParams) in file order.
    """
    expected = 1 + num_shapes + 12 * num_bones
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row_num, row in enumerate(csv.reader(f)):
            if not row or row[0].lstrip().startswith("#"):
                continue
            vals = [float(x) for x in row]
            if len(vals) != expected:
                raise FormatError(
                    f"{path}: row {row_num} has {len(vals)} fields, expected {expected}"
                )
            frame = int(vals[0])
            beta = np.array(vals[1 : 1 + num_shapes])
            bones = np.array(vals[1 + num_shapes :]).reshape(num_bones, 3, 4)
            out.append((frame, PoseParams(beta=beta, bones=bones)))
    return out


def save_pose_stream(path, rows) -> None:
    """Write (frame, PoseParams) rows as the parameter CSV."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        for frame, p in rows:
            w.writerow(
                [frame]
                + [repr(float(x)) for x in np.atleast_1d(p.beta)]
                + [repr(float(x)) for x in p.bones.ravel()]
            )
