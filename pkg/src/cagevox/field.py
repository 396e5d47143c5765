"""Canonical-space radiance fields.

Two families: analytic primitives with closed-form density/colour (test
oracles and synthetic scenes) and a trainable voxel grid with trilinear
density and low-order spherical-harmonic view-dependent colour.

All fields answer batched queries: positions (n, 3) and unit view
directions (n, 3) map to densities (n,) and colours (n, 3).  Outside a
bounded field the response is vacuum (sigma = 0, colour = 0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import FormatError

# Real spherical harmonics, graphics convention (no Condon-Shortley phase),
# bands l = 0..2.  Constants are sqrt(1/4pi), sqrt(3/4pi), etc.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)


def sh_basis(dirs: np.ndarray, lmax: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions; shape (n, (lmax+1)^2)."""
    dirs = np.atleast_2d(dirs)
    n = len(dirs)
    out = np.empty((n, (lmax + 1) ** 2), dtype=np.float64)
    out[:, 0] = _C0
    if lmax >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1] = _C1 * y
        out[:, 2] = _C1 * z
        out[:, 3] = _C1 * x
    if lmax >= 2:
        out[:, 4] = _C2[0] * x * y
        out[:, 5] = _C2[1] * y * z
        out[:, 6] = _C2[2] * (3.0 * z * z - 1.0)
        out[:, 7] = _C2[3] * x * z
        out[:, 8] = _C2[4] * (x * x - y * y)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# analytic fields


@dataclass(frozen=True)
class ViewLobe:
    """Multiplicative view-dependent response: ambient + specular lobe.

    colour is scaled by ambient + strength * max(0, dot(v, axis))**power and
    clipped to [0, 1].  axis is a fixed direction in the field's own frame.
    """

    axis: tuple = (0.0, 0.0, 1.0)
    ambient: float = 0.7
    strength: float = 0.3
    power: float = 4.0

    def gain(self, view: np.ndarray) -> np.ndarray:
        a = np.asarray(self.axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        c = np.maximum(0.0, view @ a)
        return self.ambient + self.strength * c**self.power


@dataclass(frozen=True)
class ConstantBox:
    """Axis-aligned box of constant density and colour."""

    bounds: np.ndarray  # (2, 3)
    sigma: float
    color: tuple
    lobe: ViewLobe | None = None

    def query_many(self, points: np.ndarray, views: np.ndarray):
        b = np.asarray(self.bounds, dtype=np.float64)
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        inside = (
            (x >= b[0, 0]) & (x <= b[1, 0])
            & (y >= b[0, 1]) & (y <= b[1, 1])
            & (z >= b[0, 2]) & (z <= b[1, 2])
        )
        sig = np.where(inside, self.sigma, 0.0)
        col = np.zeros((len(points), 3))
        base = np.asarray(self.color, dtype=np.float64)
        if self.lobe is None:
            col[inside] = base
        else:
            gain = self.lobe.gain(views[inside])
            col[inside] = np.clip(base[None, :] * gain[:, None], 0.0, 1.0)
        return sig, col


@dataclass(frozen=True)
class ConstantSphere:
    """Ball of constant density and colour."""

    center: tuple
    radius: float
    sigma: float
    color: tuple
    lobe: ViewLobe | None = None

    def query_many(self, points: np.ndarray, views: np.ndarray):
        c = np.asarray(self.center, dtype=np.float64)
        inside = np.sum((points - c) ** 2, axis=1) <= self.radius**2
        sig = np.where(inside, self.sigma, 0.0)
        col = np.zeros((len(points), 3))
        base = np.asarray(self.color, dtype=np.float64)
        if self.lobe is None:
            col[inside] = base
        else:
            gain = self.lobe.gain(views[inside])
            col[inside] = np.clip(base[None, :] * gain[:, None], 0.0, 1.0)
        return sig, col


@dataclass(frozen=True)
class GaussianBlob:
    """Smooth isotropic density bump with constant colour; C-inf everywhere."""

    center: tuple
    radius: float  # gaussian sigma parameter, scene units
    sigma: float  # peak density
    color: tuple

    def query_many(self, points: np.ndarray, views: np.ndarray):
        c = np.asarray(self.center, dtype=np.float64)
        d2 = np.sum((points - c) ** 2, axis=1)
        sig = self.sigma * np.exp(-0.5 * d2 / self.radius**2)
        col = np.broadcast_to(np.asarray(self.color, dtype=np.float64), (len(points), 3)).copy()
        return sig, col


class CompositeField:
    """Sum of primitive densities; colour is the density-weighted mean."""

    def __init__(self, primitives):
        self.primitives = list(primitives)

    def query_many(self, points: np.ndarray, views: np.ndarray):
        points = np.atleast_2d(points)
        views = np.atleast_2d(views)
        sig = np.zeros(len(points))
        acc = np.zeros((len(points), 3))
        for prim in self.primitives:
            s, c = prim.query_many(points, views)
            sig += s
            acc += s[:, None] * c
        col = np.zeros_like(acc)
        nz = sig > 0
        col[nz] = acc[nz] / sig[nz, None]
        return sig, col


class TransformedField:
    """Rigidly moved view of another field.

    Queries at deformed coordinates (p, v) return base(R^T (p - t), R^T v):
    the field as it would appear after rotating/translating the whole scene
    by (R, t).  Used as the analytic oracle for rigid-motion renders.
    """

    def __init__(self, base, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)):
        self.base = base
        self.rotation = np.asarray(rotation, dtype=np.float64)
        self.translation = np.asarray(translation, dtype=np.float64)

    def query_many(self, points: np.ndarray, views: np.ndarray):
        p = (points - self.translation) @ self.rotation  # == R^T p, row convention
        v = views @ self.rotation
        return self.base.query_many(p, v)


def query(fld, p, v):
    """Single-point convenience wrapper: returns (sigma, colour(3,))."""
    sig, col = fld.query_many(np.asarray(p, dtype=np.float64)[None, :],
                              np.asarray(v, dtype=np.float64)[None, :])
    return float(sig[0]), col[0]


# ---------------------------------------------------------------------------
# voxel field


@dataclass
class VoxelField:
    """Trainable grid field.

    density_raw holds pre-activation values; queried density is
    softplus(trilinear(density_raw)) so it stays non-negative under
    unconstrained optimisation.  Colour per channel is
    sigmoid(sum_b basis_b(v) * trilinear(sh[..., ch, b])).

    Grid nodes sit at bounds_lo + i * h with h = extent / (n - 1), so
    trilinear interpolation reproduces node values exactly.
    """

    resolution: tuple  # (nx, ny, nz), each >= 2
    bounds: np.ndarray  # (2, 3)
    density_raw: np.ndarray  # (nx, ny, nz) float64
    sh: np.ndarray  # (nx, ny, nz, 3, S) float64
    lmax: int = 2

    @classmethod
    def zeros(cls, resolution, bounds, lmax: int = 2, density_init: float = -3.0):
        nx, ny, nz = resolution
        if min(nx, ny, nz) < 2:
            raise FormatError("voxel resolution must be >= 2 per axis")
        s = (lmax + 1) ** 2
        return cls(
            resolution=(nx, ny, nz),
            bounds=np.asarray(bounds, dtype=np.float64).reshape(2, 3).copy(),
            density_raw=np.full((nx, ny, nz), density_init, dtype=np.float64),
            sh=np.zeros((nx, ny, nz, 3, s), dtype=np.float64),
            lmax=lmax,
        )

    @property
    def num_sh(self) -> int:
        return (self.lmax + 1) ** 2

    def _grid_coords(self, points: np.ndarray):
        """Trilinear cell indices and weights; inside mask for the bounds."""
        lo, hi = self.bounds[0], self.bounds[1]
        res = np.asarray(self.resolution)
        inside = np.all((points >= lo) & (points <= hi), axis=1)
        g = (points - lo) / (hi - lo) * (res - 1)
        g = np.clip(g, 0.0, res - 1)
        i0 = np.minimum(g.astype(np.int64), res - 2)
        f = g - i0
        return i0, f, inside

    def _corner_weights(self, f: np.ndarray):
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        # order: (dx, dy, dz) in binary 000..111
        return np.stack(
            [gx * gy * gz, gx * gy * fz, gx * fy * gz, gx * fy * fz,
             fx * gy * gz, fx * gy * fz, fx * fy * gz, fx * fy * fz],
            axis=1,
        )

    _CORNERS = np.array(
        [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
         [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]],
        dtype=np.int64,
    )

    def _corner_indices(self, i0: np.ndarray):
        idx = i0[:, None, :] + self._CORNERS[None, :, :]  # (n, 8, 3)
        return idx[..., 0], idx[..., 1], idx[..., 2]

    def query_many(self, points: np.ndarray, views: np.ndarray):
        points = np.atleast_2d(points)
        views = np.atleast_2d(views)
        n = len(points)
        i0, f, inside = self._grid_coords(points)
        w = self._corner_weights(f)  # (n, 8)
        ix, iy, iz = self._corner_indices(i0)

        raw = np.einsum("nc,nc->n", w, self.density_raw[ix, iy, iz])
        sig = softplus(raw)
        basis = sh_basis(views, self.lmax)  # (n, S)
        coeff = np.einsum("nc,ncks->nks", w, self.sh[ix, iy, iz])  # (n, 3, S)
        logits = np.einsum("nks,ns->nk", coeff, basis)
        col = expit(logits)

        sig = np.where(inside, sig, 0.0)
        col = np.where(inside[:, None], col, 0.0)
        return sig, col

    def gradients_many(
        self,
        points: np.ndarray,
        views: np.ndarray,
        d_sigma: np.ndarray,
        d_color: np.ndarray,
        grad_density: np.ndarray | None = None,
        grad_sh: np.ndarray | None = None,
    ):
        """Accumulate d(loss)/d(grids) for upstream d(loss)/d(sigma, colour).

        Exact chain rule through the activations and trilinear weights;
        accumulation order is the input sample order, so results are
        deterministic.  Returns (grad_density, grad_sh).
        """
        points = np.atleast_2d(points)
        views = np.atleast_2d(views)
        if grad_density is None:
            grad_density = np.zeros_like(self.density_raw)
        if grad_sh is None:
            grad_sh = np.zeros_like(self.sh)

        i0, f, inside = self._grid_coords(points)
        if not inside.any():
            return grad_density, grad_sh
        keep = np.flatnonzero(inside)
        i0, f = i0[keep], f[keep]
        views_in = views[keep]
        d_sigma = np.asarray(d_sigma, dtype=np.float64)[keep]
        d_color = np.asarray(d_color, dtype=np.float64)[keep]

        w = self._corner_weights(f)
        ix, iy, iz = self._corner_indices(i0)
        nx, ny, nz = self.resolution
        lin = (ix * ny + iy) * nz + iz  # (n, 8) flat voxel ids

        raw = np.einsum("nc,nc->n", w, self.density_raw[ix, iy, iz])
        d_raw = d_sigma * expit(raw)  # softplus' = sigmoid
        grad_density += np.bincount(
            lin.ravel(), weights=(d_raw[:, None] * w).ravel(), minlength=nx * ny * nz
        ).reshape(grad_density.shape)

        basis = sh_basis(views_in, self.lmax)
        coeff = np.einsum("nc,ncks->nks", w, self.sh[ix, iy, iz])
        logits = np.einsum("nks,ns->nk", coeff, basis)
        sgm = expit(logits)
        d_logits = d_color * sgm * (1.0 - sgm)  # (n, 3)
        # d logits / d sh[corner, ch, b] = w_corner * basis_b; accumulate on
        # flat (voxel, channel, band) ids, which match the sh memory layout
        s = self.num_sh
        per_vox = (d_logits[:, :, None] * basis[:, None, :]).reshape(-1, 1, 3 * s)
        vals = per_vox * w.reshape(-1, 8, 1)  # (n, 8, 3S)
        idx = lin[:, :, None] * (3 * s) + np.arange(3 * s)
        grad_sh += np.bincount(
            idx.ravel(), weights=vals.ravel(), minlength=grad_sh.size
        ).reshape(grad_sh.shape)
        return grad_density, grad_sh

    # -- serialization: `voxfield v1` ------------------------------------

    _MAGIC = b"voxfield v1\n"

    def save(self, path) -> None:
        """Binary format: magic, <3I resolution, <6d bounds, <I lmax, then
        density and SH grids as little-endian float32 in x-fastest order.
        SH payload per voxel is channel-major: S reds, S greens, S blues."""
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<3I", *self.resolution))
            fh.write(struct.pack("<6d", *self.bounds.ravel()))
            fh.write(struct.pack("<I", self.lmax))
            dens = self.density_raw.transpose(2, 1, 0).astype("<f4")
            fh.write(dens.tobytes())
            sh = self.sh.transpose(2, 1, 0, 3, 4).astype("<f4")
            fh.write(sh.tobytes())

    @classmethod
    def load(cls, path) -> "VoxelField":
        with open(path, "rb") as fh:
            magic = fh.read(len(cls._MAGIC))
            if magic != cls._MAGIC:
                raise FormatError(f"{path}: bad voxfield magic")
            nx, ny, nz = struct.unpack("<3I", fh.read(12))
            bounds = np.array(struct.unpack("<6d", fh.read(48))).reshape(2, 3)
            (lmax,) = struct.unpack("<I", fh.read(4))
            s = (lmax + 1) ** 2
            nvox = nx * ny * nz
            dens = np.frombuffer(fh.read(4 * nvox), dtype="<f4")
            if dens.size != nvox:
                raise FormatError(f"{path}: truncated density grid")
            sh = np.frombuffer(fh.read(4 * nvox * 3 * s), dtype="<f4")
            if sh.size != nvox * 3 * s:
                raise FormatError(f"{path}: truncated SH grid")
        dens = dens.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
        sh = sh.reshape(nz, ny, nx, 3, s).transpose(2, 1, 0, 3, 4).astype(np.float64)
        return cls(
            resolution=(nx, ny, nz),
            bounds=bounds,
            density_raw=np.ascontiguousarray(dens),
            sh=np.ascontiguousarray(sh),
            lmax=lmax,
        )
