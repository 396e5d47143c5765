"""Ray generation, hierarchical sampling, and emission-absorption rendering.

The pipeline per ray: segment the ray against the deformed cage, place
coarse samples (inside the cage segments by default, or across the full
near/far range), map each sample to canonical space (tet samples through
segment-endpoint interpolation of barycentric coordinates by default),
rotate the view direction per region, query the canonical field, place
fine samples by inverse-CDF sampling of the coarse weights, and integrate.

Weights follow the emission-absorption form
    w_i = T_i (1 - exp(-sigma_i delta_i)),   T_i = exp(-sum_{j<i} sigma_j delta_j)
with delta_i = t_{i+1} - t_i and delta_N = far - t_N.  The pixel colour is
sum w_i c_i plus the remaining transmittance times the background.

Everything is chunked and vectorised; per-pixel randomness is counter-based
(keyed by pixel index), so images are identical for any thread count.
"""

from __future__ import annotations

import json
import multiprocessing
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .deform import (
    KIND_GAP,
    KIND_OUTSIDE,
    KIND_RIGID,
    KIND_TET,
    RotationField,
    RotationFieldBuilder,
    canonical_view_dirs,
    map_points,
    segment_canonical_endpoints,
)
from .errors import FormatError
from .geometry import OUTSIDE, DeformedState, TetCage
from .lookup import Bvh, SegmentsBatch, build_bvh, segment_rays

OPAQUE_DENSITY = 1e6

MODE_EXTENDED = "two-stage-extended"
MODE_NERF = "two-stage-nerf"
MODE_SINGLE = "single-stage"
_MODES = (MODE_EXTENDED, MODE_NERF, MODE_SINGLE)


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; pose is the 3x4 world-from-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise FormatError("focal lengths must be positive")
        if not self.near < self.far:
            raise FormatError("camera requires near < far")
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64).reshape(3, 4))

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:, 3]

    def rays_for_pixels(self, xs: np.ndarray, ys: np.ndarray):
        """World-space unit rays through continuous pixel coordinates."""
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        d = np.stack(
            [(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1
        )
        d = d @ self.pose[:, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.origin, d.shape)
        return o, d

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "w": self.width, "h": self.height,
            "pose": [float(v) for v in self.pose.ravel()],
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["w"]), height=int(d["h"]),
            pose=np.asarray(d["pose"], dtype=np.float64).reshape(3, 4),
            near=float(d["near"]), far=float(d["far"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "Camera":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def generate_ray(camera: Camera, x: float, y: float):
    """Single ray through continuous pixel coordinates (x, y)."""
    o, d = camera.rays_for_pixels(np.array([x]), np.array([y]))
    return o[0], d[0]


# ---------------------------------------------------------------------------
# configuration / sample sets


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 128
    n_fine: int = 64
    jitter: bool = True
    seed: int = 0
    eps_transmittance: float = 1e-4
    mode: str = MODE_EXTENDED
    restrict_to_cage: bool = True  # sample only cage segments (test-time default)
    map_mode: str = "segment-lerp"  # or 'per-point'
    chunk_size: int = 512

    def __post_init__(self):
        if self.n_coarse < 1 or (self.mode != MODE_SINGLE and self.n_fine < 1):
            raise FormatError("sample counts must be >= 1")
        if not (0.0 <= self.eps_transmittance < 1.0):
            raise FormatError("eps_transmittance must be in [0, 1)")
        if self.mode not in _MODES:
            raise FormatError(f"unknown sampling mode {self.mode!r}")
        if self.map_mode not in ("segment-lerp", "per-point"):
            raise FormatError(f"unknown map mode {self.map_mode!r}")


@dataclass
class SampleSet:
    """Samples along one ray; weights/transmittance filled by integrate."""

    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    weights: np.ndarray | None = None
    transmittance: np.ndarray | None = None

    @classmethod
    def from_samples(cls, t, sigma, color, far: float) -> "SampleSet":
        t = np.asarray(t, dtype=np.float64)
        delta = np.empty_like(t)
        delta[:-1] = np.diff(t)
        delta[-1] = far - t[-1]
        return cls(t=t, delta=delta,
                   sigma=np.asarray(sigma, dtype=np.float64),
                   color=np.asarray(color, dtype=np.float64))


def _integrate_batch(t, delta, sigma, color, background, eps_t: float):
    """Vectorised emission-absorption integration over (R, N) sample grids."""
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    transmittance = np.exp(-(cum - tau))  # T_i, exclusive prefix
    alpha = -np.expm1(-tau)
    w = transmittance * alpha
    if eps_t > 0.0:
        w = np.where(transmittance >= eps_t, w, 0.0)
    opacity = w.sum(axis=1)
    rgb = np.einsum("rn,rnc->rc", w, color) + (1.0 - opacity)[:, None] * background
    depth = np.einsum("rn,rn->r", w, t) / np.maximum(opacity, 1e-12)
    return rgb, opacity, depth, w, transmittance


def integrate(samples: SampleSet, background):
    """Integrate one ray's samples; returns (rgb, opacity, depth).

    Fills samples.weights and samples.transmittance as a side effect.
    """
    bg = np.asarray(background, dtype=np.float64)
    rgb, opacity, depth, w, tr = _integrate_batch(
        samples.t[None], samples.delta[None], samples.sigma[None],
        samples.color[None], bg, eps_t=0.0,
    )
    samples.weights = w[0]
    samples.transmittance = tr[0]
    return rgb[0], float(opacity[0]), float(depth[0])


def integrate_adjoint(t, delta, sigma, color, w, transmittance, background, d_rgb):
    """Gradients of the integrated colour w.r.t. per-sample sigma and colour.

    d_rgb is dLoss/d(pixel rgb), shape (R, 3).  Assumes no early
    termination was applied in the forward pass.
    """
    d_color = w[:, :, None] * d_rgb[:, None, :]
    tau = sigma * delta
    t_next = transmittance * np.exp(-tau)  # T_{i+1}
    wc = w[:, :, None] * color  # (R, N, 3)
    suffix = np.cumsum(wc[:, ::-1, :], axis=1)[:, ::-1, :] - wc  # sum_{j>i} w_j c_j
    t_end = t_next[:, -1:]  # T_{N+1}
    suffix = suffix + t_end[:, :, None] * background[None, None, :]
    d_sigma = delta * (
        t_next * np.einsum("rnc,rc->rn", color, d_rgb)
        - np.einsum("rnc,rc->rn", suffix, d_rgb)
    )
    return d_sigma, d_color


# ---------------------------------------------------------------------------
# hierarchical sampling


def fine_sample(t_coarse, weights, n_fine: int, mode: str, u, near: float, far: float):
    """Fine t values by inverse-CDF sampling of the coarse weight profile.

    mode 'two-stage-nerf' uses the reference bins (midpoint edges, interior
    weights): no fine sample can land outside the outermost midpoints, which
    clips mass adjacent to a strong coarse sample.  mode
    'two-stage-extended' convolves the normalised weights with (1/4, 1/2,
    1/4) and widens the outer bin edges by half a spacing (clamped to
    [near, far]) so every bin adjacent to a spike keeps fine-sample mass.

    u holds the uniform draws, shape (R, n_fine).  Rays whose weights sum
    to zero fall back to uniform sampling of [near, far].  Returns sorted
    fine t values (R, n_fine); callers merge them with the coarse set.
    """
    t = np.atleast_2d(np.asarray(t_coarse, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    r, n = t.shape

    if mode == MODE_NERF:
        edges = 0.5 * (t[:, 1:] + t[:, :-1])  # (r, n-1)
        bw = w[:, 1:-1].copy()  # (r, n-2)
    elif mode == MODE_EXTENDED:
        mids = 0.5 * (t[:, 1:] + t[:, :-1])
        lo = np.maximum(near, t[:, :1] - 0.5 * (t[:, 1:2] - t[:, :1]))
        hi = np.minimum(far, t[:, -1:] + 0.5 * (t[:, -1:] - t[:, -2:-1]))
        edges = np.concatenate([lo, mids, hi], axis=1)  # (r, n+1)
        wn = w / np.maximum(w.sum(axis=1, keepdims=True), 1e-300)
        bw = 0.5 * wn
        bw[:, 1:] += 0.25 * wn[:, :-1]
        bw[:, :-1] += 0.25 * wn[:, 1:]
    else:
        raise FormatError(f"fine_sample does not apply to mode {mode!r}")

    total = bw.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] <= 0.0
    bw = np.where(degenerate[:, None], 1.0, bw)
    total = bw.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(bw / total, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    # row-offset trick: one searchsorted over all rays at once
    row = np.arange(r, dtype=np.float64)[:, None]
    flat_cdf = (cdf + 2.0 * row).ravel()
    uq = np.clip(u, 0.0, 1.0 - 1e-12) + 2.0 * row
    idx = np.searchsorted(flat_cdf, uq.ravel(), side="right") - 1
    idx -= np.repeat(np.arange(r), u.shape[1]) * cdf.shape[1]
    idx = np.clip(idx, 0, bw.shape[1] - 1).reshape(r, -1)

    rows = np.repeat(np.arange(r)[:, None], u.shape[1], axis=1)
    c_lo = cdf[rows, idx]
    c_hi = cdf[rows, idx + 1]
    e_lo = edges[rows, idx]
    e_hi = edges[rows, idx + 1]
    frac = (u - c_lo) / np.maximum(c_hi - c_lo, 1e-300)
    out = e_lo + frac * (e_hi - e_lo)
    out = np.where(degenerate[:, None], near + u * (far - near), out)
    return np.sort(out, axis=1)


# ---------------------------------------------------------------------------
# scene


@dataclass
class Scene:
    """Everything needed to render one frame; immutable during the frame."""

    cage: TetCage
    state: DeformedState
    radiance: object  # field with query_many(points, views)
    background: np.ndarray
    bvh: Bvh
    rotation_field: RotationField
    rotation_builder: RotationFieldBuilder = field(repr=False, default=None)

    @classmethod
    def build(
        cls,
        cage: TetCage,
        state: DeformedState,
        radiance,
        background=(0.0, 0.0, 0.0),
        rotation_fraction: float = 0.05,
        rotation_seed: int = 0,
    ) -> "Scene":
        builder = RotationFieldBuilder(cage, rotation_fraction, rotation_seed)
        return cls(
            cage=cage,
            state=state,
            radiance=radiance,
            background=np.asarray(background, dtype=np.float64),
            bvh=build_bvh(cage, state),
            rotation_field=builder.build(state),
            rotation_builder=builder,
        )

    def with_state(self, state: DeformedState) -> tuple["Scene", str]:
        """New frame: refit/rebuild the BVH and recompute rotations.

        Returns the updated scene and the BVH action taken.
        """
        action = self.bvh.update(state)
        rot = self.rotation_builder.build(state)
        return replace(self, state=state, rotation_field=rot), action


# ---------------------------------------------------------------------------
# the per-chunk pipeline


def _coarse_domain_restricted(segs: SegmentsBatch, n_rays, n_coarse, jitter_u, near, far):
    """Stratified arc-length samples over the union of non-outside segments.

    Rays whose non-outside arc length is zero get all samples parked at
    near (they classify as outside and contribute vacuum).
    """
    seg_ray = np.repeat(np.arange(n_rays), np.diff(segs.offsets))
    inside = segs.region != OUTSIDE
    iseg = np.flatnonzero(inside)
    if not iseg.size:
        return np.full((n_rays, n_coarse), near)

    ir = seg_ray[iseg]
    ilen = segs.t_exit[iseg] - segs.t_enter[iseg]
    counts_in = np.bincount(ir, minlength=n_rays)
    first_in = np.concatenate([[0], np.cumsum(counts_in)])[:-1]
    csum = np.cumsum(ilen)
    block_start = np.where(counts_in > 0, np.concatenate([[0.0], csum])[first_in], 0.0)
    cum_end = csum - np.repeat(block_start, counts_in)  # arc length at segment ends
    last_in = first_in + np.maximum(counts_in - 1, 0)
    total = np.where(counts_in > 0, cum_end[np.minimum(last_in, len(iseg) - 1)], 0.0)
    tot = np.maximum(total, 1e-300)

    s = jitter_u * total[:, None]  # (R, Nc) target arc lengths
    norm_end = cum_end / tot[ir] + 2.0 * ir
    q = np.clip(s / tot[:, None], 0.0, 1.0 - 1e-15) + 2.0 * np.arange(n_rays)[:, None]
    pos = np.searchsorted(norm_end, q.ravel(), side="right")
    pos = np.clip(pos, 0, len(iseg) - 1)
    seg_idx = iseg[pos]
    cum_before = cum_end[pos] - ilen[pos]
    t = segs.t_enter[seg_idx] + (s.ravel() - cum_before)
    t = np.minimum(t, segs.t_exit[seg_idx]).reshape(n_rays, n_coarse)
    t = np.where(total[:, None] > 0, t, near)
    return np.sort(t, axis=1)


def _classify_samples(segs: SegmentsBatch, n_rays, t, near, far):
    """Segment index per sample (R, N) via the full tiling of [near, far]."""
    seg_ray = np.repeat(np.arange(n_rays), np.diff(segs.offsets))
    span = max(far - near, 1e-300)
    norm_exit = (segs.t_exit - near) / span + 2.0 * seg_ray
    q = np.clip((t - near) / span, 0.0, 1.0) + 2.0 * np.arange(n_rays)[:, None]
    pos = np.searchsorted(norm_exit, q.ravel(), side="left")
    counts = np.diff(segs.offsets)
    rows = np.repeat(np.arange(n_rays), t.shape[1])
    lo = segs.offsets[:-1][rows]
    hi = np.maximum(lo, lo + counts[rows] - 1)
    return np.clip(pos, lo, hi).reshape(t.shape)


class _ChunkRenderer:
    """Shared machinery for rendering one chunk of rays."""

    def __init__(self, scene: Scene, cfg: RenderConfig, near: float, far: float):
        self.scene = scene
        self.cfg = cfg
        self.near = near
        self.far = far
        self.timings = {"segment": 0.0, "query": 0.0, "integrate": 0.0}

    def _prepare_segment_views(self, segs, dirs):
        """Canonical-space ray direction per tet segment (R^T d)."""
        seg_ray = np.repeat(
            np.arange(len(segs.offsets) - 1, dtype=np.int64), np.diff(segs.offsets)
        )
        reg = segs.region
        nt = self.scene.cage.num_tets
        out = dirs[seg_ray].copy()
        tet = (reg >= 0) & (reg < nt)
        if tet.any():
            idx = np.flatnonzero(tet)
            r = self.scene.rotation_field.rotations[reg[idx]]
            out[idx] = np.einsum("nji,nj->ni", r, dirs[seg_ray[idx]])
        return out, seg_ray

    def _eval_samples(self, origins, dirs, t, segs, entry_canon, exit_canon,
                      seg_views):
        """Map samples to canonical space and query the field.

        Tet samples map by interpolating the canonical images of their
        segment endpoints (linear in the barycentric coordinates), so no
        per-sample solve is needed; non-simplex region samples go through
        the affine/plane logic on their deformed positions.

        Returns per-sample sigma (R, N), colour (R, N, 3), kind (R, N),
        region codes (R, N), canonical points and view directions.
        """
        scene = self.scene
        n_rays, n = t.shape
        nt = scene.cage.num_tets
        seg_idx = _classify_samples(segs, n_rays, t, self.near, self.far)
        flat_seg = seg_idx.ravel()
        codes = segs.region[flat_seg]
        flat_t = t.ravel()

        kind = np.full(n_rays * n, KIND_OUTSIDE, dtype=np.int64)
        canon = np.zeros((n_rays * n, 3))
        views = np.zeros((n_rays * n, 3))

        tet_mask = (codes >= 0) & (codes < nt)
        if tet_mask.any():
            ti = np.flatnonzero(tet_mask)
            si = flat_seg[ti]
            if self.cfg.map_mode == "segment-lerp":
                denom = np.maximum(segs.t_exit[si] - segs.t_enter[si], 1e-300)
                alpha = np.clip((segs.t_exit[si] - flat_t[ti]) / denom, 0.0, 1.0)
                e_in = entry_canon[si]
                e_out = exit_canon[si]
                canon[ti] = alpha[:, None] * e_in + (1.0 - alpha)[:, None] * e_out
            else:
                ray = ti // n
                p = origins[ray] + flat_t[ti, None] * dirs[ray]
                mapped, _ = map_points(scene.cage, scene.state, codes[ti], p)
                canon[ti] = mapped
            views[ti] = seg_views[si]
            kind[ti] = KIND_TET

        extra_mask = codes >= nt
        if extra_mask.any():
            ei = np.flatnonzero(extra_mask)
            ray = ei // n
            p = origins[ray] + flat_t[ei, None] * dirs[ray]
            mapped, k_sub, sub_bottom = map_points(
                scene.cage, scene.state, codes[ei], p, want_sub=True
            )
            canon[ei] = mapped
            kind[ei] = k_sub
            views[ei] = canonical_view_dirs(
                scene.rotation_field, scene.state, nt, codes[ei], k_sub,
                dirs[ray], sub_bottom,
            )

        sigma = np.zeros(n_rays * n)
        color = np.zeros((n_rays * n, 3))
        live = (kind == KIND_TET) | (kind == KIND_RIGID)
        if live.any():
            idx = np.flatnonzero(live)
            tq = time.perf_counter()
            s, c = scene.radiance.query_many(canon[idx], views[idx])
            self.timings["query"] += time.perf_counter() - tq
            sigma[idx] = s
            color[idx] = c
        return (
            sigma.reshape(n_rays, n),
            color.reshape(n_rays, n, 3),
            kind.reshape(n_rays, n),
            codes.reshape(n_rays, n),
            canon.reshape(n_rays, n, 3),
            views.reshape(n_rays, n, 3),
        )

    def render(self, origins, dirs, pixel_keys, want_cache=False):
        scene, cfg = self.scene, self.cfg
        n_rays = len(origins)
        ts = time.perf_counter()
        segs = segment_rays(scene.bvh, origins, dirs, self.near, self.far)
        entry_canon, exit_canon = segment_canonical_endpoints(scene.cage, segs)
        seg_views, _ = self._prepare_segment_views(segs, dirs)
        self.timings["segment"] += time.perf_counter() - ts

        if cfg.jitter:
            ju = rng.uniforms(cfg.seed, rng.STREAM_COARSE_JITTER, pixel_keys, cfg.n_coarse)
        else:
            ju = np.full((n_rays, cfg.n_coarse), 0.5)
        strat = (np.arange(cfg.n_coarse) + ju) / cfg.n_coarse

        if cfg.restrict_to_cage:
            t_c = _coarse_domain_restricted(
                segs, n_rays, cfg.n_coarse, strat, self.near, self.far
            )
        else:
            t_c = self.near + strat * (self.far - self.near)

        sig_c, col_c, kind_c, codes_c, canon_c, views_c = self._eval_samples(
            origins, dirs, t_c, segs, entry_canon, exit_canon, seg_views
        )

        if cfg.mode == MODE_SINGLE:
            t_all, sig, col, kind, codes = t_c, sig_c, col_c, kind_c, codes_c
            canon_all, views_all = canon_c, views_c
            coarse_mask = np.ones_like(sig, dtype=bool)
        else:
            delta_c = np.empty_like(t_c)
            delta_c[:, :-1] = np.diff(t_c, axis=1)
            delta_c[:, -1] = self.far - t_c[:, -1]
            tau = sig_c * delta_c
            cumt = np.cumsum(tau, axis=1)
            w_c = np.exp(-(cumt - tau)) * (-np.expm1(-tau))

            if cfg.jitter:
                fj = rng.uniforms(cfg.seed, rng.STREAM_FINE_DRAWS, pixel_keys, cfg.n_fine)
            else:
                fj = np.full((n_rays, cfg.n_fine), 0.5)
            fu = (np.arange(cfg.n_fine) + fj) / cfg.n_fine  # stratified draws
            t_f = fine_sample(t_c, w_c, cfg.n_fine, cfg.mode, fu, self.near, self.far)

            sig_f, col_f, kind_f, codes_f, canon_f, views_f = self._eval_samples(
                origins, dirs, t_f, segs, entry_canon, exit_canon, seg_views
            )

            # stable two-way merge of the per-row sorted coarse and fine sets
            nc, nf = cfg.n_coarse, cfg.n_fine
            span = max(self.far - self.near, 1e-300)
            off = 2.0 * np.arange(n_rays)[:, None]
            qc = (t_c - self.near) / span + off
            qf = (t_f - self.near) / span + off
            pos_c = (
                np.searchsorted(qf.ravel(), qc.ravel(), side="left").reshape(n_rays, nc)
                - np.arange(n_rays)[:, None] * nf
                + np.arange(nc)
            )
            pos_f = (
                np.searchsorted(qc.ravel(), qf.ravel(), side="right").reshape(n_rays, nf)
                - np.arange(n_rays)[:, None] * nc
                + np.arange(nf)
            )
            rows = np.arange(n_rays)[:, None]

            def merge(a, b, extra_shape=()):
                out = np.empty((n_rays, nc + nf) + extra_shape, dtype=a.dtype)
                out[rows, pos_c] = a
                out[rows, pos_f] = b
                return out

            t_all = merge(t_c, t_f)
            sig = merge(sig_c, sig_f)
            col = merge(col_c, col_f, (3,))
            kind = merge(kind_c, kind_f)
            codes = merge(codes_c, codes_f)
            if want_cache:
                canon_all = merge(canon_c, canon_f, (3,))
                views_all = merge(views_c, views_f, (3,))
                coarse_mask = merge(
                    np.ones_like(sig_c, dtype=bool), np.zeros_like(sig_f, dtype=bool)
                )
            else:
                canon_all = views_all = coarse_mask = None

        sig, col = self._apply_gap_override(t_all, sig, col, kind, codes)

        ti = time.perf_counter()
        delta = np.empty_like(t_all)
        delta[:, :-1] = np.diff(t_all, axis=1)
        delta[:, -1] = self.far - t_all[:, -1]
        rgb, opacity, depth, w, transmittance = _integrate_batch(
            t_all, delta, sig, col, scene.background, cfg.eps_transmittance
        )
        self.timings["integrate"] += time.perf_counter() - ti

        if want_cache:
            cache = {
                "t": t_all, "delta": delta, "sigma": sig, "color": col,
                "w": w, "transmittance": transmittance, "kind": kind,
                "canon": canon_all, "views": views_all, "coarse": coarse_mask,
                "codes": codes,
            }
            return rgb, opacity, depth, cache
        return rgb, opacity, depth, None

    def _apply_gap_override(self, t, sig, col, kind, codes):
        """Colour/density override on the final gap sample of each ray.

        The last sample falling in a plane-split gap is made opaque with
        the region's gap colour, unless a later sample is already opaque
        (per-sample alpha > 0.9).
        """
        gap = kind == KIND_GAP
        if not gap.any():
            return sig, col
        scene = self.scene
        n_rays, n = t.shape
        delta = np.empty_like(t)
        delta[:, :-1] = np.diff(t, axis=1)
        delta[:, -1] = self.far - t[:, -1]
        alpha = -np.expm1(-sig * delta)

        cols = np.arange(n)
        last_gap = np.where(gap, cols, -1).max(axis=1)  # (R,)
        rows = np.flatnonzero(last_gap >= 0)
        if not rows.size:
            return sig, col
        later_opaque = np.zeros(len(rows), dtype=bool)
        for k, r in enumerate(rows):  # few gap rays per chunk in practice
            j = last_gap[r]
            later_opaque[k] = bool((alpha[r, j + 1 :] > 0.9).any())
        apply_rows = rows[~later_opaque]
        if not apply_rows.size:
            return sig, col
        sig = sig.copy()
        col = col.copy()
        nt = scene.cage.num_tets
        for r in apply_rows:
            j = last_gap[r]
            reg = scene.state.region_states[codes[r, j] - nt]
            sig[r, j] = OPAQUE_DENSITY
            col[r, j] = reg.gap_color
        return sig, col


def render_rays(scene, origins, dirs, near, far, cfg: RenderConfig, pixel_keys=None,
                want_cache=False):
    """Render a batch of rays; returns (rgb, opacity, depth[, cache])."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if pixel_keys is None:
        pixel_keys = np.arange(len(origins), dtype=np.uint64)
    r = _ChunkRenderer(scene, cfg, near, far)
    rgb, opacity, depth, cache = r.render(origins, dirs, pixel_keys, want_cache)
    if want_cache:
        return rgb, opacity, depth, cache
    return rgb, opacity, depth


def render_ray(scene, origin, direction, near, far, cfg: RenderConfig, pixel_key=0):
    """Render a single ray; returns (rgb, opacity, depth)."""
    rgb, opacity, depth = render_rays(
        scene,
        np.asarray(origin)[None, :],
        np.asarray(direction)[None, :],
        near, far, cfg,
        np.array([pixel_key], dtype=np.uint64),
    )
    return rgb[0], float(opacity[0]), float(depth[0])


@dataclass
class Frame:
    rgb: np.ndarray  # (h, w, 3) float64 in [0, 1]
    opacity: np.ndarray  # (h, w)
    depth: np.ndarray  # (h, w)
    timings: dict


# fork-pool plumbing: workers inherit the job state set just before the
# pool is created, so nothing heavyweight is pickled per task
_POOL_JOB = None


def _render_chunk_job(bound):
    scene, cfg, near, far, origins, dirs, keys = _POOL_JOB
    lo, hi = bound
    r = _ChunkRenderer(scene, cfg, near, far)
    rgb, opacity, depth, _ = r.render(origins[lo:hi], dirs[lo:hi], keys[lo:hi])
    return lo, rgb, opacity, depth, r.timings


def render_image(scene: Scene, camera: Camera, cfg: RenderConfig, threads: int = 1) -> Frame:
    """Render a full frame.

    Rays are processed in fixed-size chunks written to disjoint buffer
    slots; per-pixel randomness is keyed by pixel index, so the result is
    identical for any worker count.  threads > 1 uses forked worker
    processes (falling back to in-process threads where fork is not
    available).
    """
    global _POOL_JOB
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.ravel() + 0.5
    ys = ys.ravel() + 0.5
    keys = np.arange(h * w, dtype=np.uint64)
    origins, dirs = camera.rays_for_pixels(xs, ys)

    rgb = np.empty((h * w, 3))
    opacity = np.empty(h * w)
    depth = np.empty(h * w)
    chunk = cfg.chunk_size
    bounds = [(i, min(i + chunk, h * w)) for i in range(0, h * w, chunk)]
    timings_acc = []

    if threads <= 1 or len(bounds) == 1:
        r = _ChunkRenderer(scene, cfg, camera.near, camera.far)
        for lo, hi in bounds:
            out = r.render(origins[lo:hi], dirs[lo:hi], keys[lo:hi])
            rgb[lo:hi], opacity[lo:hi], depth[lo:hi] = out[0], out[1], out[2]
        timings_acc.append(r.timings)
    else:
        workers = max(1, min(threads, multiprocessing.cpu_count()))
        try:
            ctx = multiprocessing.get_context("fork")
        except ValueError:
            ctx = None
        if ctx is None:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                job = (scene, cfg, camera.near, camera.far, origins, dirs, keys)
                global_backup, _POOL_JOB = _POOL_JOB, job
                try:
                    for lo, c_rgb, c_op, c_dep, tim in pool.map(_render_chunk_job, bounds):
                        hi = lo + len(c_rgb)
                        rgb[lo:hi], opacity[lo:hi], depth[lo:hi] = c_rgb, c_op, c_dep
                        timings_acc.append(tim)
                finally:
                    _POOL_JOB = global_backup
        else:
            job = (scene, cfg, camera.near, camera.far, origins, dirs, keys)
            global_backup, _POOL_JOB = _POOL_JOB, job
            try:
                with ctx.Pool(processes=workers) as pool:
                    for lo, c_rgb, c_op, c_dep, tim in pool.map(_render_chunk_job, bounds):
                        hi = lo + len(c_rgb)
                        rgb[lo:hi], opacity[lo:hi], depth[lo:hi] = c_rgb, c_op, c_dep
                        timings_acc.append(tim)
            finally:
                _POOL_JOB = global_backup

    timings = {k: sum(t[k] for t in timings_acc) for k in timings_acc[0]} if timings_acc else {}
    return Frame(
        rgb=rgb.reshape(h, w, 3),
        opacity=opacity.reshape(h, w),
        depth=depth.reshape(h, w),
        timings=timings,
    )


def render_direct(radiance, camera: Camera, cfg: RenderConfig, background=(0.0, 0.0, 0.0),
                  threads: int = 1) -> Frame:
    """Render a field with no cage: uniform near/far sampling per pixel.

    The reference path for identity/rigid-motion comparisons; it shares the
    sampler and integrator but none of the cage machinery.
    """
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    origins, dirs = camera.rays_for_pixels(xs.ravel() + 0.5, ys.ravel() + 0.5)
    keys = np.arange(h * w, dtype=np.uint64)
    bg = np.asarray(background, dtype=np.float64)

    rgb = np.empty((h * w, 3))
    opacity = np.empty(h * w)
    depth = np.empty(h * w)
    chunk = cfg.chunk_size
    bounds = [(i, min(i + chunk, h * w)) for i in range(0, h * w, chunk)]

    def run(b):
        lo, hi = b
        o, d, k = origins[lo:hi], dirs[lo:hi], keys[lo:hi]
        n_rays = len(o)
        if cfg.jitter:
            ju = rng.uniforms(cfg.seed, rng.STREAM_COARSE_JITTER, k, cfg.n_coarse)
        else:
            ju = np.full((n_rays, cfg.n_coarse), 0.5)
        t_c = camera.near + ((np.arange(cfg.n_coarse) + ju) / cfg.n_coarse) * (
            camera.far - camera.near
        )
        p = o[:, None, :] + t_c[:, :, None] * d[:, None, :]
        v = np.broadcast_to(d[:, None, :], p.shape).reshape(-1, 3)
        sig, col = radiance.query_many(p.reshape(-1, 3), v)
        sig = sig.reshape(n_rays, -1)
        col = col.reshape(n_rays, -1, 3)

        if cfg.mode != MODE_SINGLE:
            delta_c = np.empty_like(t_c)
            delta_c[:, :-1] = np.diff(t_c, axis=1)
            delta_c[:, -1] = camera.far - t_c[:, -1]
            tau = sig * delta_c
            cumt = np.cumsum(tau, axis=1)
            w_c = np.exp(-(cumt - tau)) * (-np.expm1(-tau))
            if cfg.jitter:
                fj = rng.uniforms(cfg.seed, rng.STREAM_FINE_DRAWS, k, cfg.n_fine)
            else:
                fj = np.full((n_rays, cfg.n_fine), 0.5)
            fu = (np.arange(cfg.n_fine) + fj) / cfg.n_fine
            t_f = fine_sample(t_c, w_c, cfg.n_fine, cfg.mode, fu, camera.near, camera.far)
            pf = o[:, None, :] + t_f[:, :, None] * d[:, None, :]
            vf = np.broadcast_to(d[:, None, :], pf.shape).reshape(-1, 3)
            sig_f, col_f = radiance.query_many(pf.reshape(-1, 3), vf)
            t_all = np.concatenate([t_c, t_f], axis=1)
            order = np.argsort(t_all, axis=1, kind="stable")
            rows = np.arange(n_rays)[:, None]
            t_all = t_all[rows, order]
            sig = np.concatenate([sig, sig_f.reshape(n_rays, -1)], axis=1)[rows, order]
            col = np.concatenate([col, col_f.reshape(n_rays, -1, 3)], axis=1)[rows, order]
        else:
            t_all = t_c

        delta = np.empty_like(t_all)
        delta[:, :-1] = np.diff(t_all, axis=1)
        delta[:, -1] = camera.far - t_all[:, -1]
        out = _integrate_batch(t_all, delta, sig, col, bg, cfg.eps_transmittance)
        rgb[lo:hi], opacity[lo:hi], depth[lo:hi] = out[0], out[1], out[2]

    if threads <= 1:
        for b in bounds:
            run(b)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, bounds))

    return Frame(
        rgb=rgb.reshape(h, w, 3),
        opacity=opacity.reshape(h, w),
        depth=depth.reshape(h, w),
        timings={},
    )
