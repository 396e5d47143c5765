"""Fitting a voxel field to posed images through the deforming cage.

Per iteration: draw a seeded batch of (image, pixel) rays, render them
through each image's deformed state with the gradient cache enabled,
backpropagate the least-squares RGB loss through the integrator into the
grid parameters, add Cauchy sparsity gradients on designated coarse
samples, and take one Adam step.

Sparsity terms (log(1 + 2 sigma^2) scaled by lambda / N):
* outer: coarse samples inside tetrahedra on rays whose pixel is marked
  background by the training mask; keeps unsupervised cage volume empty.
* gap: coarse samples mapped through a plane-split region (the mouth-style
  interior); keeps disoccluded regions from growing density.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .deform import KIND_RIGID, KIND_TET
from .errors import ConfigError, NonFiniteLoss
from .field import VoxelField
from .geometry import TetCage
from .render import RenderConfig, Scene, _ChunkRenderer, integrate_adjoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lambda_outer: float = 1e-4
    lambda_gap: float = 2e-6
    rays_per_batch: int = 1024
    iterations: int = 2000
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lambda_outer < 0 or self.lambda_gap < 0 or self.lr <= 0:
            raise ConfigError("loss weights must be >= 0 and lr > 0")


@dataclass
class TrainSet:
    """Posed images with optional background masks and per-image states."""

    images: list  # (h, w, 3) float arrays in [0, 1]
    cameras: list  # Camera per image
    masks: list | None = None  # (h, w) bool, True = background pixel
    states: list | None = None  # DeformedState per image (None = rest)

    def __post_init__(self):
        n = len(self.images)
        if len(self.cameras) != n:
            raise ConfigError("every image needs a camera")
        if self.masks is None:
            self.masks = [None] * n
        if self.states is None:
            self.states = [None] * n
        for img, cam in zip(self.images, self.cameras):
            if img.shape[:2] != (cam.height, cam.width):
                raise ConfigError("image size does not match its camera")
        for img, m in zip(self.images, self.masks):
            if m is not None and m.shape != img.shape[:2]:
                raise ConfigError("mask size does not match its image")


def rgb_loss(rendered: np.ndarray, target: np.ndarray):
    """Squared L2 per channel, mean over the batch; returns (loss, grad)."""
    rendered = np.atleast_2d(rendered)
    target = np.atleast_2d(target)
    diff = rendered - target
    b = len(rendered)
    return float(np.sum(diff * diff) / b), 2.0 * diff / b


def sparsity_loss(sigma: np.ndarray, lam: float, n: int | None = None):
    """Cauchy sparsity on densities: (lam/N) sum log(1 + 2 sigma^2).

    Returns (loss, dloss/dsigma).  N defaults to the number of samples.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.size if n is None else n
    if n == 0:
        return 0.0, np.zeros_like(sigma)
    scale = lam / n
    loss = float(scale * np.log1p(2.0 * sigma**2).sum())
    grad = scale * 4.0 * sigma / (1.0 + 2.0 * sigma**2)
    return loss, grad


class _Adam:
    def __init__(self, shapes, lr, beta1, beta2, eps):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _flatten_pixel_space(cameras):
    sizes = np.array([c.width * c.height for c in cameras], dtype=np.int64)
    return np.concatenate([[0], np.cumsum(sizes)])


def loss_and_gradients(
    voxel: VoxelField,
    cage: TetCage,
    train: TrainSet,
    scenes: list,
    cfg: LossConfig,
    render_cfg: RenderConfig,
    background: np.ndarray,
    img_of: np.ndarray,
    pix_of: np.ndarray,
):
    """Total loss and grid gradients for one batch of (image, pixel) rays.

    Returns (losses dict, grad_density, grad_sh).  Gradient accumulation
    order is fixed (images in index order, samples in ray order), so the
    result is deterministic.
    """
    bg = np.asarray(background, dtype=np.float64)
    targets = [np.asarray(img, dtype=np.float64).reshape(-1, 3) for img in train.images]
    bg_masks = [
        None if m is None else np.asarray(m, dtype=bool).ravel() for m in train.masks
    ]
    grad_density = np.zeros_like(voxel.density_raw)
    grad_sh = np.zeros_like(voxel.sh)
    loss_rgb_total = 0.0
    loss_outer_total = 0.0
    loss_gap_total = 0.0
    batch = len(img_of)

    for fi in np.unique(img_of):
        sel = img_of == fi
        pix = pix_of[sel]
        cam = train.cameras[fi]
        xs = (pix % cam.width) + 0.5
        ys = (pix // cam.width) + 0.5
        origins, dirs = cam.rays_for_pixels(xs, ys)
        chunk = _ChunkRenderer(scenes[fi], render_cfg, cam.near, cam.far)
        rgb, _, _, cache = chunk.render(origins, dirs, pix.astype(np.uint64), True)

        loss_i, d_rgb_full = rgb_loss(rgb, targets[fi][pix])
        # rgb_loss averages over its own rows; rescale to the full batch
        nsel = int(sel.sum())
        loss_rgb_total += loss_i * nsel / batch
        d_rgb = d_rgb_full * nsel / batch

        d_sigma, d_color = integrate_adjoint(
            cache["t"], cache["delta"], cache["sigma"], cache["color"],
            cache["w"], cache["transmittance"], bg, d_rgb,
        )

        kind = cache["kind"]
        codes = cache["codes"]
        coarse = cache["coarse"]
        nt = cage.num_tets
        plane_codes = [
            nt + j
            for j, r in enumerate(scenes[fi].state.region_states)
            if r.kind == "plane_split"
        ]
        in_plane = (
            np.isin(codes, plane_codes)
            if plane_codes
            else np.zeros_like(codes, dtype=bool)
        )

        if cfg.lambda_outer > 0 and bg_masks[fi] is not None:
            ray_bg = bg_masks[fi][pix]
            sel_outer = ray_bg[:, None] & coarse & (kind == KIND_TET)
            if sel_outer.any():
                l_o, g_o = sparsity_loss(cache["sigma"][sel_outer], cfg.lambda_outer)
                loss_outer_total += l_o
                d_sigma[sel_outer] += g_o
        if cfg.lambda_gap > 0:
            sel_gap = coarse & in_plane & (kind == KIND_RIGID)
            if sel_gap.any():
                l_g, g_g = sparsity_loss(cache["sigma"][sel_gap], cfg.lambda_gap)
                loss_gap_total += l_g
                d_sigma[sel_gap] += g_g

        live = (kind == KIND_TET) | (kind == KIND_RIGID)
        idx = np.flatnonzero(live.ravel())
        if idx.size:
            voxel.gradients_many(
                cache["canon"].reshape(-1, 3)[idx],
                cache["views"].reshape(-1, 3)[idx],
                d_sigma.ravel()[idx],
                d_color.reshape(-1, 3)[idx],
                grad_density,
                grad_sh,
            )

    losses = {
        "rgb": loss_rgb_total,
        "sparsity_outer": loss_outer_total,
        "sparsity_gap": loss_gap_total,
        "total": loss_rgb_total + loss_outer_total + loss_gap_total,
    }
    return losses, grad_density, grad_sh


def build_training_scenes(voxel, cage, train, background, rotation_fraction=0.05,
                          rotation_seed=0):
    """One Scene per training image, sharing the voxel field."""
    bg = np.asarray(background, dtype=np.float64)
    scenes = []
    for st in train.states:
        state = cage.rest_state() if st is None else st
        scenes.append(Scene.build(cage, state, voxel, bg, rotation_fraction, rotation_seed))
    return scenes


def draw_batch(cameras, rays_per_batch: int, seed: int, iteration: int):
    """Seeded (image, pixel) indices for one iteration, sorted by image."""
    cum = _flatten_pixel_space(cameras)
    total = int(cum[-1])
    u = rng.uniforms(seed, rng.STREAM_FIT_BATCH, np.uint64(iteration), rays_per_batch)[0]
    flat = np.minimum((u * total).astype(np.int64), total - 1)
    flat.sort()
    img_of = np.searchsorted(cum, flat, side="right") - 1
    pix_of = flat - cum[img_of]
    return img_of, pix_of


def fit(
    voxel: VoxelField,
    cage: TetCage,
    train: TrainSet,
    cfg: LossConfig,
    seed: int = 0,
    render_cfg: RenderConfig | None = None,
    background=(0.0, 0.0, 0.0),
    rotation_fraction: float = 0.05,
    rotation_seed: int = 0,
    log_every: int = 0,
):
    """Optimise the voxel grids in place; returns (voxel, loss trace).

    The trace is a list of dicts with per-iteration loss components.  The
    render configuration is forced to full-range sampling with no early
    termination so the integrator adjoint is exact.
    """
    if render_cfg is None:
        render_cfg = RenderConfig(n_coarse=64, n_fine=32)
    render_cfg = replace(render_cfg, restrict_to_cage=False, eps_transmittance=0.0)
    bg = np.asarray(background, dtype=np.float64)
    scenes = build_training_scenes(voxel, cage, train, bg, rotation_fraction, rotation_seed)

    opt = _Adam(
        [voxel.density_raw.shape, voxel.sh.shape], cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
    )
    trace = []
    for it in range(cfg.iterations):
        img_of, pix_of = draw_batch(train.cameras, cfg.rays_per_batch, seed, it)
        losses, grad_density, grad_sh = loss_and_gradients(
            voxel, cage, train, scenes, cfg, render_cfg, bg, img_of, pix_of
        )
        if not np.isfinite(losses["total"]):
            raise NonFiniteLoss(it, losses["total"])
        trace.append({"iteration": it, **losses})
        opt.step([voxel.density_raw, voxel.sh], [grad_density, grad_sh])
        if log_every and it % log_every == 0:
            logger.info("iter %d: rgb %.6f total %.6f", it, losses["rgb"], losses["total"])
    return voxel, trace
