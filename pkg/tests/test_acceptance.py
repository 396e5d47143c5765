"""Acceptance suite: one test per release criterion.

Each test prints a single [PASS]/[FAIL] line (visible with `pytest -s` or
in the failure report) and asserts the stated tolerance.  Scenes are
synthetic and seeded; every run is deterministic.
"""

import time

import numpy as np
import pytest
from scipy.stats import binomtest

import cages
import oracles
import scenes
from cagevox import (
    CompositeField,
    ConstantBox,
    DeformedState,
    LossConfig,
    PlaneSplitRegion,
    RenderConfig,
    RotationFieldBuilder,
    Scene,
    TrainSet,
    TransformedField,
    VoxelField,
    build_bvh,
    fine_sample,
    fit,
    locate_points,
    locate_points_bruteforce,
    render_direct,
    render_image,
    segment_rays,
)
from cagevox import affine
from cagevox.fit import build_training_scenes, draw_batch, loss_and_gradients
from cagevox.imageio import psnr
from cagevox.render import MODE_EXTENDED, MODE_NERF, MODE_SINGLE


def report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\n[{status}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _random_dirs(rng, n):
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# 1. oracle equivalence of the accelerated lookup


class TestCriterion1:
    CASES = [
        ("unit-tet", lambda: cages.unit_tet_cage(), None, 16),
        ("two-tet", lambda: cages.two_tet_cage(), None, 16),
        ("five-tet-cube", lambda: cages.five_tet_cube(), None, 16),
        ("grid-384", lambda: cages.kuhn_grid_cage(4), None, 16),
        ("grid-384-twisted", lambda: cages.kuhn_grid_cage(4), "twist", 16),
        ("grid-2000-twisted", lambda: cages.cage_2000(), "twist", 8),
    ]

    def test_lookup_matches_bruteforce(self):
        t_start = time.monotonic()
        total_pts = 0
        total_samples = 0
        for name, make, deform, samples_per_ray in self.CASES:
            cage = make()
            state = cages.twist_state(cage, rate=0.12, bend=0.04) if deform else None
            bvh = build_bvh(cage, state)
            verts = cage.rest_vertices if state is None else state.vertices
            lo = verts.min(0) - 0.15 * (verts.max(0) - verts.min(0))
            hi = verts.max(0) + 0.15 * (verts.max(0) - verts.min(0))
            diam = float(np.linalg.norm(hi - lo))
            rng = np.random.default_rng(hash(name) % 2**32)

            # point location: 10^4 random points vs brute force
            pts = rng.uniform(lo, hi, (10_000, 3))
            got = locate_points(bvh, pts, seed=3)
            want = locate_points_bruteforce(cage, pts, state)
            keep = self._far_from_faces(cage, state, pts, want, 1e-9 * diam)
            agree = (got[keep] == want[keep]).mean()
            assert agree == 1.0, f"{name}: locate agreement {agree:.6f}"
            total_pts += int(keep.sum())

            # ray segmentation: per-sample classification vs brute force
            n_rays = 10_000
            origins = rng.uniform(lo, hi, (n_rays, 3))
            dirs = _random_dirs(rng, n_rays)
            t_hi = 1.2 * diam
            batch = segment_rays(bvh, origins, dirs, 0.0, t_hi)
            ts = (np.arange(samples_per_ray) + 0.5) / samples_per_ray * t_hi
            seg_ray = np.repeat(np.arange(n_rays), np.diff(batch.offsets))
            # classify every sample of every ray in one pass
            norm_exit = batch.t_exit / t_hi + 2.0 * seg_ray
            q = (ts[None, :] / t_hi) + 2.0 * np.arange(n_rays)[:, None]
            pos = np.searchsorted(norm_exit, q.ravel(), side="left")
            counts = np.diff(batch.offsets)
            rows = np.repeat(np.arange(n_rays), samples_per_ray)
            pos = np.clip(pos, batch.offsets[:-1][rows],
                          np.maximum(batch.offsets[:-1][rows],
                                     batch.offsets[1:][rows] - 1))
            regions = batch.region[pos]
            t_flat = np.broadcast_to(ts, (n_rays, samples_per_ray)).ravel()
            boundary_dist = np.minimum(
                np.abs(t_flat - batch.t_enter[pos]), np.abs(batch.t_exit[pos] - t_flat)
            )
            keep = boundary_dist > 1e-9 * diam
            p = origins[rows] + t_flat[:, None] * dirs[rows]
            want = locate_points_bruteforce(cage, p[keep], state)
            agree = (regions[keep] == want).mean()
            assert agree == 1.0, f"{name}: segment agreement {agree:.6f}"
            total_samples += int(keep.sum())

        elapsed = time.monotonic() - t_start
        report(
            1,
            elapsed < 30.0,
            f"lookup == brute force on {len(self.CASES)} cages "
            f"({total_pts} points, {total_samples} ray samples, 100%) "
            f"in {elapsed:.1f}s (< 30s)",
        )

    @staticmethod
    def _far_from_faces(cage, state, pts, regions, eps):
        """Exclude interior points closer than eps to a face of their tet.

        Points outside all tets are kept: at 1e-9 x diameter the chance a
        random exterior point sits that close to the surface is ~1e-7.
        """
        keep = np.ones(len(pts), dtype=bool)
        inside = np.flatnonzero(regions >= 0)
        if not inside.size:
            return keep
        verts = cage.rest_vertices if state is None else state.vertices
        tets = cage.tets[regions[inside]]
        corners = verts[tets]  # (k, 4, 3)
        p = pts[inside]
        from cagevox.geometry import TET_FACES

        for f in range(4):
            tri = corners[:, TET_FACES[f]]
            n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
            dist = np.abs(np.einsum("ij,ij->i", p - tri[:, 0], n))
            keep[inside[dist < eps]] = False
        return keep


# ---------------------------------------------------------------------------
# 2. identity invariance


class TestCriterion2:
    def test_identity_matches_direct_render(self):
        t_start = time.monotonic()
        cage = cages.kuhn_grid_cage(2)
        field = scenes.two_box_field(view_dependent=True)
        scene = Scene.build(cage, cage.rest_state(), field, scenes.BACKGROUND, 0.05, 0)
        cam = scenes.look_at_camera((0.35, 0.8, -3.4), (0, 0, 0), width=128, height=128,
                                    near=1.4, far=6.2)
        cfg = RenderConfig(restrict_to_cage=False, eps_transmittance=0.0)
        through = render_image(scene, cam, cfg)
        direct = render_direct(field, cam, cfg, scenes.BACKGROUND)
        err = float(np.abs(through.rgb - direct.rgb).max())
        elapsed = time.monotonic() - t_start
        report(
            2,
            err < 1e-6 and elapsed < 10.0,
            f"identity cage render vs direct render: max channel error "
            f"{err:.2e} (< 1e-6) in {elapsed:.1f}s (< 10s)",
        )


# ---------------------------------------------------------------------------
# 3. rigid-motion reproduction (propeller-style at desk scale)


class TestCriterion3:
    def test_rotated_cage_matches_rotated_field(self):
        t_start = time.monotonic()
        cage = cages.kuhn_grid_cage(2)
        field = scenes.two_box_field()
        cfg = RenderConfig(restrict_to_cage=False, eps_transmittance=0.0)
        cams = [
            scenes.look_at_camera(pos, (0, 0, 0), width=128, height=128,
                                  near=1.4, far=6.5)
            for pos in [(0.3, 0.9, -3.4), (-3.3, 0.8, 0.6), (2.4, 1.3, 2.4),
                        (0.2, -3.2, -1.1)]
        ]
        worst = np.inf
        for angle in (np.pi / 4, np.pi / 2):
            r0 = cages.rot_z(angle)
            state = cages.rigid_state(cage, r0)
            scene = Scene.build(cage, state, field, scenes.BACKGROUND, 0.05, 0)
            rotated = TransformedField(field, r0)
            for cam in cams:
                through = render_image(scene, cam, cfg)
                direct = render_direct(rotated, cam, cfg, scenes.BACKGROUND)
                worst = min(worst, psnr(through.rgb, direct.rgb))
        elapsed = time.monotonic() - t_start
        report(
            3,
            worst > 40.0 and elapsed < 120.0,
            f"45/90 degree cage spins vs analytically rotated field: worst PSNR "
            f"{worst:.1f} dB (> 40) over 4 cameras x 2 angles in {elapsed:.0f}s (< 2min)",
        )


# ---------------------------------------------------------------------------
# 4. rotation-field correctness (view-direction handling)


class TestCriterion4:
    def test_global_rotation_recovered_per_tet(self):
        cage = cages.cage_2000()
        r0 = cages.rot_axis([0.3, 1.0, 0.2], 0.77)
        state = cages.rigid_state(cage, r0, (0.4, -0.2, 0.1))
        worst = 0.0
        for rho in (0.05, 1.0):
            field = RotationFieldBuilder(cage, rho, seed=5).build(state)
            err = float(np.linalg.norm(field.rotations - r0, axis=(1, 2)).max())
            worst = max(worst, err)
        self.__class__._frob = worst
        assert worst < 1e-6

    def test_view_dependent_render_matches_counter_rotated_camera(self):
        t_start = time.monotonic()
        cage = cages.kuhn_grid_cage(2)
        field = scenes.two_box_field(view_dependent=True)
        angle = 0.65
        r0 = cages.rot_axis([0.2, 0.3, 1.0], angle)
        state = cages.rigid_state(cage, r0)
        scene = Scene.build(cage, state, field, scenes.BACKGROUND, 0.05, 0)
        cfg = RenderConfig(restrict_to_cage=False, eps_transmittance=0.0)
        worst = np.inf
        for pos in [(0.4, 0.9, -3.3), (-2.9, 1.0, 1.4)]:
            cam = scenes.look_at_camera(pos, (0, 0, 0), width=128, height=128,
                                        near=1.4, far=6.2)
            through = render_image(scene, cam, cfg)
            # counter-rotated camera: same rays expressed in canonical space
            pose = np.hstack([r0.T @ cam.pose[:, :3], (r0.T @ cam.pose[:, 3])[:, None]])
            counter = replace_camera(cam, pose)
            direct = render_direct(field, counter, cfg, scenes.BACKGROUND)
            worst = min(worst, psnr(through.rgb, direct.rgb))
        elapsed = time.monotonic() - t_start
        frob = getattr(self.__class__, "_frob", float("nan"))
        report(
            4,
            worst > 35.0,
            f"rotation field: global rotation recovered to {frob:.1e} Frobenius "
            f"(< 1e-6) for rho in {{0.05, 1.0}}; specular render vs "
            f"counter-rotated camera PSNR {worst:.1f} dB (> 35) in {elapsed:.0f}s",
        )


def replace_camera(cam, pose):
    from cagevox.render import Camera

    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width,
                  height=cam.height, pose=pose, near=cam.near, far=cam.far)


# ---------------------------------------------------------------------------
# 5. hierarchical sampling fix


class TestCriterion5:
    def test_spike_profile_bin_coverage(self):
        n_c, n_f, trials = 128, 64, 10_000
        k = 61
        t = np.broadcast_to(np.linspace(1.0, 5.0, n_c), (trials, n_c))
        w = np.zeros((trials, n_c))
        w[:, k] = 1.0
        from cagevox import rng as crng

        u = crng.uniforms(99, 7, np.arange(trials), n_f)
        h = t[0, 1] - t[0, 0]
        edges = (t[0, k - 1] - h / 2, t[0, k - 1] + h / 2, t[0, k] + h / 2,
                 t[0, k + 1] + h / 2)

        out_nerf = fine_sample(t, w, n_f, MODE_NERF, u, 1.0, 5.0)
        out_ext = fine_sample(t, w, n_f, MODE_EXTENDED, u, 1.0, 5.0)

        def bin_count(out, lo, hi):
            return int(((out > lo) & (out <= hi)).sum())

        # adjacent bins (k-1 and k+1, sample-centred) for both modes
        nerf_prev = bin_count(out_nerf, edges[0], edges[1])
        nerf_next = bin_count(out_nerf, edges[2], edges[3])
        ext_prev = bin_count(out_ext, edges[0], edges[1])
        ext_next = bin_count(out_ext, edges[2], edges[3])

        n_draws = trials * n_f
        assert nerf_prev == 0 and nerf_next == 0, "reference mode must clip neighbours"
        # extended mode: each adjacent bin needs >= 1 expected sample per
        # trial, i.e. rate clearly above 1/n_f; binomial test at p < 0.01
        p_prev = binomtest(ext_prev, n_draws, 1.0 / n_f, alternative="greater").pvalue
        p_next = binomtest(ext_next, n_draws, 1.0 / n_f, alternative="greater").pvalue
        assert ext_prev >= trials and ext_next >= trials
        assert p_prev < 0.01 and p_next < 0.01
        self.__class__._spike = (nerf_prev + nerf_next, ext_prev, ext_next)

    def test_extended_error_not_worse_on_box_scene(self):
        thick = 0.054
        z0 = 1.9072
        box = CompositeField(
            [ConstantBox(np.array([[-5, -5, z0], [5, 5, z0 + thick]]), 22.0,
                         (0.9, 0.6, 0.2))]
        )
        cam = scenes.look_at_camera((0.0, 0.0, -0.2), (0.03, 0.02, 1.0), width=16,
                                    height=16, fov_deg=25.0, near=1.0, far=5.0)
        ys, xs = np.mgrid[0:16, 0:16]
        o, d = cam.rays_for_pixels(xs.ravel() + 0.5, ys.ravel() + 0.5)
        refs = np.stack(
            [oracles.reference_ray_color(box, o[i], d[i], 1.0, 5.0, (0, 0, 0), n=4000)[0]
             for i in range(len(o))]
        )
        errs = {}
        for mode in (MODE_EXTENDED, MODE_NERF):
            cfg = RenderConfig(n_coarse=128, n_fine=64, mode=mode, jitter=True,
                               seed=11, eps_transmittance=0.0)
            fr = render_direct(box, cam, cfg, (0, 0, 0))
            errs[mode] = float(np.abs(fr.rgb.reshape(-1, 3) - refs).mean())
        spike = getattr(self.__class__, "_spike", ("?",) * 3)
        report(
            5,
            errs[MODE_EXTENDED] <= errs[MODE_NERF],
            f"sampler fix: nerf mode put {spike[0]} fine samples in bins adjacent "
            f"to a spike (clipping), extended put {spike[1]}/{spike[2]} over 1e4 "
            f"trials (binomial p < 0.01); thin-box error extended "
            f"{errs[MODE_EXTENDED]:.4f} <= nerf {errs[MODE_NERF]:.4f}",
        )


# ---------------------------------------------------------------------------
# 6. end-to-end gradient checks


class TestCriterion6:
    def test_gradients_match_finite_differences(self):
        t_start = time.monotonic()
        rng = np.random.default_rng(13)
        cage, shell_region = _cavity_cage_with_mouth()
        state = DeformedState.for_cage(
            cage, cage.rest_vertices, (shell_region.posed(affine.identity(),
                                                          affine.identity()),)
        )
        voxel = VoxelField.zeros((16, 16, 16), [[-1, -1, -1], [1, 1, 1]], lmax=1)
        voxel.density_raw[:] = rng.normal(-0.5, 0.6, voxel.density_raw.shape)
        voxel.sh[:] = rng.normal(0.0, 0.4, voxel.sh.shape)

        cams = [
            scenes.look_at_camera(pos, (0, 0, 0), width=12, height=12, near=1.2,
                                  far=5.6)
            for pos in [(3.1, 0.6, 0.4), (-1.2, 1.0, -2.9)]
        ]
        images = [np.full((12, 12, 3), 0.45) for _ in cams]
        masks = [rng.uniform(size=(12, 12)) < 0.5 for _ in cams]
        train = TrainSet(images=images, cameras=cams, masks=masks,
                         states=[state, state])
        cfg = LossConfig(lambda_outer=1e-4, lambda_gap=2e-6, rays_per_batch=48)
        # single-stage sampling: fine-sample placement is stop-gradient
        render_cfg = RenderConfig(n_coarse=40, n_fine=1, mode=MODE_SINGLE,
                                  restrict_to_cage=False, eps_transmittance=0.0,
                                  seed=2)
        scenes_list = []
        for st in train.states:
            scenes_list.append(
                Scene.build(cage, st, voxel, scenes.BACKGROUND, 0.05, 0)
            )
        img_of, pix_of = draw_batch(train.cameras, 48, seed=21, iteration=0)

        losses, gd, gs = loss_and_gradients(
            voxel, cage, train, scenes_list, cfg, render_cfg, scenes.BACKGROUND,
            img_of, pix_of,
        )
        assert losses["sparsity_outer"] > 0, "outer sparsity term must be active"
        assert losses["sparsity_gap"] > 0, "gap sparsity term must be active"

        def total():
            l, _, _ = loss_and_gradients(
                voxel, cage, train, scenes_list, cfg, render_cfg, scenes.BACKGROUND,
                img_of, pix_of,
            )
            return l["total"]

        step = 1e-3
        checked = 0
        worst = 0.0
        params = [(voxel.density_raw, gd, np.argwhere(gd != 0))]
        params.append((voxel.sh, gs, np.argwhere(gs != 0)))
        for grid, grad, touched in params:
            rng.shuffle(touched)
            for idx in touched[:10]:
                idx = tuple(idx)
                orig = grid[idx]
                grid[idx] = orig + step
                up = total()
                grid[idx] = orig - step
                dn = total()
                grid[idx] = orig
                fd = (up - dn) / (2 * step)
                rel = abs(fd - grad[idx]) / max(abs(fd), 1e-9)
                worst = max(worst, rel)
                checked += 1
        elapsed = time.monotonic() - t_start
        report(
            6,
            checked >= 20 and worst < 1e-3 and elapsed < 60.0,
            f"RGB + sparsity(1e-4, 2e-6) gradients vs central differences on "
            f"{checked} params of a 16^3 field: worst rel err {worst:.2e} (< 1e-3) "
            f"in {elapsed:.0f}s (< 1min)",
        )


def _cavity_cage_with_mouth():
    """A 3x3x3 grid cage with the central cell removed; a plane-split shell
    fills the cavity (model of the mouth-interior construction)."""
    full = cages.kuhn_grid_cage(3)
    centroids = full.rest_vertices[full.tets].mean(axis=1)
    inside = np.all(np.abs(centroids) < 1.0 / 3.0, axis=1)
    cage = cages.TetCage.from_arrays(full.rest_vertices, full.tets[~inside])
    shell_v, shell_f = cages.box_shell((-0.30, -0.30, -0.30), (0.30, 0.30, 0.30))
    region = PlaneSplitRegion.create(
        "mouth", shell_v, shell_f,
        plane_top=[[0, 0, 0.08], [0, 0, 1]],
        plane_bottom=[[0, 0, -0.08], [0, 0, 1]],
        gap_color=(0.2, 0.05, 0.05),
    )
    return cage, region


# ---------------------------------------------------------------------------
# 7. fit self-consistency


@pytest.mark.slow
class TestCriterion7:
    def test_fit_reaches_heldout_psnr_and_sparsity_reduces_background(self):
        t_start = time.monotonic()
        cage = cages.kuhn_grid_cage(1)
        field = scenes.blob_field()
        cams = [
            scenes.look_at_camera(
                (3.2 * np.cos(2 * np.pi * i / 4), 0.9, 3.2 * np.sin(2 * np.pi * i / 4)),
                (0, 0, 0), width=64, height=64, near=1.2, far=5.5)
            for i in range(4)
        ]
        hold = scenes.look_at_camera((1.8, 2.4, -1.9), (0, 0, 0), width=64, height=64,
                                     near=1.2, far=5.5)
        rc_target = RenderConfig(n_coarse=96, n_fine=48, seed=3)
        images = [render_direct(field, c, rc_target, scenes.BACKGROUND).rgb
                  for c in cams]
        want_hold = render_direct(field, hold, rc_target, scenes.BACKGROUND).rgb

        voxel = VoxelField.zeros((32, 32, 32), [[-1, -1, -1], [1, 1, 1]], lmax=0)
        train = TrainSet(images=images, cameras=cams)
        cfg = LossConfig(iterations=2000, rays_per_batch=1024, lr=1e-2,
                         lambda_outer=0.0, lambda_gap=0.0)
        fit(voxel, cage, train, cfg, seed=0,
            render_cfg=RenderConfig(n_coarse=48, n_fine=24, seed=7),
            background=scenes.BACKGROUND)
        got_hold = render_direct(voxel, hold, rc_target, scenes.BACKGROUND).rgb
        heldout = psnr(got_hold, want_hold)

        # background sparsity: masks mark pixels where the target shows only
        # background; compare mean density along those rays with/without it
        masks = [np.all(np.abs(img - scenes.BACKGROUND) < 2e-2, axis=2)
                 for img in images]
        train_m = TrainSet(images=images, cameras=cams, masks=masks)
        dens = {}
        for lam in (1e-4, 0.0):
            v = VoxelField.zeros((16, 16, 16), [[-1, -1, -1], [1, 1, 1]], lmax=0)
            v.density_raw[:] = 0.0  # start with visible density everywhere
            fit(v, cage, train_m,
                LossConfig(iterations=400, rays_per_batch=512, lr=1e-2,
                           lambda_outer=lam, lambda_gap=0.0),
                seed=1, render_cfg=RenderConfig(n_coarse=48, n_fine=24, seed=9),
                background=scenes.BACKGROUND)
            dens[lam] = self._mean_background_density(v, cage, train_m)
        elapsed = time.monotonic() - t_start
        report(
            7,
            heldout > 30.0 and dens[1e-4] < dens[0.0] and elapsed < 600.0,
            f"32^3 fit from 4 views: held-out PSNR {heldout:.2f} dB (> 30); "
            f"background density {dens[1e-4]:.4f} (sparsity on) < {dens[0.0]:.4f} "
            f"(off); total {elapsed:.0f}s (< 10min)",
        )

    @staticmethod
    def _mean_background_density(voxel, cage, train):
        from cagevox.render import _ChunkRenderer

        total, count = 0.0, 0
        cfg = RenderConfig(n_coarse=48, n_fine=1, mode=MODE_SINGLE,
                           restrict_to_cage=False, eps_transmittance=0.0, seed=9)
        for img, cam, mask in zip(train.images, train.cameras, train.masks):
            pix = np.flatnonzero(mask.ravel())[:400]
            xs = (pix % cam.width) + 0.5
            ys = (pix // cam.width) + 0.5
            o, d = cam.rays_for_pixels(xs, ys)
            scene = Scene.build(cage, cage.rest_state(), voxel, scenes.BACKGROUND,
                                0.05, 0)
            r = _ChunkRenderer(scene, cfg, cam.near, cam.far)
            _, _, _, cache = r.render(o, d, pix.astype(np.uint64), True)
            from cagevox.deform import KIND_TET

            sel = cache["kind"] == KIND_TET
            total += float(cache["sigma"][sel].sum())
            count += int(sel.sum())
        return total / max(count, 1)


# ---------------------------------------------------------------------------
# 8. emission-absorption quadrature on a constant slab


class TestCriterion8:
    Z0, Z1 = 0.2731, 1.2731
    SIGMA = 1.0

    def _reference(self, cam):
        ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
        o, d = cam.rays_for_pixels(xs.ravel() + 0.5, ys.ravel() + 0.5)
        t0 = (self.Z0 - o[:, 2]) / d[:, 2]
        t1 = (self.Z1 - o[:, 2]) / d[:, 2]
        L = np.maximum(np.clip(t1, cam.near, cam.far) - np.clip(t0, cam.near, cam.far), 0.0)
        return 1.0 - np.exp(-self.SIGMA * L)

    def test_slab_opacity_and_first_order_convergence(self):
        slab = CompositeField(
            [ConstantBox(np.array([[-5, -5, self.Z0], [5, 5, self.Z1]]), self.SIGMA,
                         (1, 1, 1))]
        )
        # uniform samples, tight near/far bracket: absolute bound at N_c=128
        cam_tight = scenes.look_at_camera((0, 0, -0.5), (0, 0, 1.0), width=16,
                                          height=16, fov_deg=2.0, near=0.7231,
                                          far=1.8231)
        ref = self._reference(cam_tight)
        cfg = RenderConfig(n_coarse=128, n_fine=1, mode=MODE_SINGLE, jitter=False,
                           eps_transmittance=0.0)
        fr = render_direct(slab, cam_tight, cfg, (0, 0, 0))
        err128 = float(np.abs(fr.opacity.ravel() - ref).max())
        assert err128 < 5e-3

        # stratified samples at oblique angles: mean error halves per doubling
        cam_wide = scenes.look_at_camera((0.1, 0.15, -0.3), (0.02, -0.05, 0.6),
                                         width=16, height=16, near=0.35, far=1.95)
        ref_w = self._reference(cam_wide)
        means = []
        for n_c in (128, 256, 512, 1024):
            cfg = RenderConfig(n_coarse=n_c, n_fine=1, mode=MODE_SINGLE, jitter=True,
                               seed=5, eps_transmittance=0.0)
            fr = render_direct(slab, cam_wide, cfg, (0, 0, 0))
            means.append(float(np.abs(fr.opacity.ravel() - ref_w).mean()))
        ratios = [means[i + 1] / means[i] for i in range(3)]
        report(
            8,
            err128 < 5e-3 and all(r <= 0.62 for r in ratios),
            f"slab opacity at N_c=128 within {err128:.2e} (< 5e-3) of 1-exp(-sL); "
            f"mean error per doubling x{ratios[0]:.2f}, x{ratios[1]:.2f}, "
            f"x{ratios[2]:.2f} (halves, <= 0.62 each)",
        )


# ---------------------------------------------------------------------------
# 9. performance smoke (engineering floor, not a paper claim)


class TestCriterion9:
    def test_classification_throughput_and_frame_time(self):
        from cagevox.deform import map_points
        from cagevox.render import _classify_samples
        import multiprocessing

        cage = cages.cage_2000()
        state = cages.twist_state(cage, rate=0.15, bend=0.05)
        scene = Scene.build(cage, state, scenes.two_box_field(), scenes.BACKGROUND,
                            0.05, 0)
        rng = np.random.default_rng(0)
        n_rays, n_s = 16384, 128  # rendering workload: default coarse count per ray
        o = rng.uniform(-1.4, 1.4, (n_rays, 3))
        o[:, 2] = -3.0
        d = rng.standard_normal((n_rays, 3))
        d[:, 2] = np.abs(d[:, 2]) + 2.0
        d /= np.linalg.norm(d, axis=1, keepdims=True)

        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            segs = segment_rays(scene.bvh, o, d, 0.5, 6.0)
            t = np.broadcast_to(0.5 + ((np.arange(n_s) + 0.5) / n_s) * 5.5,
                                (n_rays, n_s)).copy()
            seg_idx = _classify_samples(segs, n_rays, t, 0.5, 6.0)
            codes = segs.region[seg_idx]
            p = o[:, None, :] + t[:, :, None] * d[:, None, :]
            map_points(cage, state, codes.ravel(), p.reshape(-1, 3))
            best = min(best, time.perf_counter() - t0)
        throughput = n_rays * n_s / best
        assert throughput >= 1e6, f"throughput {throughput/1e6:.2f}M/s < 1M/s"

        cam = scenes.look_at_camera((0.4, 1.0, -3.4), (0, 0, -0.1), width=256,
                                    height=256, near=1.0, far=7.0)
        cfg = RenderConfig()
        render_image(scene, cam, cfg, threads=8)  # warm-up
        t0 = time.perf_counter()
        render_image(scene, cam, cfg, threads=8)
        frame_s = time.perf_counter() - t0
        cores = multiprocessing.cpu_count()
        report(
            9,
            frame_s < 2.0,
            f"segment+map throughput {throughput/1e6:.2f}M samples/s/thread "
            f"(>= 1M); 256x256 frame at 8 requested workers: {frame_s:.2f}s "
            f"(< 2s target; host has {cores} cores)",
        )


# ---------------------------------------------------------------------------
# 10. determinism across runs and worker counts


class TestCriterion10:
    def test_byte_stability(self):
        cage = cages.kuhn_grid_cage(2)
        state = cages.twist_state(cage, rate=0.2)
        field = scenes.two_box_field(view_dependent=True)
        scene = Scene.build(cage, state, field, scenes.BACKGROUND, 0.05, 0)
        cam = scenes.look_at_camera((0.3, 0.9, -3.3), (0, 0, 0), width=48, height=48,
                                    near=1.2, far=6.4)
        cfg = RenderConfig(n_coarse=48, n_fine=24, chunk_size=256)
        frames = [render_image(scene, cam, cfg, threads=th) for th in (1, 1, 8)]
        render_ok = all(
            f.rgb.tobytes() == frames[0].rgb.tobytes()
            and f.opacity.tobytes() == frames[0].opacity.tobytes()
            and f.depth.tobytes() == frames[0].depth.tobytes()
            for f in frames
        )

        rng = np.random.default_rng(4)
        pts = rng.uniform(-1.2, 1.2, (2000, 3))
        loc_ok = (
            locate_points(scene.bvh, pts, seed=9).tobytes()
            == locate_points(scene.bvh, pts, seed=9).tobytes()
        )

        t = np.broadcast_to(np.linspace(1, 5, 64), (16, 64))
        w = rng.uniform(0, 1, (16, 64))
        u = rng.uniform(0, 1, (16, 32))
        fine_ok = (
            fine_sample(t, w, 32, MODE_EXTENDED, u, 1.0, 5.0).tobytes()
            == fine_sample(t, w, 32, MODE_EXTENDED, u, 1.0, 5.0).tobytes()
        )

        voxel = VoxelField.zeros((8, 8, 8), [[-1, -1, -1], [1, 1, 1]], lmax=0)
        cams = [scenes.look_at_camera((3.0, 0.8, 0.2), (0, 0, 0), width=16,
                                      height=16, near=1.2, far=5.5)]
        train = TrainSet(images=[np.full((16, 16, 3), 0.4)], cameras=cams)
        cfg_l = LossConfig(rays_per_batch=64)
        rc = RenderConfig(n_coarse=24, n_fine=12, restrict_to_cage=False,
                          eps_transmittance=0.0)
        sc = build_training_scenes(voxel, cage, train, scenes.BACKGROUND)
        img_of, pix_of = draw_batch(train.cameras, 64, seed=3, iteration=0)
        g1 = loss_and_gradients(voxel, cage, train, sc, cfg_l, rc, scenes.BACKGROUND,
                                img_of, pix_of)
        g2 = loss_and_gradients(voxel, cage, train, sc, cfg_l, rc, scenes.BACKGROUND,
                                img_of, pix_of)
        grad_ok = (
            g1[0] == g2[0]
            and g1[1].tobytes() == g2[1].tobytes()
            and g1[2].tobytes() == g2[2].tobytes()
        )

        report(
            10,
            render_ok and loc_ok and fine_ok and grad_ok,
            "byte-stable: renders across reruns and worker counts, point "
            "location, fine sampling, and fit gradients",
        )
