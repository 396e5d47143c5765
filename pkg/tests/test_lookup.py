import numpy as np
import pytest

import cages
import oracles
from cagevox import (
    OUTSIDE,
    build_bvh,
    locate_point,
    locate_points,
    locate_points_bruteforce,
    ray_hits,
    segment_ray,
    segment_rays,
)


def random_rays(rng, n, center, radius):
    origins = center + rng.uniform(-1, 1, (n, 3)) * radius * 2.0
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


class TestBvhBuild:
    def test_single_tet_is_one_leaf(self):
        bvh = build_bvh(cages.unit_tet_cage())
        assert len(bvh.node_left) == 1
        assert bvh.node_left[0] < 0
        assert bvh.leaf_count[0] == 4

    def test_every_face_in_exactly_one_leaf(self):
        bvh = build_bvh(cages.kuhn_grid_cage(3))
        leaves = np.flatnonzero(bvh.node_left < 0)
        seen = []
        for i in leaves:
            s, c = bvh.leaf_start[i], bvh.leaf_count[i]
            seen.extend(bvh.perm[s : s + c].tolist())
        assert sorted(seen) == list(range(len(bvh.tri_vidx)))

    def test_node_boxes_contain_triangles(self):
        bvh = build_bvh(cages.kuhn_grid_cage(2))
        tri = bvh.points[bvh.tri_vidx]
        for i in range(len(bvh.node_left)):
            faces = self._descendant_faces(bvh, i)
            lo = tri[faces].reshape(-1, 3).min(axis=0)
            hi = tri[faces].reshape(-1, 3).max(axis=0)
            assert (bvh.node_lo[i] <= lo + 1e-12).all()
            assert (bvh.node_hi[i] >= hi - 1e-12).all()

    @staticmethod
    def _descendant_faces(bvh, node):
        stack, out = [node], []
        while stack:
            i = stack.pop()
            if bvh.node_left[i] < 0:
                s, c = bvh.leaf_start[i], bvh.leaf_count[i]
                out.extend(bvh.perm[s : s + c].tolist())
            else:
                stack.extend([bvh.node_left[i], bvh.node_right[i]])
        return np.array(out)

    def test_ray_missing_all_boxes(self):
        bvh = build_bvh(cages.unit_tet_cage())
        assert ray_hits(bvh, [10, 10, 10], [1, 0, 0], 0, 100) == []


class TestRayHits:
    def test_axis_ray_through_unit_tet(self):
        bvh = build_bvh(cages.unit_tet_cage())
        hits = ray_hits(bvh, [-1, 0.2, 0.2], [1, 0, 0], 0.0, 10.0)
        assert len(hits) == 2
        assert hits[0].t == pytest.approx(1.0)
        assert hits[1].t == pytest.approx(1.6)
        assert hits[0].side == "front"  # origin outside, boundary normal outward
        assert hits[1].side == "back"

    def test_tangent_ray_outside(self):
        bvh = build_bvh(cages.unit_tet_cage())
        hits = ray_hits(bvh, [-1, -0.5, 0.2], [1, 0, 0], 0.0, 10.0)
        assert hits == []

    def test_sorted_and_range_respected(self):
        cage = cages.kuhn_grid_cage(3)
        bvh = build_bvh(cage)
        rng = np.random.default_rng(0)
        for _ in range(50):
            o, d = random_rays(rng, 1, np.zeros(3), 1.0)
            hits = ray_hits(bvh, o[0], d[0], 0.1, 2.5)
            ts = [h.t for h in hits]
            assert ts == sorted(ts)
            assert all(0.1 < t <= 2.5 for t in ts)

    def test_hit_set_matches_exhaustive_oracle(self):
        cage = cages.kuhn_grid_cage(4)  # 384 tets, ~1k faces
        state = cages.twist_state(cage)
        bvh = build_bvh(cage, state)
        rng = np.random.default_rng(42)
        origins, dirs = random_rays(rng, 1000, np.zeros(3), 1.2)
        for o, d in zip(origins, dirs):
            got = [(h.t, h.face_index) for h in ray_hits(bvh, o, d, 0.0, np.inf)]
            want = oracles.moller_trumbore_hits(
                bvh.points, bvh.tri_vidx, o, d, 0.0, np.inf
            )
            assert len(got) == len(want)
            for (tg, fg), (tw, fw) in zip(got, want):
                assert fg == fw
                assert tg == pytest.approx(tw, abs=1e-9)

    def test_near_edge_rays_watertight(self):
        # rays grazing arbitrarily close to shared edges never leak: the
        # count of boundary-face crossings stays even on both sides
        cage = cages.two_tet_cage()
        bvh = build_bvh(cage)
        boundary = set(np.flatnonzero(cage.faces.boundary_mask).tolist())
        mid = 0.5 * (cage.rest_vertices[1] + cage.rest_vertices[2])
        # perpendicular to the edge (and to every other edge the vertical
        # ray could graze), so the crossing is near but not exactly on it
        across = np.array([1.0, 0.0, 0.0])
        for off in (1e-12, 1e-10, 1e-7, -1e-12, -1e-10, -1e-7):
            o = mid + off * across + np.array([0.0, 0.0, 5.0])
            hits = ray_hits(bvh, o, [0.0, 0.0, -1.0], 0.0, 100.0)
            n_boundary = sum(h.face_index in boundary for h in hits)
            assert n_boundary % 2 == 0

    def test_exact_edge_ray_walks_consistently(self):
        # exactly through the edge shared by three faces: the walk must
        # still produce a chain ending outside
        cage = cages.two_tet_cage()
        bvh = build_bvh(cage)
        mid = 0.5 * (cage.rest_vertices[1] + cage.rest_vertices[2])
        o = mid + np.array([0.0, 0.0, 5.0])
        seg = segment_ray(bvh, o, np.array([0.0, 0.0, -1.0]), 0.0, 100.0)
        assert seg.region[0] == OUTSIDE
        assert seg.region[-1] == OUTSIDE
        assert (seg.t_exit >= seg.t_enter).all()


class TestLocatePoint:
    def test_centroid_of_each_tet(self):
        cage = cages.five_tet_cube()
        state = cages.twist_state(cage, rate=0.4)
        bvh = build_bvh(cage, state)
        centroids = state.vertices[cage.tets].mean(axis=1)
        got = locate_points(bvh, centroids)
        np.testing.assert_array_equal(got, np.arange(cage.num_tets))

    def test_outside_bounds(self):
        bvh = build_bvh(cages.unit_tet_cage())
        assert locate_point(bvh, [5.0, 5.0, 5.0]) is None

    def test_agrees_with_bruteforce_500_tets(self):
        cage = cages.kuhn_grid_cage(4)  # 384 tets
        state = cages.twist_state(cage)
        bvh = build_bvh(cage, state)
        rng = np.random.default_rng(11)
        pts = rng.uniform(-1.4, 1.4, (10_000, 3))
        got = locate_points(bvh, pts, seed=5)
        want = locate_points_bruteforce(cage, pts, state)
        assert (got == want).all()

    def test_deterministic_across_calls(self):
        cage = cages.kuhn_grid_cage(3)
        bvh = build_bvh(cage)
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1.2, 1.2, (500, 3))
        a = locate_points(bvh, pts, seed=9)
        b = locate_points(bvh, pts, seed=9)
        np.testing.assert_array_equal(a, b)


class TestSegmentRay:
    def test_single_tet_intervals(self):
        bvh = build_bvh(cages.unit_tet_cage())
        seg = segment_ray(bvh, [-1, 0.2, 0.2], [1, 0, 0], 0.0, 10.0)
        assert seg.region.tolist() == [OUTSIDE, 0, OUTSIDE]
        assert seg.t_enter[0] == 0.0
        assert seg.t_exit[-1] == 10.0
        assert seg.t_exit[0] == pytest.approx(1.0)
        assert seg.t_exit[1] == pytest.approx(1.6)

    def test_two_stacked_tets_share_interface_t(self):
        cage = cages.two_tet_cage()
        bvh = build_bvh(cage)
        # ray through both tets, crossing the shared face (1,2,3)
        o = np.array([0.2, 0.2, -1.0])
        d = np.array([0.15, 0.15, 1.0])
        d = d / np.linalg.norm(d)
        seg = segment_ray(bvh, o, d, 0.0, 10.0)
        tets = [r for r in seg.region if r >= 0]
        assert len(tets) == 2
        i = list(seg.region).index(tets[0])
        assert seg.t_exit[i] == seg.t_enter[i + 1]

    def test_segments_sorted_disjoint(self):
        cage = cages.kuhn_grid_cage(3)
        state = cages.twist_state(cage)
        bvh = build_bvh(cage, state)
        rng = np.random.default_rng(3)
        origins, dirs = random_rays(rng, 200, np.zeros(3), 1.2)
        batch = segment_rays(bvh, origins, dirs, 0.0, 8.0)
        for i in range(200):
            seg = batch.ray(i)
            assert (seg.t_exit > seg.t_enter).all()
            assert (seg.t_enter[1:] >= seg.t_exit[:-1] - 1e-12).all()

    def test_entry_exit_bary_reconstruct_endpoints(self):
        cage = cages.five_tet_cube()
        state = cages.twist_state(cage, rate=0.3)
        bvh = build_bvh(cage, state)
        o = np.array([-0.5, 0.4, 0.3])
        d = np.array([1.0, 0.1, 0.2])
        d = d / np.linalg.norm(d)
        seg = segment_ray(bvh, o, d, 0.0, 10.0)
        for i, r in enumerate(seg.region):
            if r < 0:
                continue
            verts = state.vertices[cage.tets[r]]
            p_in = seg.entry_bary[i] @ verts
            p_out = seg.exit_bary[i] @ verts
            np.testing.assert_allclose(p_in, o + seg.t_enter[i] * d, atol=1e-9)
            np.testing.assert_allclose(p_out, o + seg.t_exit[i] * d, atol=1e-9)

    def test_per_sample_region_matches_bruteforce(self):
        cage = cages.kuhn_grid_cage(4)  # 384 tets; spec example uses ~500
        state = cages.twist_state(cage)
        bvh = build_bvh(cage, state)
        rng = np.random.default_rng(17)
        origins, dirs = random_rays(rng, 1000, np.zeros(3), 1.3)
        t_lo, t_hi = 0.0, 6.0
        batch = segment_rays(bvh, origins, dirs, t_lo, t_hi)
        alphas = (np.arange(64) + 0.5) / 64
        diam = np.linalg.norm(bvh.points.max(0) - bvh.points.min(0))
        checked = 0
        for i in range(1000):
            seg = batch.ray(i)
            ts = t_lo + alphas * (t_hi - t_lo)
            idx = np.searchsorted(seg.t_exit, ts, side="left")
            idx = np.clip(idx, 0, len(seg.region) - 1)
            regions = seg.region[idx]
            pts = origins[i] + ts[:, None] * dirs[i]
            # skip samples closer than 1e-9 x diameter to a segment boundary
            dist = np.minimum(
                np.abs(ts - seg.t_enter[idx]), np.abs(seg.t_exit[idx] - ts)
            )
            keep = dist > 1e-9 * diam
            want = locate_points_bruteforce(cage, pts[keep], state)
            np.testing.assert_array_equal(regions[keep], want)
            checked += keep.sum()
        assert checked > 60_000

    def test_coverage_against_bruteforce(self):
        # union of tet segments == inside set reported by brute force
        cage = cages.five_tet_cube()
        state = cages.twist_state(cage, rate=0.2)
        bvh = build_bvh(cage, state)
        rng = np.random.default_rng(23)
        origins, dirs = random_rays(rng, 100, np.full(3, 0.5), 1.0)
        batch = segment_rays(bvh, origins, dirs, 0.0, 5.0)
        ts = np.linspace(0.01, 4.99, 300)
        for i in range(100):
            seg = batch.ray(i)
            pts = origins[i] + ts[:, None] * dirs[i]
            inside_bf = locate_points_bruteforce(cage, pts, state) != OUTSIDE
            covered = np.zeros(len(ts), dtype=bool)
            for r, t0, t1 in zip(seg.region, seg.t_enter, seg.t_exit):
                if r != OUTSIDE:
                    covered |= (ts >= t0 - 1e-7) & (ts <= t1 + 1e-7)
            near_boundary = np.zeros(len(ts), dtype=bool)
            for r, t0, t1 in zip(seg.region, seg.t_enter, seg.t_exit):
                near_boundary |= (np.abs(ts - t0) < 1e-6) | (np.abs(ts - t1) < 1e-6)
            ok = near_boundary | (covered == inside_bf)
            assert ok.all()

    def test_batch_equals_single(self):
        cage = cages.kuhn_grid_cage(2)
        bvh = build_bvh(cage)
        rng = np.random.default_rng(5)
        origins, dirs = random_rays(rng, 32, np.zeros(3), 1.2)
        batch = segment_rays(bvh, origins, dirs, 0.0, 6.0)
        for i in range(32):
            single = segment_ray(bvh, origins[i], dirs[i], 0.0, 6.0)
            np.testing.assert_array_equal(batch.ray(i).region, single.region)
            np.testing.assert_allclose(batch.ray(i).t_enter, single.t_enter)
            np.testing.assert_allclose(batch.ray(i).t_exit, single.t_exit)


class TestRefit:
    def test_small_motion_refits_large_rebuilds(self):
        cage = cages.kuhn_grid_cage(3)
        bvh = build_bvh(cage, cage.rest_state())
        tiny = cage.rest_vertices + 1e-4
        assert bvh.update(cages.DeformedState.for_cage(cage, tiny)) == "refit"
        big = cage.rest_vertices * 2.0
        assert bvh.update(cages.DeformedState.for_cage(cage, big)) == "rebuild"

    def test_refit_keeps_queries_exact(self):
        cage = cages.kuhn_grid_cage(3)
        state0 = cage.rest_state()
        bvh = build_bvh(cage, state0)
        moved = cage.rest_vertices + np.array([5e-3, -4e-3, 3e-3])
        state1 = cages.DeformedState.for_cage(cage, moved)
        assert bvh.update(state1) == "refit"
        fresh = build_bvh(cage, state1)
        rng = np.random.default_rng(8)
        pts = rng.uniform(-1.2, 1.2, (2000, 3))
        np.testing.assert_array_equal(
            locate_points(bvh, pts, seed=1), locate_points(fresh, pts, seed=1)
        )
