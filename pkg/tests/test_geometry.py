import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localtb.geometry import (
    BoundaryCollar,
    Cube,
    GoodBadParams,
    GridPartition,
    GridRangeError,
    alpha_generation,
    bad_generations,
    boundary_collar,
    build_grid,
    cube_distance,
    is_good,
    lattice_skeleton_distance,
    long_distance,
    random_grid,
    skeleton_distance,
)


def all_cubes(grid, g):
    for idx in itertools.product(range(2**g), repeat=grid.dimension):
        yield Cube(grid, g, idx)


def brute_alpha(Q, other, p, k_max):
    # exhaustive scan: smallest k whose scale range contains no bad S
    for k in range(p.r, k_max + 1):
        scale = 2.0**k * Q.side
        bad = False
        for h in range(other.depth + 1):
            if other.side(h) < scale:
                continue
            thr = Q.side**p.gamma * other.side(h) ** (1 - p.gamma)
            if any(skeleton_distance(Q, S) <= thr for S in all_cubes(other, h)):
                bad = True
                break
        if not bad:
            return k
    return None


class TestBuildGrid:
    def test_one_dimensional_root_and_sides(self):
        G = build_grid(0, 3, 3, 1)
        assert G.lower.tolist() == [-8.0] and G.upper.tolist() == [8.0]
        assert [G.side(g) for g in range(4)] == [16.0, 8.0, 4.0, 2.0]

    def test_translated_square(self):
        G = build_grid((2, -2), 3, 1, 2)
        assert G.lower.tolist() == [-6.0, -10.0]
        assert G.upper.tolist() == [10.0, 6.0]

    def test_shift_out_of_box(self):
        with pytest.raises(GridRangeError):
            build_grid(5, 3, 3, 1)

    def test_depth_must_be_positive(self):
        with pytest.raises(ValueError):
            build_grid(0, 3, 0, 1)

    def test_random_grid_shift_in_box(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            G = random_grid(rng, 2, 4, 2)
            assert all(abs(s) <= 2.0 for s in G.shift)


class TestCube:
    def test_children_partition_parent(self):
        G = build_grid((0.25, -0.5), 1, 4, 2)
        rng = np.random.default_rng(0)
        pts = G.lower + rng.random((400, 2)) * G.root_side
        for Q in [G.root(), Cube(G, 2, (1, 3))]:
            inside = Q.contains_points(pts)
            hits = np.sum([c.contains_points(pts) for c in Q.children()], axis=0)
            assert np.array_equal(hits, inside.astype(int))
            for c in Q.children():
                assert c.side * 2 == Q.side and c.parent() == Q

    def test_ancestor(self):
        G = build_grid(0, 2, 6, 1)
        Q = Cube(G, 5, (21,))
        assert Q.ancestor(3) == Q.parent().parent().parent()
        with pytest.raises(ValueError):
            Q.ancestor(6)


class TestSkeletonDistance:
    def setup_method(self):
        self.G = build_grid(0, 0, 6, 1)  # root [-1, 1)
        self.unit = Cube(build_grid(0, 0, 3, 1), 1, (1,))  # [0, 1)

    def test_worked_example(self):
        Q = Cube(self.G, 4, (10,))  # [0.25, 0.375)
        assert Q.lower[0] == 0.25 and Q.upper[0] == 0.375
        assert skeleton_distance(Q, self.unit) == 0.125

    def test_touching_child_boundary(self):
        Q = Cube(self.G, 4, (11,))  # [0.375, 0.5)
        assert skeleton_distance(Q, self.unit) == 0.0

    def test_child_of_s(self):
        for c in self.unit.children():
            assert skeleton_distance(c, self.unit) == 0.0

    def test_outside(self):
        Q = Cube(self.G, 3, (1,))  # [-0.75, -0.5)
        assert skeleton_distance(Q, self.unit) == 0.5

    def test_lattice_version_matches_enumeration_2d(self):
        rng = np.random.default_rng(11)
        other = random_grid(rng, 1, 3, 2)
        G = random_grid(rng, 1, 5, 2)
        for _ in range(40):
            g = int(rng.integers(2, 6))
            Q = Cube(G, g, tuple(int(i) for i in rng.integers(0, 2**g, 2)))
            for h in range(other.depth + 1):
                brute = min(skeleton_distance(Q, S) for S in all_cubes(other, h))
                fast = lattice_skeleton_distance(Q.lower[None], Q.upper[None], other, h)[0]
                assert fast == pytest.approx(brute, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 63), st.integers(-64, 64))
    def test_one_lipschitz_under_translation(self, k, t):
        G = build_grid(0, 0, 6, 1)
        Q = Cube(G, 6, (k,))
        G2 = build_grid(t / 256.0, 0, 6, 1)
        Q2 = Cube(G2, 6, (k,))
        S = self.unit
        assert abs(skeleton_distance(Q, S) - skeleton_distance(Q2, S)) <= abs(t / 256.0) + 1e-15


class TestGoodBad:
    def test_worked_example_is_bad(self):
        Q = Cube(build_grid(0, 0, 6, 1), 4, (10,))
        other = build_grid(0, 0, 3, 1)
        p = GoodBadParams(0.25, 0)
        assert 0.125 <= (1 / 8) ** 0.25
        assert not is_good(Q, other, 1.0, p)

    def test_equality_counts_as_bad(self):
        other = build_grid(0, 3, 2, 1)  # root [-8, 8), root skeleton {-8, 0, 8}
        Q = Cube(build_grid(0, 4, 9, 1), 9, (448,))  # [12, 12.0625), 4 away from 8
        assert skeleton_distance(Q, other.root()) == 4.0
        assert Q.side**0.25 * other.root_side**0.75 == 4.0
        assert not is_good(Q, other, 16.0, GoodBadParams(0.25, 0))
        assert is_good(Q, other, 16.0, GoodBadParams(0.3, 0))

    def test_vacuous_when_scale_exceeds_root(self):
        Q = Cube(build_grid(0, 0, 6, 1), 4, (10,))
        assert is_good(Q, build_grid(0, 0, 3, 1), 4.0, GoodBadParams(0.25, 0))

    def test_from_kernel(self):
        assert GoodBadParams.from_kernel(1, 1, 3).gamma == 0.25
        with pytest.raises(ValueError):
            GoodBadParams(0.5, 1)

    def test_alpha_returns_r_when_good_everywhere(self):
        other = build_grid(0, 2, 2, 1)  # skeleton points: integers in [-4, 4]
        Q = Cube(build_grid(0, 2, 8, 1), 8, (80,))  # [-1.5, -1.46875)
        p = GoodBadParams(0.45, 1)
        assert alpha_generation(Q, other, p, 12) == 1
        assert brute_alpha(Q, other, p, 12) == 1

    def test_alpha_none_when_always_bad(self):
        G = build_grid(0, 0, 6, 1)
        Q = Cube(G, 1, (1,))  # [0, 1) touches the skeleton of the same grid
        assert alpha_generation(Q, G, GoodBadParams(0.25, 0), 1) is None

    def test_alpha_matches_exhaustive_scan(self):
        rng = np.random.default_rng(5)
        for trial in range(60):
            dim = 1 if trial % 3 else 2
            other = random_grid(rng, 1, 5 if dim == 1 else 3, dim)
            G = random_grid(rng, 1, 6, dim)
            g = int(rng.integers(3, 7))
            Q = Cube(G, g, tuple(int(i) for i in rng.integers(0, 2**g, dim)))
            p = GoodBadParams(float(rng.uniform(0.05, 0.45)), int(rng.integers(0, 3)))
            k_max = p.r + int(rng.integers(0, 8))
            assert alpha_generation(Q, other, p, k_max) == brute_alpha(Q, other, p, k_max)

    def test_bad_table_shape_and_monotone_goodness(self):
        rng = np.random.default_rng(8)
        other = random_grid(rng, 1, 5, 1)
        G = random_grid(rng, 1, 7, 1)
        p = GoodBadParams(0.25, 0)
        for _ in range(30):
            Q = Cube(G, 7, (int(rng.integers(0, 128)),))
            tbl = bad_generations(Q.lower[None], Q.upper[None], other, 0.25)
            assert tbl.shape == (1, 6)
            scales = [other.side(h) for h in range(6)]
            verdict = [is_good(Q, other, a, p) for a in sorted(scales)]
            # good at scale A implies good at every larger scale
            first = verdict.index(True) if True in verdict else len(verdict)
            assert all(verdict[first:])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 127), st.integers(-32, 32), st.sampled_from([0.1, 0.25, 0.4]))
    def test_translation_invariance(self, k, t, gamma):
        p = GoodBadParams(gamma, 0)
        dt = t / 64.0
        G, other = build_grid(0.125, 1, 7, 1), build_grid(-0.375, 1, 4, 1)
        Gt, othert = build_grid(0.125 + dt, 1, 7, 1), build_grid(-0.375 + dt, 1, 4, 1)
        for A in (0.5, 1.0, 4.0):
            assert is_good(Cube(G, 7, (k,)), other, A, p) == is_good(Cube(Gt, 7, (k,)), othert, A, p)


class TestDistances:
    def test_long_distance_example(self):
        G = build_grid(0, 0, 4, 1)
        Q, R = Cube(G, 3, (4,)), Cube(G, 1, (1,))  # [0, .25), [0, 1)
        R2 = Cube(build_grid(0, 0, 4, 1), 2, (3,))  # [0.5, 1)
        assert long_distance(Q, R2) == 1.0
        assert long_distance(Q, R) == Q.side + R.side
        assert long_distance(R2, Q) == long_distance(Q, R2)

    def test_cube_distance_2d(self):
        G = build_grid((0, 0), 1, 2, 2)
        a, b = Cube(G, 2, (0, 0)), Cube(G, 2, (2, 3))
        assert cube_distance(a, b) == pytest.approx(math.hypot(1.0, 2.0))


class TestCollar:
    def test_worked_example(self):
        G = build_grid(0, 0, 3, 1)  # generation 1 has side 1
        collar = boundary_collar(G, 1, 0.1)
        assert collar(np.array([[0.05]]))[0]
        assert not collar(np.array([[0.5]]))[0]

    def test_zero_sigma_is_empty_off_skeleton(self):
        G = build_grid(0, 0, 3, 1)
        pts = np.array([[0.3], [0.7], [-0.2]])
        assert not boundary_collar(G, 2, 0.0)(pts).any()

    def test_collar_monotone_in_sigma(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, (500, 2))
        G = random_grid(rng, 0, 4, 2)
        prev = np.zeros(500, bool)
        for s in (0.01, 0.05, 0.1, 0.3):
            cur = BoundaryCollar(G, 3, s)(pts)
            assert np.all(cur >= prev)
            prev = cur


class TestGridPartition:
    def test_partition_structure(self):
        rng = np.random.default_rng(2)
        G = random_grid(rng, 1, 5, 2)
        pts = rng.uniform(-3, 3, (300, 2))
        part = GridPartition(G, pts)
        assert np.array_equal(part.inside, G.inside(pts))
        for gid in range(part.n_cubes):
            Q = part.cube(gid)
            mask = part.atom_mask(gid)
            assert np.array_equal(mask, Q.contains_points(pts) & part.inside)
            kids = part.children(gid)
            if part.gen[gid] < part.depth:
                assert part.atom_count[kids].sum() == part.atom_count[gid]
                assert all(part.parent[k] == gid for k in kids)
            assert part.find(Q) == gid
