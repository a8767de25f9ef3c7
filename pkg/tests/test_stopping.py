import json

import numpy as np
import pytest

from localtb.czo import cauchy_kernel, discretize, riesz_kernel, zero_kernel
from localtb.geometry import Cube, GridPartition, build_grid, random_grid
from localtb.measure import DiscreteMeasure, average, centred_maximal, uniform_measure
from localtb.stopping import (
    ancestor,
    beta,
    build_stopping,
    check_carleson,
    check_decay,
    dump_tree,
)
from localtb.testfns import (
    FamilyStrategy,
    TestFunctionFamily,
    constants,
    make_family,
    random_custom_records,
)


def mesh_measure(seed, n, dim=1):
    # jittered mesh with random weights: bounded kernel blocks, non-doubling weights
    rng = np.random.default_rng(seed)
    base = uniform_measure(n, -1, 1, dim)
    h = base.r_min
    pts = base.points + rng.uniform(-0.3 * h, 0.3 * h, base.points.shape)
    return DiscreteMeasure(pts, rng.uniform(0.05, 2.0, base.n_atoms) * h**dim, float(dim), r_min=h)


def instance(seed, dim=1, depth=6, amplitude=1.0, kernel=None):
    rng = np.random.default_rng(seed)
    mu = mesh_measure(seed, 96 if dim == 1 else 12, dim)
    G = random_grid(rng, 0, depth, dim)
    part = GridPartition(G, mu.points)
    if amplitude is None:
        fam = make_family({"kind": "perturbed", "eta": 0.5, "seed": seed}, G, mu, part=part)
    else:
        recs = random_custom_records(part, amplitude, seed)
        fam = TestFunctionFamily(FamilyStrategy("custom", records=recs), G, mu, "T", part)
    k = kernel or (cauchy_kernel() if dim == 1 else riesz_kernel(2))
    op = discretize(k, mu)
    c = constants(fam, op)
    return fam, op, c


def conditions(fam, op, tree, F, gid):
    # direct evaluation with full-length functions and the full operator
    mu = fam.mu
    Q = fam.part.cube(gid)
    b = fam.b(F)
    Mb = centred_maximal(mu, b)
    Tb = op.apply(b) if fam.side == "T" else op.adjoint_apply(b)
    return (
        abs(average(mu, b, Q)) < 0.5,
        average(mu, Mb**2, Q) > 16 * tree.A**2 * tree.M_norm**2,
        average(mu, (Tb * fam.part.atom_mask(F)) ** 2, Q) > 16 * tree.A * tree.B,
    )


def brute_next_generation(fam, op, tree, F):
    part = fam.part
    viol = set()
    for gid in range(part.n_cubes):
        if part.gen[gid] <= part.gen[F] or part.ancestor_at(gid, int(part.gen[F])) != F:
            continue
        if any(conditions(fam, op, tree, F, gid)):
            viol.add(gid)
    # keep the maximal ones
    return {q for q in viol if not any(part.ancestor_at(q, int(part.gen[p])) == p for p in viol if p != q)}


class TestExamples:
    def test_trivial_tree(self):
        mu = uniform_measure(64, -1, 1)
        fam = make_family({"kind": "indicator"}, build_grid(0, 0, 6, 1), mu)
        op = discretize(zero_kernel(1, 1), mu)
        c = constants(fam, op)
        tree = build_stopping(fam, op, c.A, c.B)
        assert tree.stop_gids.tolist() == [0]
        assert check_decay(tree) == 0.0 and check_carleson(tree) == 1.0
        assert not tree.depth_capped

    def test_zero_on_a_child_stops_by_average(self, tmp_path):
        mu = uniform_measure(16, -1, 1)
        G = build_grid(0, 0, 4, 1)
        vals = {str(i): (2.0 if mu.points[i, 0] < 0 else 0.0) for i in range(16)}
        (tmp_path / "f.json").write_text(json.dumps([{"generation": 0, "index": [0], "values": vals}]))
        fam = make_family({"kind": "custom", "path": str(tmp_path / "f.json")}, G, mu)
        op = discretize(zero_kernel(1, 1), mu)
        c = constants(fam, op)
        tree = build_stopping(fam, op, c.A, c.B)
        right = fam.part.find(Cube(G, 1, (1,)))
        assert right in tree.level(1).tolist()
        k = tree.stop_gids.tolist().index(right)
        assert "avg" in tree.triggers[k]

    def test_decay_threshold_at_A_one(self):
        mu = uniform_measure(8, -1, 1)
        fam = make_family({"kind": "indicator"}, build_grid(0, 0, 3, 1), mu)
        tree = build_stopping(fam, discretize(zero_kernel(1, 1), mu), 1.0, 0.0)
        assert tree.tau == 7 / 8

    def test_two_generation_carleson(self, tmp_path):
        mu = uniform_measure(16, -1, 1)
        G = build_grid(0, 0, 4, 1)
        vals = {str(i): (2.0 if mu.points[i, 0] < 0 else 0.0) for i in range(16)}
        (tmp_path / "f.json").write_text(json.dumps([{"generation": 0, "index": [0], "values": vals}]))
        fam = make_family({"kind": "custom", "path": str(tmp_path / "f.json")}, G, mu)
        op = discretize(zero_kernel(1, 1), mu)
        c = constants(fam, op)
        tree = build_stopping(fam, op, c.A, c.B)
        rho = fam.mass[tree.level(1)].sum() / fam.mass[0]
        if tree.n_levels == 2:
            assert check_carleson(tree) == pytest.approx(1 + rho)


class TestAgainstOracles:
    @pytest.mark.parametrize("seed", range(6))
    def test_next_generation_matches_brute_force(self, seed):
        fam, op, c = instance(seed, dim=1 + seed % 2, depth=5)
        tree = build_stopping(fam, op, c.A, c.B)
        for F in tree.stop_gids[:6]:
            assert set(tree.children_of(int(F)).tolist()) == brute_next_generation(fam, op, tree, int(F))

    @pytest.mark.parametrize("seed", range(6))
    def test_consistency(self, seed):
        fam, op, c = instance(seed + 10, dim=1 + seed % 2, depth=5)
        tree = build_stopping(fam, op, c.A, c.B)
        stop = set(tree.stop_gids.tolist())
        for gid in range(fam.part.n_cubes):
            F = int(tree.anc[gid])
            if gid not in stop:
                assert not any(conditions(fam, op, tree, F, gid))
        for k, S in enumerate(tree.stop_gids[1:], start=1):
            assert any(conditions(fam, op, tree, int(tree.stop_parent[k]), int(S)))

    @pytest.mark.parametrize("seed", range(5))
    def test_ancestor_walk_up(self, seed):
        fam, op, c = instance(seed + 20, depth=6)
        tree = build_stopping(fam, op, c.A, c.B)
        stop = set(tree.stop_gids.tolist())
        part = fam.part
        for gid in range(part.n_cubes):
            q = gid
            while q not in stop:
                q = int(part.parent[q])
            assert tree.anc[gid] == q
            Q = part.cube(gid)
            assert ancestor(tree, Q) == part.cube(q)
            if gid:
                assert beta(tree, Q) >= beta(tree, part.cube(int(part.parent[gid])))
        assert beta(tree, part.cube(0)) == 0

    def test_invariants_battery(self):
        levels = 0
        for seed in range(12):
            amp = [None, 1.0, 2.0][seed % 3]
            fam, op, c = instance(seed + 40, dim=1 + seed % 2, depth=5 + seed % 3, amplitude=amp)
            tree = build_stopping(fam, op, c.A, c.B)
            assert check_decay(tree) <= tree.tau
            assert check_carleson(tree) <= 8 * tree.A
            levels += tree.n_levels
        assert levels > 12  # the battery exercises nontrivial trees

    def test_adjoint_side_tree(self):
        fam, op, c = instance(7)
        famS = TestFunctionFamily(fam.strategy, fam.grid, fam.mu, "T*", fam.part)
        cS = constants(famS, op)
        tree = build_stopping(famS, op, cS.A, cS.B)
        for k, S in enumerate(tree.stop_gids[1:], start=1):
            assert any(conditions(famS, op, tree, int(tree.stop_parent[k]), int(S)))
        assert check_decay(tree) <= tree.tau


class TestErrorsAndDump:
    def test_outside_root(self):
        fam, op, c = instance(1)
        tree = build_stopping(fam, op, c.A, c.B)
        with pytest.raises(ValueError):
            ancestor(tree, Cube(fam.grid, 2, (5,)))

    def test_dump(self, tmp_path):
        fam, op, c = instance(2)
        tree = build_stopping(fam, op, c.A, c.B)
        dump_tree(tree, tmp_path / "t.json")
        doc = json.loads((tmp_path / "t.json").read_text())
        assert len(doc["generations"]) == tree.n_levels
        assert sum(len(g) for g in doc["generations"]) == len(tree.stop_gids)
        for row in doc["generations"][1:][0] if tree.n_levels > 1 else []:
            assert set(row["trigger"]) <= {"avg", "maximal", "testing"} and row["trigger"]

    def test_norm_estimate_raised_when_exceeded(self):
        fam, op, c = instance(3)
        tree = build_stopping(fam, op, c.A, c.B, M_norm=1.0)
        assert tree.M_norm >= 1.0 and tree.M_norm_history[0] == 1.0
        assert tree.M_norm == tree.M_norm_history[-1]
