import json

import numpy as np
import pytest

from localtb.czo import cauchy_kernel, discretize, riesz_kernel, zero_kernel
from localtb.geometry import build_grid, random_grid
from localtb.measure import DiscreteMeasure, average, uniform_measure
from localtb.testfns import (
    FamilyStrategy,
    NonAccretiveError,
    constants,
    dump_custom_records,
    make_family,
)


def random_measure(seed, n=60, dim=1):
    rng = np.random.default_rng(seed)
    return DiscreteMeasure(rng.uniform(-1, 1, (n, dim)), rng.uniform(0.1, 2.0, n), m=float(dim))


def brute_constants(fam, op):
    # loop over cubes, realize each b_Q as a full atom function and apply the full operator
    A = B = 0.0
    w = fam.mu.weights
    for gid in range(fam.part.n_cubes):
        b = fam.b(gid)
        mask = fam.part.atom_mask(gid)
        mass = w[mask].sum()
        img = op.apply(b) if fam.side == "T" else op.adjoint_apply(b)
        A = max(A, np.sum(b**2 * w) / mass)
        B = max(B, np.sum((img * mask) ** 2 * w) / mass)
    return A, B


class TestMakeFamily:
    def test_indicator_exact(self):
        mu = random_measure(0)
        fam = make_family({"kind": "indicator"}, build_grid(0, 0, 5, 1), mu)
        op = discretize(zero_kernel(1, 1), mu)
        c = constants(fam, op)
        assert c.A == 1.0 and c.B == 0.0

    def test_perturbed_zero_is_indicator(self):
        mu = random_measure(1)
        G = build_grid(0, 0, 5, 1)
        a = make_family({"kind": "indicator"}, G, mu)
        b = make_family({"kind": "perturbed", "eta": 0.0, "seed": 3}, G, mu)
        assert all(np.array_equal(x, y) for x, y in zip(a.values, b.values))

    def test_eta_limit(self):
        with pytest.raises(ValueError):
            FamilyStrategy(kind="perturbed", eta=0.6)

    @pytest.mark.parametrize("seed", range(3))
    def test_normalized_and_supported(self, seed):
        mu = random_measure(seed, 80, 1 + seed % 2)
        G = random_grid(np.random.default_rng(seed), 0, 4, mu.dimension)
        fam = make_family({"kind": "perturbed", "eta": 0.4, "seed": seed}, G, mu)
        for gid in range(fam.part.n_cubes):
            b = fam.b(gid)
            Q = fam.part.cube(gid)
            assert np.all(b[~Q.contains_points(mu.points)] == 0)
            assert average(mu, b, Q) == pytest.approx(1.0, rel=1e-12)

    def test_perturbed_A_bound_and_brute_force(self):
        mu = random_measure(4, 100)
        G = build_grid(0, 0, 6, 1)
        fam = make_family({"kind": "perturbed", "eta": 0.4, "seed": 9}, G, mu)
        op = discretize(cauchy_kernel(), mu)
        c = constants(fam, op)
        A, B = brute_constants(fam, op)
        assert c.A == pytest.approx(A, rel=1e-12) and c.B == pytest.approx(B, rel=1e-12)
        assert 1.0 <= c.A <= (1.4 / 0.6) ** 2

    def test_adjoint_side_brute_force(self):
        mu = random_measure(5, 50, 2)
        G = build_grid((0.125, -0.25), 0, 4, 2)
        fam = make_family({"kind": "perturbed", "eta": 0.3, "seed": 1}, G, mu, side="T*")
        op = discretize(riesz_kernel(2), mu)
        c = constants(fam, op)
        A, B = brute_constants(fam, op)
        assert c.A == pytest.approx(A, rel=1e-12) and c.B == pytest.approx(B, rel=1e-12)

    def test_cell_signs_constant_on_cells(self):
        mu = uniform_measure(64, -1, 1)
        G = build_grid(0, 0, 6, 1)
        fam = make_family({"kind": "perturbed", "eta": 0.5, "seed": 2, "signs_resolution": 3}, G, mu)
        raw = fam.raw.reshape(8, 8)
        assert np.all(raw == raw[:, :1])


class TestConstants:
    def test_both_sides_summed(self):
        mu = random_measure(6)
        G = build_grid(0, 0, 5, 1)
        op = discretize(zero_kernel(1, 1), mu)
        fT = make_family({"kind": "indicator"}, G, mu, "T")
        fS = make_family({"kind": "indicator"}, G, mu, "T*")
        c = constants(fT, op, fS)
        assert c.A == 2.0 and c.B == 0.0

    def test_kernel_scaling(self):
        mu = random_measure(7)
        G = build_grid(0, 0, 5, 1)
        fam = make_family({"kind": "perturbed", "eta": 0.2, "seed": 0}, G, mu)
        op1 = discretize(cauchy_kernel(), mu)
        op3 = discretize(cauchy_kernel().scaled(3.0), mu)
        assert constants(fam, op3).B == pytest.approx(9 * constants(fam, op1).B, rel=1e-12)

    def test_different_grids_cover_all_cubes(self):
        mu = random_measure(8, 60)
        rng = np.random.default_rng(8)
        G1, G2 = random_grid(rng, 0, 4, 1), random_grid(rng, 0, 4, 1)
        op = discretize(cauchy_kernel(), mu)
        fT = make_family({"kind": "perturbed", "eta": 0.3, "seed": 1}, G1, mu, "T")
        fS = make_family({"kind": "perturbed", "eta": 0.3, "seed": 2}, G2, mu, "T*")
        c = constants(fT, op, fS)
        # each side's own maximum is dominated by the summed constant
        assert c.A >= constants(fT, op).A + 1.0 - 1e-12
        assert c.A_per_side["T"] >= constants(fT, op).A
        assert c.B >= max(constants(fT, op).B, constants(fS, op).B)

    def test_monotone_in_family(self):
        mu = random_measure(9)
        op = discretize(cauchy_kernel(), mu)
        small = make_family({"kind": "perturbed", "eta": 0.3, "seed": 1}, build_grid(0, 0, 3, 1), mu)
        large = make_family({"kind": "perturbed", "eta": 0.3, "seed": 1}, build_grid(0, 0, 6, 1), mu)
        cs, cl = constants(small, op), constants(large, op)
        assert cl.A >= cs.A and cl.B >= cs.B


class TestCustom:
    def test_round_trip_and_rejection(self, tmp_path):
        mu = random_measure(10, 30)
        G = build_grid(0, 0, 3, 1)
        fam = make_family({"kind": "perturbed", "eta": 0.4, "seed": 5}, G, mu)
        dump_custom_records(fam, tmp_path / "fam.json")
        back = make_family({"kind": "custom", "path": str(tmp_path / "fam.json")}, G, mu)
        assert all(np.allclose(a, b, rtol=1e-14) for a, b in zip(fam.values, back.values))
        recs = json.loads((tmp_path / "fam.json").read_text())
        rec = next(r for r in recs if len(r["values"]) >= 2)
        ids = list(rec["values"])
        w = mu.weights[[int(k) for k in ids]]
        # weighted mean exactly zero: +1 on one atom, balancing mass on another
        rec["values"] = {k: 0.0 for k in ids}
        rec["values"][ids[0]] = 1.0
        rec["values"][ids[1]] = -float(w[0] / w[1])
        (tmp_path / "bad.json").write_text(json.dumps(recs))
        with pytest.raises(NonAccretiveError):
            make_family({"kind": "custom", "path": str(tmp_path / "bad.json")}, G, mu)
