import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localtb import pairing as pr
from localtb.czo import cauchy_kernel, discretize
from localtb.geometry import (Cube, GridPartition, _distance_to_box_boundary, build_grid, cube_distance,
                              random_shift, skeleton_distance)
from localtb.martingale import TransformSpec, transform_norm
from localtb.measure import uniform_measure


@pytest.fixture(scope="module")
def small_data():
    return pr.build_scenario(pr.Scenario(depth=5))


@pytest.fixture(scope="module")
def good_trial():
    # gamma near 1/2 leaves some nested pairs good at this size
    return pr.draw_trial(pr.build_scenario(pr.Scenario(depth=6)), 1)


def random_parts(seed, depth=4, n=40, dim=1):
    rng = np.random.default_rng(seed)
    mu = uniform_measure(n, -12, 12, dim)
    gq = build_grid(random_shift(rng, 3, dim), 3, depth, dim)
    gr = build_grid(random_shift(rng, 3, dim), 3, depth, dim)
    return mu, GridPartition(gq, mu.points), GridPartition(gr, mu.points)


# parameters


def test_j_theta_default_and_finer():
    assert pr.Params().j_theta == -29
    assert pr.Params(theta=2.0**-10).j_theta == -31


@given(st.floats(1e-6, 0.0624))
def test_j_theta_bracket(theta):
    j = pr.Params(theta=theta).j_theta
    assert 2.0**-21 * theta <= 2.0**j < 2.0**-20 * theta


@given(st.floats(1e-3, 1e3))
def test_root_scale_bracket(side):
    N = pr.Params.root_scale(side)
    assert 2.0 ** (N - 3) <= side < 2.0 ** (N - 2)


def test_gamma_derived_from_kernel():
    assert pr.Params().gamma_for(cauchy_kernel()) == 0.25
    assert pr.Params(gamma=0.4).gamma_for(cauchy_kernel()) == 0.4


def test_lambda_cover_flag():
    assert not pr.Params().covers(1.0)
    assert pr.Params(lam=24.0).covers(1.0)


@pytest.mark.parametrize("kw", [{"lam": 1.0}, {"theta": 0.1}, {"sigma": 0.5}, {"gamma": 0.5}, {"u": 1.0}])
def test_params_reject_out_of_range(kw):
    with pytest.raises(ValueError):
        pr.Params(**kw)


# pair classification


def brute_bucket(Q: Cube, R: Cube, gamma, r):
    small, big = sorted([Q.side, R.side])
    if cube_distance(Q, R) > small**gamma * big ** (1 - gamma):
        return pr.SEPARATED
    if small <= 2.0**-r * big:
        return pr.NESTED
    return pr.DIAGONAL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_split_pairs_matches_scan(seed):
    _, pq, prr = random_parts(seed)
    pairs = pr.split_pairs(pq, prr, 0.25, 2)
    for q in range(pairs.bucket.shape[0]):
        for R in range(pairs.bucket.shape[1]):
            assert pairs.bucket[q, R] == brute_bucket(pq.cube(q), prr.cube(R), 0.25, 2)
    assert sum(pairs.counts().values()) == pairs.bucket.size


def test_deep_nested_pair_is_nested():
    mu = uniform_measure(64, -8, 8)
    part = GridPartition(build_grid(0.0, 3, 6, 1), mu.points)
    pairs = pr.split_pairs(part, part, 0.25, 3)
    R = 0
    q = part.gids_at(4)[0]  # side 2^-4 of the root, r + 1 generations down
    assert part.side[q] == 2.0**-4 * part.side[R]
    assert pairs.bucket[q, R] == pr.NESTED


# separated sum and Schur norms


def test_separated_sum_zero_functions(small_data):
    tr = pr.draw_trial(small_data, 0)
    pairs = pr.split_pairs(tr.fside.part, tr.gside.part, 0.25, 3)
    z = np.zeros(pairs.bucket.shape)
    out = pr.separated_sum(pairs, z, np.zeros(z.shape[0]), np.zeros(z.shape[1]),
                           tr.fside.fam.mass, tr.gside.fam.mass, cauchy_kernel())
    assert (out.value, out.bound) == (0.0, 0.0)


def test_separated_values_match_direct_pairs(small_data):
    tr = pr.draw_trial(small_data, 2)
    op, w = small_data.op, small_data.mu.weights
    f, g = tr.fside, tr.gside
    P = f.applied.T @ (w[:, None] * g.pieces)
    pairs = pr.split_pairs(f.part, g.part, 0.25, 3)
    qs, Rs = np.nonzero(pairs.bucket == pr.SEPARATED)
    direct = sum(op.pair(f.pieces[:, q], g.pieces[:, R]) for q, R in zip(qs, Rs))
    out = pr.separated_sum(pairs, P, f.norms, g.norms, f.fam.mass, g.fam.mass, op.kernel)
    assert out.value == pytest.approx(direct, rel=1e-10, abs=1e-15)
    assert np.isfinite(out.pairwise_constant)
    assert abs(out.value) <= out.pairwise_constant * out.bound * (1 + 1e-12)


def brute_A(part_q, part_r, mass_q, mass_r, gamma, r, kernel):
    nq, nr = pr._carrying(part_q), pr._carrying(part_r)
    A = np.zeros((nq, nr))
    for q in range(nq):
        Q = part_q.cube(q)
        for R_ in range(nr):
            R = part_r.cube(R_)
            d = cube_distance(Q, R)
            if Q.side < R.side and d > Q.side**gamma * R.side ** (1 - gamma):
                D = Q.side + R.side + d
                A[q, R_] = (Q.side * R.side) ** 0.5 * math.sqrt(mass_q[q] * mass_r[R_]) / D**2
    return A


def test_schur_norm_matches_dense_oracle():
    mu, pq, prr = random_parts(5, depth=4)
    mq = np.array([mu.weights[pq.atom_mask(c)].sum() for c in range(pq.n_cubes)])
    mr = np.array([mu.weights[prr.atom_mask(c)].sum() for c in range(prr.n_cubes)])
    rep = pr.schur_norm(pq, prr, mq, mr, cauchy_kernel(), 0.25, 2)
    A = brute_A(pq, prr, mq, mr, 0.25, 2, cauchy_kernel())
    assert rep.separated_norm == pytest.approx(np.linalg.norm(A, 2), rel=1e-10)
    assert rep.note == ""


def test_schur_single_entry_and_empty():
    assert pr._top_singular(np.zeros((0, 0))) == 0.0
    assert pr._top_singular(np.array([[0.3]])) == pytest.approx(0.3)


def test_schur_subsampling_is_recorded():
    mu, pq, prr = random_parts(6, depth=4)
    mq = np.array([mu.weights[pq.atom_mask(c)].sum() for c in range(pq.n_cubes)])
    rep = pr.schur_norm(pq, prr, mq, mq * 0 + 1.0, cauchy_kernel(), 0.25, 2, limit=16)
    assert rep.note.startswith("subsampled")


def test_nested_children_are_inside():
    _, pq, prr = random_parts(7, depth=5)
    q, R, RQ = pr.nested_children(pq, prr, 2)
    assert q.size > 0
    assert np.all(prr.parent[RQ] == R)
    assert np.all(pq.lower[q] >= prr.lower[RQ]) and np.all(pq.upper[q] <= prr.upper[RQ])


# good/bad Monte Carlo


def brute_bad(Q: Cube, other, k, gamma):
    top = Q.generation - k
    for h in range(0, top + 1):
        for i in range(2**h):
            S = Cube(other, h, (i,))
            if skeleton_distance(Q, S) <= Q.side**gamma * S.side ** (1 - gamma):
                return True
    return False


def test_bad_probability_matches_skeleton_scan():
    Q = Cube(build_grid(0.0, 3, 8, 1), 7, (37,))
    ks = [2, 3, 4]
    est = pr.bad_probability_ladder(Q, ks, 0.25, 20, seed=3)
    rng = np.random.default_rng(3)
    hits = np.zeros((len(ks), 20))
    for t in range(20):
        other = build_grid(random_shift(rng, 3, 1), 3, Q.generation, 1)
        for i, k in enumerate(ks):
            hits[i, t] = brute_bad(Q, other, k, 0.25)
    assert [e.mean for e in est] == pytest.approx(list(hits.mean(axis=1)))


def test_bad_probability_beyond_root_is_zero():
    Q = Cube(build_grid(0.0, 3, 6, 1), 4, (5,))
    assert pr.bad_probability_mc(Q, 5, 0.25, 16).mean == 0.0


def test_bad_probability_saturates_for_tiny_gamma():
    Q = Cube(build_grid(0.0, 3, 6, 1), 6, (11,))
    assert pr.bad_probability_mc(Q, 1, 1e-6, 32).mean == 1.0


def test_bad_probability_needs_trials():
    with pytest.raises(ValueError):
        pr.bad_probability_mc(Cube(build_grid(0.0, 3, 6, 1), 6, (1,)), 3, 0.25, 0)


def test_fit_decay_recovers_exponent():
    ks = list(range(3, 10))
    est = [pr.MCEstimate(3 * 2.0 ** (-0.4 * k), 0.0, 1) for k in ks]
    fit = pr.fit_decay(ks, est)
    assert fit.exponent == pytest.approx(0.4)
    assert fit.prefactor == pytest.approx(3.0)


def test_collar_zero_monotone_and_shrinking(small_data):
    us = [0.0, 1 / 64, 1 / 16, 1 / 8, 1 / 4]
    rep = pr.collar_mass_mc(small_data.mu, 1.0, pr.Params(), 64, seed=1, us=us)
    assert rep.mass[0] == 0.0
    assert np.all(np.diff(rep.statistic) >= 0)
    assert rep.statistic[1] < rep.statistic[-1]


# nested sum and paraproduct


def test_nested_good_pairs_deep_inside(good_trial):
    f, g = good_trial.fside, good_trial.gside
    w = f.mu.weights
    P = f.applied.T @ (w[:, None] * g.pieces)
    pairs = pr.split_pairs(f.part, g.part, 0.45, 3)
    act = (f.beta[: f.n] < 4)[:, None] & (g.beta[: g.n] < 4)[None, :]
    piece = pr.nested_half(f, g, P, pairs.mask(pr.NESTED, 1) & act, pr.Params(gamma=0.45),
                           cauchy_kernel(), 0.45)
    assert piece.n_good > 0
    assert piece.containment_failures == 0
    assert piece.good + piece.bad == pytest.approx(piece.total, rel=1e-9, abs=1e-15)
    assert np.isfinite(piece.inside_constant) and np.isfinite(piece.outside_constant)
    assert piece.eps_ratio <= 2.0


def test_nested_zero_operator():
    data = pr.build_scenario(pr.Scenario(depth=5, kernel="zero"))
    tr = pr.draw_trial(data, 0)
    f, g = tr.fside, tr.gside
    P = f.applied.T @ (f.mu.weights[:, None] * g.pieces)
    pairs = pr.split_pairs(f.part, g.part, 0.45, 3)
    piece = pr.nested_half(f, g, P, pairs.mask(pr.NESTED, 1), pr.Params(gamma=0.45), data.op.kernel, 0.45)
    assert piece.total == piece.good == piece.bad == piece.paraproduct == 0.0


def brute_top(small, big, q, p, gamma):
    """Smallest big-side cube below the cutoff containing Q, good at its scale, 2^r times larger."""
    Q = small.part.cube(q)
    bp = big.part
    for h in range(min(Q.generation - p.r, bp.depth - 1), -1, -1):
        cands = [c for c in bp.gids_at(h) if bp.cube(c).contains(Q) and big.beta[c] < p.beta]
        if not cands:
            continue
        H = bp.cube(cands[0])
        # good w.r.t. every big-grid cube of side >= side(H)
        good = all(skeleton_distance(Q, Cube(bp.grid, a, (i,))) > Q.side**gamma * bp.grid.side(a) ** (1 - gamma)
                   for a in range(0, h + 1) for i in range(2**a))
        if good:
            kid = [c for c in bp.children(cands[0]) if bp.cube(c).contains(Q)]
            return kid[0] if kid else None
    return None


def test_top_cubes_match_brute_search(good_trial):
    f, g = good_trial.fside, good_trial.gside
    p = pr.Params(gamma=0.45)
    tq, tJ, missing = pr.top_cubes(f, g, p, 0.45)
    found = dict(zip(tq.tolist(), tJ.tolist()))
    for q in np.flatnonzero(f.beta[: f.n] < p.beta):
        assert found.get(int(q)) == brute_top(f, g, int(q), p, 0.45)
    assert missing == int(np.sum(f.beta[: f.n] < p.beta)) - len(found)


def test_paraproduct_value_matches_pair_sum(good_trial):
    # independent route: the per-pair differences of the two averaged test functions
    f, g = good_trial.fside, good_trial.gside
    mu, w = f.mu, f.mu.weights
    op = discretize(cauchy_kernel(), mu)
    P = f.applied.T @ (w[:, None] * g.pieces)
    p = pr.Params(gamma=0.45)
    pairs = pr.split_pairs(f.part, g.part, 0.45, 3)
    act = (f.beta[: f.n] < 4)[:, None] & (g.beta[: g.n] < 4)[None, :]
    piece = pr.nested_half(f, g, P, pairs.mask(pr.NESTED, 1) & act, p, cauchy_kernel(), 0.45)

    def phi(side, S):
        mask = side.part.atom_mask(S)
        F = int(side.tree.anc[S])
        b = side.fam.b(F)
        return np.dot(side.dec.f[mask], w[mask]) / np.dot(b[mask], w[mask]) * b

    tq, tJ, _ = pr.top_cubes(f, g, p, 0.45)
    direct = sum(op.pair(f.pieces[:, q], phi(g, J) - phi(g, 0)) for q, J in zip(tq, tJ))
    assert piece.paraproduct == pytest.approx(direct, rel=1e-9, abs=1e-16)


def test_split_norms_match_transform_norm(good_trial):
    # the per-K pieces of the generation split are stopping-restricted transforms
    f = good_trial.fside
    rng = np.random.default_rng(0)
    eps = rng.uniform(-1, 1, f.part.n_cubes)
    w = f.mu.weights
    h2 = float(np.dot(f.dec.f**2, w))
    for K in f.tree.stop_gids[:4]:
        coeffs = np.where(f.tree.anc[: f.n] == K, eps[: f.n], 0.0)
        vec = f.pieces @ coeffs
        ratio = transform_norm(f.tree, None, int(K), TransformSpec(eps, int(K)), f.dec.f)
        assert float(np.dot(vec**2, w)) == pytest.approx(ratio * h2, rel=1e-9, abs=1e-18)


# tails


def test_tails_vanish_for_large_cutoff(small_data):
    tr = pr.draw_trial(small_data, 0)
    tail = pr.beta_tail(tr.fside, tr.gside, small_data.op, pr.Params(beta=50))
    for k in ("tail_mixed", "tail_pivot", "tail_f"):
        assert tail.values[k] == 0.0
    assert tail.generation_coef == 0.0


def test_generation_masses_decay(small_data):
    tr = pr.draw_trial(small_data, 3)
    tree = tr.fside.tree
    mass = tree.family.mass
    for j in range(tree.n_levels):
        assert mass[tree.level(j)].sum() <= tree.tau**j * mass[0] * (1 + 1e-12)


def test_tail_bound_decreases_with_cutoff():
    data = pr.build_scenario(pr.Scenario(depth=6, family="perturbed", eta=0.5))
    coefs = []
    for beta in (1, 2, 3):
        tr = pr.draw_trial(data, 0)
        coefs.append(pr.beta_tail(tr.fside, tr.gside, data.op, pr.Params(beta=beta)).generation_coef)
    assert coefs[0] >= coefs[1] >= coefs[2]


def test_corner_split_bounds(small_data):
    tr = pr.draw_trial(small_data, 1)
    op = small_data.op
    bQ, bR = tr.fside.fam.b(0), tr.gside.fam.b(0)
    c = pr.corner_split(op, bQ, bR, tr.fside.part.grid.lower, tr.fside.part.grid.upper, 0.125)
    assert c.total == pytest.approx(op.pair(bQ, bR), rel=1e-12)
    assert abs(c.inner) <= c.inner_bound * (1 + 1e-12)
    assert abs(c.far) <= c.far_abs * (1 + 1e-12) <= c.far_bound * (1 + 1e-12)


# theta surgery


def brute_theta(points, s_lo, s_hi, b_lo, b_hi, theta, side, origin):
    ls, lb = s_hi[0] - s_lo[0], b_hi[0] - b_lo[0]
    out = []
    for x in points:
        inS = np.all((x >= s_lo) & (x < s_hi))
        inB = np.all((x >= b_lo) & (x < b_hi))
        g_lo = origin + np.floor((x - origin) / side) * side
        g_hi = g_lo + side
        core = np.all((x >= g_lo + theta * side) & (x < g_hi - theta * side))
        s_bd = inS and (_distance_to_box_boundary(g_lo, g_hi, b_lo, b_hi) < theta * lb / 2 or (inB and not core))
        b_bd = inB and (_distance_to_box_boundary(g_lo, g_hi, s_lo, s_hi) < theta * ls / 2 or (inS and not core))
        out.append((inS and not s_bd and not inB, s_bd, inS and not s_bd and inB,
                    inB and not b_bd and not inS, b_bd, inB and not b_bd and inS))
    return np.array(out).T


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0, 1, 2]), st.booleans())
def test_theta_surgery_partition(seed, gap, fine):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2, 2, (200, 1))
    s_lo = np.array([rng.uniform(-1, 0)])
    s_hi = s_lo + 0.5
    b_lo = s_lo - rng.uniform(0, 0.5) + (gap == 2) * 3.0
    b_hi = b_lo + 0.5 * 2**gap
    theta = 2.0**-6
    # the bracketed lattice side, or a coarse one that only the partition checks use
    side = 0.5 * 2.0 ** pr.Params(theta=theta).j_theta if fine else 2.0**-5
    origin = np.array([rng.uniform(-1, 1)])
    sv = pr.theta_surgery(pts, s_lo, s_hi, b_lo, b_hi, theta, side, origin)
    parts_s = sv.small_sep.astype(int) + sv.small_bd + sv.small_delta
    parts_b = sv.big_sep.astype(int) + sv.big_bd + sv.big_delta
    assert np.array_equal(parts_s, pr.in_box(pts, s_lo, s_hi).astype(int))
    assert np.array_equal(parts_b, pr.in_box(pts, b_lo, b_hi).astype(int))
    brute = brute_theta(pts, s_lo, s_hi, b_lo, b_hi, theta, side, origin)
    for got, want in zip((sv.small_sep, sv.small_bd, sv.small_delta, sv.big_sep, sv.big_bd, sv.big_delta), brute):
        assert np.array_equal(got, want)
    matched = sv.labels >= 0
    assert np.array_equal(matched, sv.small_delta & sv.big_delta)
    if fine:
        assert np.all(sv.five_inside)


def test_theta_surgery_disjoint_cubes():
    pts = np.linspace(-3, 3, 101)[:, None]
    sv = pr.theta_surgery(pts, [-1.0], [0.0], [1.0], [2.0], 2.0**-8, 2.0**-20, [0.0])
    assert not sv.small_delta.any() and sv.n_matched == 0
    assert np.array_equal(sv.small_sep, pr.in_box(pts, [-1.0], [0.0]) & ~sv.small_bd)


def test_theta_surgery_requires_order():
    with pytest.raises(ValueError):
        pr.theta_surgery(np.zeros((1, 1)), [0.0], [2.0], [0.0], [1.0], 2.0**-8, 1e-6, [0.0])


# sigma surgery


def sigma_oracle(op, H_lo, H_hi, u, v, bH, sigma):
    pts = op.mu.points
    c, h = 0.5 * (H_lo + H_hi), 0.5 * (H_hi - H_lo)
    box = lambda k: pr.in_box(pts, c - k * h, c + k * h)
    H, S, F = box(1), box(1 + sigma), box(5)
    vH = v * H
    return {"matched": op.pair(u * H, vH), "full": op.pair(u, vH), "far": op.pair(u * ~F, vH),
            "mid": op.pair(u * (F & ~S), vH), "collar": op.pair(u * (S & ~H), vH),
            "pivot_full": op.pair(u, bH), "pivot_mid": op.pair(u * (F & ~S), bH),
            "pivot_collar": op.pair(u * (S & ~H), bH), "pivot_self": op.pair(u * H, bH)}


def test_sigma_surgery_terms_match_oracle():
    mu = uniform_measure(400, -2, 2)
    op = discretize(cauchy_kernel(), mu)
    rng = np.random.default_rng(4)
    u, v = rng.uniform(0.5, 1.5, mu.n_atoms), rng.uniform(-1, 1, mu.n_atoms)
    H_lo, H_hi = np.array([-0.05]), np.array([0.05])
    bH = np.where(pr.in_box(mu.points, H_lo, H_hi), 1.0, 0.0)
    bH /= np.dot(bH, mu.weights) / mu.weights[bH > 0].sum()
    out = pr.sigma_surgery(op, H_lo, H_hi, u, v, bH, 0.25)
    want = sigma_oracle(op, H_lo, H_hi, u, v, bH, 0.25)
    for k, val in want.items():
        assert out.total(k) == pytest.approx(val, rel=1e-10, abs=1e-14), k
    assert out.total("matched") == pytest.approx(
        out.total("full") - out.total("far") - out.total("mid") - out.total("collar"), rel=1e-10)
    assert np.isfinite(out.mean_ratio) and out.mean_ratio > 0


def test_sigma_surgery_zero_u():
    mu = uniform_measure(50, -1, 1)
    op = discretize(cauchy_kernel(), mu)
    out = pr.sigma_surgery(op, [-0.2], [0.2], np.zeros(50), np.ones(50), np.ones(50), 0.1)
    assert all(float(np.abs(t).sum()) == 0.0 for t in out.terms.values())


# diagonal


def test_branches_rebuild_child_restriction(small_data):
    tr = pr.draw_trial(small_data, 0)
    f = tr.fside
    for q in range(f.n):
        for i in f.part.children(q):
            rec = sum(c.sign * c.amplitude * f.fam.b(c.stop) for c in pr.branches(f, q, int(i)))
            mask = f.part.atom_mask(int(i))
            np.testing.assert_allclose(rec * mask, f.pieces[:, q] * mask, atol=1e-13)


def test_diagonal_choice_rejects_negative_amplitude():
    with pytest.raises(ValueError):
        pr.DiagonalChoice(0, 1, -0.1, 1.0, 0)


def test_diagonal_zero_operator():
    data = pr.build_scenario(pr.Scenario(depth=5, kernel="zero"))
    tr = pr.draw_trial(data, 0)
    f, g = tr.fside, tr.gside
    P = np.zeros((f.n, g.n))
    pairs = pr.split_pairs(f.part, g.part, 0.25, 3)
    d = pr.diagonal_sum(f, g, P, pairs.mask(pr.DIAGONAL), data.op, tr.dstar, pr.Params())
    assert np.all(d.abs_sums == 0.0)
    assert all(v == 0.0 for v in d.parts.values())


def test_diagonal_surgery_checks(small_data):
    tr = pr.draw_trial(small_data, 1)
    f, g = tr.fside, tr.gside
    w = small_data.mu.weights
    P = f.applied.T @ (w[:, None] * g.pieces)
    pairs = pr.split_pairs(f.part, g.part, 0.25, 3)
    d = pr.diagonal_sum(f, g, P, pairs.mask(pr.DIAGONAL), small_data.op, tr.dstar, pr.Params())
    assert d.containment_failures == 0 and d.five_failures == 0
    assert d.matched > 0
    assert 0 < d.neighbours <= 64
    assert sum(d.parts.values()) == pytest.approx(d.total, rel=1e-9)


def test_branch_energy_sums_finite(small_data):
    tr = pr.draw_trial(small_data, 0)
    out = pr.branch_energy_sums(tr.fside)
    assert np.isfinite(out["maximal_ratio"]) and out["maximal_ratio"] > 0


# full report


def test_report_resums_and_is_deterministic(small_data):
    a = pr.full_report(pr.Scenario(depth=5), trials=2, data=small_data)
    b = pr.full_report(pr.Scenario(depth=5), trials=2, data=small_data)
    assert a.max_residual <= 1e-8
    assert a.to_dict() == b.to_dict()


def test_report_zero_operator_has_no_operator_part():
    rep = pr.full_report(pr.Scenario(depth=5, kernel="zero"), trials=2)
    s = rep.summary()
    assert s["T_part_max"] == 0.0
    assert np.isfinite(s["C_max"])


def test_antisymmetric_same_function_total_zero():
    rep = pr.full_report(pr.Scenario(depth=5, functions="same"), trials=2)
    for t in rep.trials:
        assert abs(t.exact) <= 1e-12
        assert sum(abs(v) for v in t.pieces.values()) > 1e-3


def test_full_report_reports_small_operator_part_on_coarse_grids():
    rep = pr.full_report(pr.Scenario(depth=6), trials=4)
    s = rep.summary()
    assert s["c_max"] < 1.0 / (2.0 * s["C_max"])
