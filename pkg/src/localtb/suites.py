"""Seeded verification suites shared by the command line and the acceptance tests.

Every suite returns a ``SuiteResult`` whose ``passed`` flag applies the suite's
recorded threshold; ``metrics`` carries the numbers behind the verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import pairing as pr
from .czo import DiscretizedOperator, KernelSpec, cauchy_kernel, discretize, riesz_kernel, verify_standard
from .geometry import Cube, GridPartition, build_grid, random_shift
from .instances import Instance, InstanceSpec, build_instance, jittered_mesh
from .martingale import expand, jn_decompose, sweep_instance
from .measure import DiscreteMeasure, centred_maximal, cube_sums, dyadic_maximal, uniform_measure, verify_growth
from .stopping import check_carleson, check_decay

# suite names in the order `all` runs them
SUITE_NAMES = ("verify-kernel", "growth", "stopping", "martingale", "mc-goodbad", "surgery", "pairing")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metrics: dict
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def line(self) -> str:
        shown = ", ".join(f"{k}={_short(v)}" for k, v in self.metrics.items() if not isinstance(v, (list, dict)))
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {shown}"


def _short(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# instance batteries ------------------------------------------------------------------


def battery_specs(n: int = 100, seed: int = 0) -> list[InstanceSpec]:
    """1-D and 2-D instances over depths 5..8, three families and both kernels.

    2-D instances always use the Riesz kernel (the Cauchy kernel is one-dimensional).
    """
    fams = ("indicator", "perturbed", "custom")
    out = []
    for i in range(n):
        dim = 1 + i % 2
        kernel = "riesz" if dim == 2 else ("cauchy", "riesz")[(i // 2) % 2]
        out.append(InstanceSpec(seed=seed + i, dimension=dim, depth=5 + (i // 2) % 4,
                                atoms_per_side=64 if dim == 1 else 12, family=fams[i % 3],
                                kernel=kernel, resolution=None))
    return out


def build_battery(specs) -> list[Instance]:
    return [build_instance(s) for s in specs]


def stopping_suite(instances: list[Instance]) -> SuiteResult:
    """Next-generation mass decay and the Carleson packing ratio, both without tolerance."""
    rows = []
    ok = True
    for inst in instances:
        tree = inst.tree
        decay, carleson = check_decay(tree), check_carleson(tree)
        good = decay <= tree.tau and carleson <= 8.0 * tree.A
        ok &= good
        rows.append({"seed": inst.spec.seed, "params": inst.spec.label(), "decay": decay, "tau": tree.tau,
                     "carleson": carleson, "carleson_bound": 8.0 * tree.A, "levels": tree.n_levels,
                     "stopping_cubes": len(tree.stop_gids), "depth_capped": tree.depth_capped, "passed": good})
    return SuiteResult("stopping", ok and bool(rows), {
        "instances": len(rows),
        "max_decay_over_tau": max((r["decay"] / r["tau"] for r in rows), default=0.0),
        "max_carleson_over_bound": max((r["carleson"] / r["carleson_bound"] for r in rows), default=0.0),
        "stopping_cubes": sum(r["stopping_cubes"] for r in rows)}, rows)


def _root_random(inst: Instance, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, inst.spec.seed])
    return np.where(inst.part.inside, rng.uniform(-1.0, 1.0, inst.mu.n_atoms), 0.0)


def reconstruction_suite(instances: list[Instance], seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Expansion residual on uncapped instances; Pythagoras for indicator families."""
    rows, notes = [], []
    ok = True
    for inst in instances:
        if inst.tree.depth_capped:
            continue
        f = _root_random(inst, seed)
        dec = expand(inst.tree, None, f)
        fmax = float(np.abs(f).max(initial=0.0))
        res = dec.reconstruction_residual() / fmax if fmax else 0.0
        row = {"seed": inst.spec.seed, "params": inst.spec.label(), "residual": res, "pythagoras": float("nan")}
        good = res <= tol
        if inst.spec.family == "indicator":
            w = inst.mu.weights
            inside = inst.part.inside
            mean = np.dot(f[inside], w[inside]) / w[inside].sum()
            lhs = float(np.dot(f * f, w))
            rhs = float(dec.norms_sq().sum() + w[inside].sum() * mean**2)
            row["pythagoras"] = abs(lhs - rhs) / lhs
            good &= row["pythagoras"] <= tol
        row["passed"] = good
        ok &= good
        rows.append(row)
    skipped = len(instances) - len(rows)
    if skipped:
        notes.append(f"{skipped} depth-capped instances skipped")
    py = [r["pythagoras"] for r in rows if not math.isnan(r["pythagoras"])]
    return SuiteResult("reconstruction", ok and bool(rows), {
        "instances": len(rows), "skipped_capped": skipped,
        "max_residual": max((r["residual"] for r in rows), default=0.0),
        "pythagoras_checked": len(py), "max_pythagoras": max(py, default=0.0)}, rows, notes)


def jn_suite(instances: list[Instance], seed: int = 0, per_instance: int = 4) -> SuiteResult:
    """Level-set tails of the partial-sum maximal function at t = 1, 3, 5, 7."""
    rows = []
    ok = True
    for inst in instances:
        part = inst.part
        for k in range(per_instance):
            rng = np.random.default_rng([seed, inst.spec.seed, k])
            phi = rng.choice([-1.0, 1.0], part.n_cubes) * rng.uniform(0.1, 0.6)
            res = jn_decompose(part, inst.mu, phi)
            if not res.hypothesis_ok:
                continue
            tails = {t: res.tail(inst.mu, t) for t in (1, 3, 5, 7)}
            good = all(v <= 2.0 ** (-(t - 1) / 2) for t, v in tails.items())
            ok &= good
            rows.append({"seed": inst.spec.seed, "probe": k, "levels": len(res.collections),
                         **{f"tail_{t}": v for t, v in tails.items()}, "passed": good})
    worst = max((r[f"tail_{t}"] / 2.0 ** (-(t - 1) / 2) for r in rows for t in (1, 3, 5, 7)), default=0.0)
    return SuiteResult("john-nirenberg", ok and bool(rows),
                       {"passing_hypothesis": len(rows), "max_tail_over_bound": worst}, rows)


def sweep_specs(seeds=range(6)) -> list[tuple[InstanceSpec, InstanceSpec]]:
    """Pairs (coarse, 4x atoms) at fixed depth: 1-D 64 -> 256, 2-D 16^2 -> 32^2."""
    out = []
    for s in seeds:
        out.append((InstanceSpec(seed=s, depth=6, atoms_per_side=64), InstanceSpec(seed=s, depth=6, atoms_per_side=256)))
    for s in seeds:
        out.append((InstanceSpec(seed=s, dimension=2, depth=4, atoms_per_side=16),
                    InstanceSpec(seed=s, dimension=2, depth=4, atoms_per_side=32)))
    return out


def sweep_suite(pairs, tol: float = 0.2) -> SuiteResult:
    """Ceilings of the transform suites per dimension, coarse vs quadrupled atoms."""
    ceil: dict = {}
    rows = []
    for coarse, fine in pairs:
        for level, spec in (("coarse", coarse), ("fine", fine)):
            inst = build_instance(spec)
            ratios = sweep_instance(inst.tree, spec.seed)
            for suite, v in ratios.items():
                key = (spec.dimension, suite, level)
                ceil[key] = max(ceil.get(key, 0.0), v)
                rows.append({"suite": suite, "seed": spec.seed, "params": spec.label(), "ratio": v})
    metrics, ok = {}, True
    for (dim, suite, level), v in sorted(ceil.items()):
        if level != "coarse":
            continue
        fine = ceil[(dim, suite, "fine")]
        change = abs(fine - v) / v if v > 0 else (0.0 if fine == 0 else math.inf)
        good = math.isfinite(v) and math.isfinite(fine) and change < tol
        ok &= good
        metrics[f"{dim}d_{suite}_change"] = change
    return SuiteResult("sweep-stability", ok and bool(rows), metrics, rows)


def martingale_suite(instances: list[Instance], seed: int = 0, refine_pairs=None) -> SuiteResult:
    """Expansion, square function, transforms, John-Nirenberg and truncation sweeps."""
    parts = [reconstruction_suite(instances, seed), jn_suite(instances, seed)]
    sweep_rows, ceilings = [], {}
    for inst in instances:
        for suite, v in sweep_instance(inst.tree, inst.spec.seed, n_probes=1).items():
            ceilings[suite] = max(ceilings.get(suite, 0.0), v)
            sweep_rows.append({"suite": suite, "seed": inst.spec.seed, "ratio": v})
    finite = all(math.isfinite(v) for v in ceilings.values())
    if refine_pairs:
        parts.append(sweep_suite(refine_pairs))
    metrics = {f"{p.name}_passed": p.passed for p in parts}
    metrics.update({f"ceiling_{k}": v for k, v in ceilings.items()})
    rows = [dict(r, part=p.name) for p in parts for r in p.rows] + sweep_rows
    return SuiteResult("martingale", finite and all(p.passed for p in parts), metrics, rows,
                       [n for p in parts for n in p.notes])


# random grids -------------------------------------------------------------------------


def goodbad_suite(gamma: float = 0.25, r: int = 3, trials: int = 256, seed: int = 0,
                  collar_trials: int = 64, scenario: pr.Scenario | None = None,
                  params: pr.Params | None = None) -> SuiteResult:
    """Fitted decay of P(bad) over k = r..r+6 against 0.75 gamma, and the collar ladder."""
    Q = Cube(build_grid(0.0, 3, 14, 1), 14, (3 * 2**12 + 17,))
    ks = list(range(r, r + 7))
    est = pr.bad_probability_ladder(Q, ks, gamma, trials, seed)
    fit = pr.fit_decay(ks, est)
    exponent = fit.exponent
    decay_ok = math.isfinite(exponent) and exponent >= 0.75 * gamma
    notes = []
    if not math.isfinite(exponent):
        notes.append("fewer than two positive estimates: no decay fitted")
    sc = pr.Scenario(depth=5) if scenario is None else scenario
    data = pr.build_scenario(sc, M_norm=1.0)  # the collar needs only the measure
    us = [0.0, 1 / 32, 1 / 16, 1 / 8, 1 / 4]
    collar = pr.collar_mass_mc(data.mu, sc.q0_side, params or pr.Params(), collar_trials, seed, us)
    collar_ok = collar.mass[0] == 0.0 and all(a <= b for a, b in zip(collar.mass, collar.mass[1:]))
    rows = [{"k": k, "p_bad": e.mean, "half_width": e.half_width, "trials": e.trials} for k, e in zip(ks, est)]
    rows += [{"u": u, "collar_mass": m, "half_width": h, "statistic": s}
             for u, m, h, s in zip(collar.us, collar.mass, collar.half_width, collar.statistic)]
    return SuiteResult("mc-goodbad", decay_ok and collar_ok, {
        "gamma": gamma, "exponent": exponent, "required": 0.75 * gamma,
        "max_half_width": max(e.half_width for e in est), "collar_monotone": collar_ok}, rows, notes)


# pairing and surgery ----------------------------------------------------------------------


def _dyadic_smoothing_ratio(sc: pr.Scenario, sigma: float, generations=(3, 4)) -> float:
    """Largest far-field smoothing ratio over grid cubes holding several atoms."""
    data = pr.build_scenario(sc)
    tr = pr.draw_trial(data, 0)
    part, fam = tr.fside.part, tr.fside.fam
    Mu = centred_maximal(data.mu, data.f)
    best = 0.0
    for g in generations:
        ids = part.gids_at(g)
        ids = ids[fam.mass[ids] > 0]
        if ids.size == 0:
            continue
        lo, hi = part.lower[ids], part.upper[ids]
        bH = np.stack([fam.b_for_box(a, b) for a, b in zip(lo, hi)])
        best = max(best, pr._sigma_many(data.op, lo, hi, data.f, data.g, bH, sigma, Mu).mean_ratio)
    return best


def surgery_suite(seeds=(0, 1, 2), trials: int = 4, scenario: pr.Scenario | None = None,
                  params: pr.Params | None = None, ratio_seeds: int = 6, stability: float = 2.0) -> SuiteResult:
    """Theta and sigma surgery on every diagonal pair of the sampled trials.

    Inexact partitions or resummations raise inside the trial; the suite also
    requires no 5H or bad-set containment failure, and compares the smoothing
    ratio ceiling of two disjoint seed batches (multi-atom grid cubes).
    """
    p = pr.Params() if params is None else params
    base = pr.Scenario(depth=6) if scenario is None else scenario
    rows = []
    for s in seeds:
        data = pr.build_scenario(replace(base, seed=s))
        for t in range(trials):
            d = pr.run_trial(data, p, t).diagnostics
            rows.append({"seed": s, "trial": t, "matched": d["matched_cubes"], "five_failures": d["five_failures"],
                         "containment_failures": d["surgery_containment_failures"],
                         "sigma_skipped": d["sigma_skipped"], "mean_ratio": d["mean_ratio"],
                         "child_pairs": d["diagonal_child_pairs"]})
    sound = all(r["five_failures"] == 0 and r["containment_failures"] == 0 for r in rows)
    batches = [[_dyadic_smoothing_ratio(replace(base, seed=s, measure="jittered"), p.sigma)
                for s in range(b * ratio_seeds, (b + 1) * ratio_seeds)] for b in (0, 1)]
    ceil = [max(b) for b in batches]
    stable = all(math.isfinite(c) and c > 0 for c in ceil) and max(ceil) <= stability * min(ceil)
    trial_ratio = max((r["mean_ratio"] for r in rows), default=0.0)
    return SuiteResult("surgery", sound and stable and math.isfinite(trial_ratio), {
        "trials": len(rows), "matched": sum(r["matched"] for r in rows),
        "child_pairs": sum(r["child_pairs"] for r in rows),
        "five_failures": sum(r["five_failures"] for r in rows),
        "containment_failures": sum(r["containment_failures"] for r in rows),
        "trial_ratio_ceiling": trial_ratio, "ratio_ceiling_a": ceil[0], "ratio_ceiling_b": ceil[1]}, rows)


def pairing_suite(scenario: pr.Scenario | None = None, params: pr.Params | None = None, trials: int = 32,
                  workers: int = 1, tol: float = 1e-8, zero_tol: float = 1e-9,
                  symmetric_trials: int = 4) -> tuple[SuiteResult, pr.PairingReport]:
    """Resummation residual over the trials, and the f = g total for an antisymmetric kernel."""
    scenario = pr.Scenario() if scenario is None else scenario
    params = pr.Params() if params is None else params
    rep = pr.full_report(scenario, params, trials, workers=workers)
    metrics = {"trials": len(rep.trials), "max_residual": rep.max_residual}
    metrics.update(rep.normalized())
    ok = rep.max_residual <= tol
    if symmetric_trials and scenario.kernel in ("cauchy", "riesz"):
        same = pr.build_scenario(replace(scenario, functions="same"))
        fn = math.sqrt(float(np.dot(same.f**2, same.mu.weights)))
        scale = same.T_norm * fn * fn or 1.0
        worst = 0.0
        for t in range(symmetric_trials):
            res = pr.run_trial(same, params, t)
            worst = max(worst, abs(sum(res.pieces.values())) / scale)
        metrics["symmetric_total"] = worst
        ok &= worst <= zero_tol
    rows = [{"trial": t.index, "exact": t.exact, "residual": t.residual, "c_total": t.c_total,
             "t_total": t.t_total, **{f"piece_{k}": v for k, v in t.pieces.items()}} for t in rep.trials]
    return SuiteResult("pairing", ok, metrics, rows), rep


def schur_suite(seeds=range(5), depths=(6, 8), limit: float = 2.0, gamma: float = 0.25, r: int = 3,
                pair_trials: int = 2) -> SuiteResult:
    """Top singular values of the separated and nested coupling matrices at two depths.

    Also records the constant of the pairwise separated bound from pairing trials.
    """
    mu = uniform_measure(384, -12, 12)
    k = cauchy_kernel()
    rows, ok = [], True
    for s in seeds:
        rng = np.random.default_rng(s)
        shifts = (random_shift(rng, 3, 1), random_shift(rng, 3, 1))
        norms = []
        for depth in depths:
            pq, prr = (GridPartition(build_grid(w, 3, depth, 1), mu.points) for w in shifts)
            rep = pr.schur_norm(pq, prr, cube_sums(pq, mu.weights), cube_sums(prr, mu.weights), k, gamma, r)
            norms.append((rep.separated_norm, rep.nested_norm))
            rows.append({"seed": s, "depth": depth, "separated": rep.separated_norm, "nested": rep.nested_norm,
                         "n_separated": rep.n_separated, "n_nested": rep.n_nested, "note": rep.note})
        (a0, b0), (a1, b1) = norms[0], norms[-1]
        ratios = (max(a0, a1) / min(a0, a1), max(b0, b1) / min(b0, b1))
        rows[-1]["separated_ratio"], rows[-1]["nested_ratio"] = ratios
        ok &= all(math.isfinite(x) and x <= limit for x in ratios)
    data = pr.build_scenario(pr.Scenario(depth=min(depths)))
    consts = [pr.run_trial(data, pr.Params(), t).diagnostics["separated_constant"] for t in range(pair_trials)]
    ok &= all(math.isfinite(c) for c in consts)
    return SuiteResult("schur", ok, {
        "max_separated_ratio": max(r_["separated_ratio"] for r_ in rows if "separated_ratio" in r_),
        "max_nested_ratio": max(r_["nested_ratio"] for r_ in rows if "nested_ratio" in r_),
        "pairwise_constant": max(consts, default=0.0)}, rows)


# oracles ------------------------------------------------------------------------------


def power_iteration_norm(op: DiscretizedOperator, seed: int = 0, max_iter: int = 50_000,
                         rtol: float = 1e-15) -> float:
    """L2(mu) operator norm by power iteration on the symmetrized Gram matrix."""
    sw = np.sqrt(op.mu.weights)
    S = sw[:, None] * op.K * sw[None, :]
    G = S.T @ S
    x = np.random.default_rng(seed).standard_normal(G.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = G @ x
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        if abs(new - lam) <= rtol * new:
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


def _brute_centred(mu: DiscreteMeasure, h: np.ndarray) -> np.ndarray:
    out = np.empty(mu.n_atoms)
    for i in range(mu.n_atoms):
        d = np.linalg.norm(mu.points - mu.points[i], axis=1)
        best = 0.0
        for rad in np.unique(d):
            ball = d <= rad
            best = max(best, float(np.sum(np.abs(h[ball]) * mu.weights[ball]) / mu.weights[ball].sum()))
        out[i] = best
    return out


def _brute_dyadic(mu: DiscreteMeasure, h: np.ndarray, grid) -> np.ndarray:
    out = np.zeros(mu.n_atoms)
    for i, x in enumerate(mu.points):
        for g in range(grid.depth + 1):
            Q = grid.cube_at(x, g)
            if Q is None:
                continue
            inQ = Q.contains_points(mu.points)
            out[i] = max(out[i], float(np.sum(np.abs(h[inQ]) * mu.weights[inQ]) / mu.weights[inQ].sum()))
    return out


def oracle_measures(seed: int = 0) -> list[tuple[str, DiscreteMeasure, KernelSpec]]:
    return [("uniform-1d", uniform_measure(128, -1, 1), cauchy_kernel()),
            ("jittered-1d", jittered_mesh(seed, 200), cauchy_kernel()),
            ("jittered-2d", jittered_mesh(seed + 1, 16, 2), riesz_kernel(2))]


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.abs(a), np.abs(b))
    return float(np.max(np.where(scale > 0, np.abs(a - b) / np.where(scale > 0, scale, 1.0), 0.0)))


def oracle_suite(seed: int = 0, tol: float = 1e-6, max_tol: float = 1e-14) -> SuiteResult:
    """Dense norm against power iteration; both maximal functions against loops.

    Maximal values agree up to summation order, so ``max_tol`` is a few ulps.
    """
    rows, ok = [], True
    for name, mu, k in oracle_measures(seed):
        op = discretize(k, mu)
        dense, power = op.op_norm(), power_iteration_norm(op, seed)
        rel = abs(dense - power) / dense
        h = np.random.default_rng([seed, mu.n_atoms]).uniform(-1, 1, mu.n_atoms)
        grid = build_grid(random_shift(np.random.default_rng(seed), 0, mu.dimension), 0, 5, mu.dimension)
        c_err = _rel_err(centred_maximal(mu, h), _brute_centred(mu, h))
        d_err = _rel_err(dyadic_maximal(mu, h, grid), _brute_dyadic(mu, h, grid))
        good = rel <= tol and c_err <= max_tol and d_err <= max_tol
        ok &= good
        rows.append({"measure": name, "atoms": mu.n_atoms, "dense": dense, "power": power, "relative": rel,
                     "centred_error": c_err, "dyadic_error": d_err, "passed": good})
    return SuiteResult("oracles", ok, {"max_norm_relative": max(r["relative"] for r in rows),
                                       "max_centred_error": max(r["centred_error"] for r in rows),
                                       "max_dyadic_error": max(r["dyadic_error"] for r in rows)}, rows)


def kernel_suite(k: KernelSpec, mu: DiscreteMeasure, samples: int = 2000, seed: int = 0) -> SuiteResult:
    rep = verify_standard(k, mu, samples, seed)
    return SuiteResult("verify-kernel", rep.passed, {
        "size_ratio": rep.size_ratio, "holder_x_ratio": rep.holder_x_ratio,
        "holder_y_ratio": rep.holder_y_ratio, "triples": rep.n_triples})


def growth_suite(mu: DiscreteMeasure, bound: float | None = None) -> SuiteResult:
    c = verify_growth(mu)
    ok = math.isfinite(c) and (bound is None or c <= bound)
    return SuiteResult("growth", ok, {"growth_constant": c, "bound": bound if bound is not None else "none"})
