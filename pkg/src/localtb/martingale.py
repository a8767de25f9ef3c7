"""Twisted and classical martingale differences, transforms, maximal truncations
and the John–Nirenberg iteration, all on the cube partition of a stopping tree.

Per-generation quantities are atom arrays: ``terms[g][x]`` is the value at x of
the object attached to the generation-g cube containing x.  Sums over cubes of a
fixed generation are then plain array sums, since those cubes are disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Cube, GridPartition
from .measure import DiscreteMeasure, as_atom_fn, cube_sums, lp_norm, spread, weak_lp_quasinorm
from .stopping import StoppingTree
from .testfns import TestFunctionFamily

# the stopping construction keeps every non-stopping average of b_F at or above this
ACCRETIVE_FLOOR = 0.5


def _gid(part: GridPartition, Q) -> int:
    if isinstance(Q, Cube):
        gid = part.find(Q)
        if gid is None:
            raise ValueError("cube has zero mass")
        return gid
    return int(Q)


def _check_accretive(avg: np.ndarray, where: np.ndarray) -> None:
    low = where & (np.abs(avg) < ACCRETIVE_FLOOR * (1 - 1e-12))
    if np.any(low):
        raise AssertionError(f"average of the stopping function below 1/2 on cube {int(np.flatnonzero(low)[0])}")


def ancestor_profiles(tree: StoppingTree) -> list[np.ndarray]:
    """``out[g][x] = b_{Q^a}(x)`` where Q is the generation-g cube containing x."""
    fam = tree.family
    stack = np.stack(fam.values)
    cols = np.arange(fam.mu.n_atoms)
    out = []
    for g in range(tree.part.depth + 1):
        anc = tree.anc_atoms(g)
        ag = np.where(anc >= 0, tree.part.gen[np.maximum(anc, 0)], 0)
        out.append(np.where(anc >= 0, stack[ag, cols], 0.0))
    return out


@dataclass(frozen=True)
class MartingaleDecomposition:
    """``f = sum_Q Delta_Q f + <f>_{Q*} b_{Q*}`` realized through telescoping terms.

    ``terms[g][x] = <f>_Q / <b_{Q^a}>_Q * b_{Q^a}(x)`` for the generation-g cube Q
    containing x, so ``Delta_Q f = (terms[g+1] - terms[g]) 1_Q``.
    """

    tree: StoppingTree
    family: TestFunctionFamily
    f: np.ndarray
    terms: tuple = field(repr=False)

    @property
    def part(self) -> GridPartition:
        return self.tree.part

    @property
    def mu(self) -> DiscreteMeasure:
        return self.family.mu

    @property
    def residual_term(self) -> np.ndarray:
        return self.terms[0]

    def generation_piece(self, g: int) -> np.ndarray:
        """Sum of ``Delta_Q f`` over the generation-g cubes (zero at the finest generation)."""
        if g >= self.part.depth:
            return np.zeros(self.mu.n_atoms)
        return self.terms[g + 1] - self.terms[g]

    def piece(self, Q) -> np.ndarray:
        gid = _gid(self.part, Q)
        return np.where(self.part.atom_mask(gid), self.generation_piece(int(self.part.gen[gid])), 0.0)

    def norms_sq(self) -> np.ndarray:
        """``||Delta_Q f||^2`` per cube id."""
        w = self.mu.weights
        out = np.zeros(self.part.n_cubes)
        for g in range(self.part.depth):
            ids = self.part.gids_at(g)
            out[ids] = cube_sums(self.part, self.generation_piece(g) ** 2 * w)[ids]
        return out

    def reconstruct(self) -> np.ndarray:
        out = self.residual_term.copy()
        for g in range(self.part.depth):
            out += self.generation_piece(g)
        return out

    def reconstruction_residual(self) -> float:
        """Max-norm of ``f`` minus the resummed expansion, over atoms in the root."""
        inside = self.part.inside
        if not inside.any():
            return 0.0
        return float(np.max(np.abs(self.f - self.reconstruct())[inside]))


def expand(tree: StoppingTree, fam: TestFunctionFamily | None, f) -> MartingaleDecomposition:
    fam = tree.family if fam is None else fam
    part, mu = tree.part, fam.mu
    f = as_atom_fn(mu, f)
    if np.any(f[~part.inside] != 0):
        raise ValueError("f must be supported in the root cube")
    w = mu.weights
    mass = fam.mass
    terms = []
    for g, prof in enumerate(ancestor_profiles(tree)):
        ids = part.gids_at(g)
        avg_b = cube_sums(part, prof * w) / mass
        _check_accretive(avg_b, np.isin(np.arange(part.n_cubes), ids))
        avg_f = cube_sums(part, f * w) / mass
        coef = np.zeros(part.n_cubes)
        coef[ids] = avg_f[ids] / avg_b[ids]
        terms.append(spread(part, coef, g) * prof)
    return MartingaleDecomposition(tree, fam, f, tuple(terms))


def twisted_delta(tree: StoppingTree, fam: TestFunctionFamily | None, f, Q) -> np.ndarray:
    """``Delta_Q f`` child by child, straight from the definition."""
    fam = tree.family if fam is None else fam
    part, mu = tree.part, fam.mu
    f = as_atom_fn(mu, f)
    w = mu.weights
    gid = _gid(part, Q)

    def coef_and_b(S):
        F = int(tree.anc[S])
        bF = fam.b(F)
        mask = part.atom_mask(S)
        avg_b = np.dot(bF[mask], w[mask]) / fam.mass[S]
        _check_accretive(np.array([avg_b]), np.array([True]))
        return np.dot(f[mask], w[mask]) / fam.mass[S] / avg_b, bF

    c_par, b_par = coef_and_b(gid)
    out = np.zeros(mu.n_atoms)
    for child in part.children(gid):
        c_kid, b_kid = coef_and_b(int(child))
        mask = part.atom_mask(int(child))
        out[mask] = c_kid * b_kid[mask] - c_par * b_par[mask]
    return out


def square_function_ratio(dec: MartingaleDecomposition, mu: DiscreteMeasure | None = None) -> float:
    """``sum_Q ||Delta_Q f||^2 / mu(Q*)``."""
    mass = dec.family.mass
    return float(dec.norms_sq().sum() / mass[dec.tree.root])


@dataclass
class TransformSpec:
    """Coefficients ``eps[gid]`` in [-1, 1]; ``F`` restricts to cubes whose stopping ancestor is F."""

    eps: np.ndarray
    F: int | None = None

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=float)
        if np.any(np.abs(self.eps) > 1.0):
            raise ValueError("transform coefficients must satisfy |eps| <= 1")

    @classmethod
    def constant(cls, part: GridPartition, value: float = 1.0, F: int | None = None) -> "TransformSpec":
        return cls(np.full(part.n_cubes, float(value)), F)

    @classmethod
    def random_signs(cls, part: GridPartition, seed: int, F: int | None = None) -> "TransformSpec":
        return cls(np.random.default_rng(seed).choice([-1.0, 1.0], part.n_cubes), F)

    def stopping_children(self, tree: StoppingTree) -> np.ndarray:
        """The set H of next-generation stopping cubes inside F."""
        if self.F is None:
            return np.zeros(0, dtype=np.int64)
        return tree.children_of(self.F)

    def selected(self, tree: StoppingTree) -> np.ndarray:
        """Cube-id mask of the cubes the transform sums over."""
        if self.F is None:
            return np.ones(tree.part.n_cubes, bool)
        return tree.anc == self.F


def _transform_sum(dec: MartingaleDecomposition, eps: np.ndarray, sel: np.ndarray) -> np.ndarray:
    out = np.zeros(dec.mu.n_atoms)
    for g in range(dec.part.depth):
        out += spread(dec.part, np.where(sel, eps, 0.0), g) * dec.generation_piece(g)
    return out


def _cubes_within(part: GridPartition, within: np.ndarray) -> np.ndarray:
    """Cube ids all of whose atoms lie in the atom mask ``within``."""
    outside = cube_sums(part, (~within & part.inside).astype(float))
    return outside == 0


def greedy_signs(dec: MartingaleDecomposition, sel: np.ndarray) -> np.ndarray:
    """Coarse-to-fine sign choice maximizing the running ``L2`` norm of the transform.

    Cubes of one generation are disjoint, so each picks the sign of its inner
    product with the running sum independently.
    """
    w = dec.mu.weights
    eps = np.ones(dec.part.n_cubes)
    cur = np.zeros(dec.mu.n_atoms)
    for g in range(dec.part.depth):
        piece = dec.generation_piece(g)
        ip = cube_sums(dec.part, cur * piece * w)
        ids = dec.part.gids_at(g)
        eps[ids] = np.where(ip[ids] >= 0, 1.0, -1.0)
        cur += spread(dec.part, np.where(sel, eps, 0.0), g) * piece
    return eps


def transform_norm(tree: StoppingTree, fam: TestFunctionFamily | None, F: int | None,
                   spec: TransformSpec | str, h, within: np.ndarray | None = None) -> float:
    """``||sum_{Q^a = F} eps_Q Delta_Q h||^2 / ||h||^2``.

    ``spec="greedy"`` picks adversarial signs.  With an atom mask ``within``, only
    cubes inside it are summed and the result is normalized by ``mu(within & F)``.
    """
    dec = expand(tree, fam, h)
    mu = dec.mu
    if isinstance(spec, TransformSpec):
        F = spec.F if F is None else F
    sel = TransformSpec(np.zeros(0), F).selected(tree)
    if within is not None:
        sel = sel & _cubes_within(tree.part, np.asarray(within, bool))
    eps = greedy_signs(dec, sel) if isinstance(spec, str) else spec.eps
    total = _transform_sum(dec, eps, sel)
    num = float(np.dot(total**2, mu.weights))
    if within is not None:
        inF = tree.part.atom_mask(F) if F is not None else tree.part.inside
        den = float(mu.weights[np.asarray(within, bool) & inF].sum())
    else:
        den = float(np.dot(dec.f**2, mu.weights))
    return 0.0 if den == 0 else num / den


def half_twisted(tree: StoppingTree, fam: TestFunctionFamily | None, F: int, h, Q) -> np.ndarray:
    """``D_Q h``: constant on each child of Q outside H, zero on the stopping children."""
    fam = tree.family if fam is None else fam
    part, mu = tree.part, fam.mu
    h = as_atom_fn(mu, h)
    w = mu.weights
    gid = _gid(part, Q)
    if int(tree.anc[gid]) != F:
        raise ValueError("D_Q needs Q^a = F")
    bF = fam.b(F)

    def ratio(S):
        mask = part.atom_mask(S)
        avg_b = np.dot(bF[mask], w[mask]) / fam.mass[S]
        _check_accretive(np.array([avg_b]), np.array([True]))
        return np.dot(h[mask], w[mask]) / np.dot(bF[mask], w[mask]), mask

    par, _ = ratio(gid)
    out = np.zeros(mu.n_atoms)
    for child in part.children(gid):
        child = int(child)
        if int(tree.anc[child]) != F:
            continue  # a stopping child, i.e. a member of H
        r, mask = ratio(child)
        out[mask] = r - par
    return out


class TruncationFamily:
    """Elementary operators ``A_Q h = sum_{Q' in ch(Q)} (a_{Q'} <h>_{Q'} + c_{Q'} <h>_Q) 1_{Q'}``.

    ``a`` and ``c`` are indexed by the child's cube id (entries of root-generation
    cubes are unused).  The stored operators are the given ones divided by
    ``scale``; ``|a| + |c| <= scale`` is checked, which gives ``|A_Q h| <= M^D h``.
    """

    def __init__(self, part: GridPartition, mu: DiscreteMeasure, a, c, scale: float = 1.0):
        a = np.asarray(a, dtype=float) / scale
        c = np.asarray(c, dtype=float) / scale
        if a.shape != (part.n_cubes,) or c.shape != (part.n_cubes,):
            raise ValueError("coefficients must be indexed by cube id")
        if np.any(np.abs(a) + np.abs(c) > 1.0 + 1e-12):
            raise ValueError("coefficients exceed the dyadic maximal bound")
        self.part = part
        self.mu = mu
        self.a = a
        self.c = c
        self.scale = float(scale)
        self._mass = cube_sums(part, mu.weights)

    def generation_terms(self, h) -> list[np.ndarray]:
        """``out[g] = sum of A_Q h over generation-g cubes Q``, for g below the finest."""
        h = as_atom_fn(self.mu, h)
        part = self.part
        avg = cube_sums(part, h * self.mu.weights) / self._mass
        out = []
        for g in range(part.depth):
            kid = spread(part, self.a, g + 1) * spread(part, avg, g + 1)
            out.append(kid + spread(part, self.c, g + 1) * spread(part, avg, g))
        return out

    def phis(self) -> np.ndarray:
        """Child coefficients of ``A_Q 1``; bounded by 1 in absolute value."""
        return self.a + self.c


def _local_sups(part: GridPartition, terms: list[np.ndarray]) -> np.ndarray:
    """``out[s][x] = max_k |sum_{s <= g < k} terms[g][x]|``.

    This is ``sup_eps`` of the truncated sum over cubes inside the generation-s
    cube containing x; the sum is constant between consecutive side lengths.
    """
    n = part.n_atoms
    out = np.zeros((part.depth + 1, n))
    for s in range(part.depth):
        run = np.zeros(n)
        best = np.zeros(n)
        for g in range(s, part.depth):
            run += terms[g]
            np.maximum(best, np.abs(run), out=best)
        out[s] = best
    return out


def maximal_truncation(famly: TruncationFamily, h, P=None) -> np.ndarray:
    """``A_# h`` (or ``A_#^P h`` for a cube P) at every atom."""
    part = famly.part
    terms = famly.generation_terms(h)
    if P is None:
        return _local_sups(part, terms)[0]
    gid = _gid(part, P)
    s = int(part.gen[gid])
    run = np.zeros(part.n_atoms)
    best = np.zeros(part.n_atoms)
    for g in range(s, part.depth):
        run += terms[g]
        np.maximum(best, np.abs(run), out=best)
    return np.where(part.atom_mask(gid), best, 0.0)


def classical_family(part: GridPartition, mu: DiscreteMeasure, eps, keep=None) -> TruncationFamily:
    """``eps_Q (<h>_{Q'} - <h>_Q)`` on children with ``keep[Q']``; scale 2."""
    eps = np.asarray(eps, dtype=float)
    par = np.maximum(part.parent, 0)
    on = part.parent >= 0
    if keep is not None:
        on = on & np.asarray(keep, bool)
    e = np.where(on, eps[par], 0.0)
    return TruncationFamily(part, mu, e, -e, scale=2.0)


def half_twisted_family(tree: StoppingTree, F: int, eps, within=None) -> TruncationFamily:
    """The operators ``eps_Q D_Q`` over ``Q^a = F`` (optionally ``Q`` inside cube ``within``); scale 4."""
    part, fam = tree.part, tree.family
    w = fam.mu.weights
    eps = np.asarray(eps, dtype=float)
    avg_bF = cube_sums(part, fam.b(F) * w) / fam.mass
    par = np.maximum(part.parent, 0)
    on = (part.parent >= 0) & (tree.anc[par] == F) & (tree.anc == F)
    if within is not None:
        P = _gid(part, within)
        inP = cube_sums(part, part.atom_mask(P) * w) == fam.mass
        on &= inP[par]
    _check_accretive(avg_bF, on)
    _check_accretive(avg_bF[par], on)
    a = np.where(on, eps[par] / np.where(on, avg_bF, 1.0), 0.0)
    c = np.where(on, -eps[par] / np.where(on, avg_bF[par], 1.0), 0.0)
    return TruncationFamily(part, fam.mu, a, c, scale=4.0)


@dataclass
class SawyerReport:
    testing: float  # max of int_Q A_#^Q h / (||h 1_Q||_p mu(Q)^(1/p'))
    weak: float  # max of ||A_# h||_{p,inf} / ||h||_p
    strong: float  # max of ||A_# h||_p / ||h||_p
    chebyshev_ok: bool  # weak quasinorm never above the strong norm


def sawyer_testing_check(famly: TruncationFamily, p: float, probes) -> SawyerReport:
    if not p > 1:
        raise ValueError("p must exceed 1")
    part, mu = famly.part, famly.mu
    w = mu.weights
    mass = famly._mass
    testing = weak = strong = 0.0
    cheb = True
    for h in probes:
        h = as_atom_fn(mu, h)
        hn = lp_norm(mu, h, p)
        if hn == 0:
            continue
        local = _local_sups(part, famly.generation_terms(h))
        hp = cube_sums(part, np.abs(h) ** p * w) ** (1 / p)
        for s in range(part.depth + 1):
            ids = part.gids_at(s)
            integ = cube_sums(part, local[s] * w)[ids]
            den = hp[ids] * mass[ids] ** (1 - 1 / p)
            ok = den > 0
            if ok.any():
                testing = max(testing, float(np.max(integ[ok] / den[ok])))
        full = local[0]
        wq = weak_lp_quasinorm(mu, full, p)
        sq = lp_norm(mu, full, p)
        cheb &= wq <= sq * (1 + 1e-12)
        weak = max(weak, wq / hn)
        strong = max(strong, sq / hn)
    return SawyerReport(testing, weak, strong, cheb)


@dataclass
class JNResult:
    P0: int
    collections: list  # collections[j-1] = cube ids of R_j
    sets: list  # atom masks of S_j
    Phi: np.ndarray  # Phi_{P0} per atom (0 outside P0)
    mass_P0: float
    hypothesis_ok: bool
    violating: int | None  # a cube P with mu(Phi_P > 1) > mu(P)/2
    worst_fraction: float

    def tail(self, mu: DiscreteMeasure, t: float) -> float:
        """``mu({Phi_{P0} > t}) / mu(P0)``."""
        return float(np.dot(self.Phi > t, mu.weights) / self.mass_P0)


def phi_terms(part: GridPartition, phi: np.ndarray) -> list[np.ndarray]:
    """Per generation g, the atom array of ``phi_Q`` for the generation-g cubes Q."""
    return [spread(part, phi, g + 1) for g in range(part.depth)]


def jn_hypothesis(part: GridPartition, mu: DiscreteMeasure, phi: np.ndarray) -> tuple[bool, int | None, float]:
    """Check ``mu({x in P: Phi_P > 1}) <= mu(P)/2`` for every positive-mass P."""
    w = mu.weights
    mass = cube_sums(part, w)
    local = _local_sups(part, phi_terms(part, phi))
    worst, who = 0.0, None
    for s in range(part.depth + 1):
        ids = part.gids_at(s)
        frac = cube_sums(part, (local[s] > 1) * w)[ids] / mass[ids]
        k = int(np.argmax(frac))
        if frac[k] > worst:
            worst, who = float(frac[k]), int(ids[k])
    ok = worst <= 0.5
    return ok, (None if ok else who), worst


def jn_decompose(part: GridPartition, mu: DiscreteMeasure, phi, P0=0) -> JNResult:
    """Iterated maximal collections where the partial sums of ``phi_Q`` restart.

    ``phi[gid]`` is the value of ``phi_{parent(gid)}`` on the child ``gid``.
    A cube R enters the next collection when the sum over ``R < Q <= current top``
    exceeds 1 in absolute value; R then becomes the new top for its atoms.
    """
    phi = np.asarray(phi, dtype=float)
    if np.any(np.abs(phi) > 1.0 + 1e-12):
        raise ValueError("phi must be bounded by 1")
    P0 = _gid(part, P0)
    s = int(part.gen[P0])
    inP = part.atom_mask(P0)
    ok, who, worst = jn_hypothesis(part, mu, phi)
    terms = phi_terms(part, phi)
    level = np.zeros(part.n_atoms, dtype=np.int64)
    run = np.zeros(part.n_atoms)
    total = np.zeros(part.n_atoms)
    Phi = np.zeros(part.n_atoms)
    found: dict[int, list] = {}
    for k in range(s + 1, part.depth + 1):
        run += np.where(inP, terms[k - 1], 0.0)
        total += np.where(inP, terms[k - 1], 0.0)
        np.maximum(Phi, np.abs(total), out=Phi)
        hit = inP & (np.abs(run) > 1.0)
        if hit.any():
            lab = part.gid_labels(k)
            for j in np.unique(level[hit]):
                found.setdefault(int(j), []).extend(np.unique(lab[hit & (level == j)]).tolist())
            level[hit] += 1
            run[hit] = 0.0
    n_levels = max(found) + 1 if found else 0
    collections = [np.array(sorted(found.get(j, [])), dtype=np.int64) for j in range(n_levels)]
    sets = [inP & (level >= j + 1) for j in range(n_levels)]
    return JNResult(P0, collections, sets, Phi, float(mu.weights[inP].sum()), ok, who, worst)


def carleson_sequence_ratio(part: GridPartition, mu: DiscreteMeasure, alphas) -> float:
    """``sup_R sum_{Q inside R} alpha_Q / mu(R)`` over positive-mass cubes R."""
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas < 0):
        raise ValueError("Carleson weights must be nonnegative")
    acc = alphas.copy()
    for g in range(part.depth, 0, -1):
        ids = part.gids_at(g)
        np.add.at(acc, part.parent[ids], acc[ids])
    return float(np.max(acc / cube_sums(part, mu.weights)))


def stopping_child_weights(tree: StoppingTree, F: int) -> np.ndarray:
    """``alpha_Q = sum over children Q' of Q in H of int_{Q'} |b_F|^2`` when ``Q^a = F``."""
    fam = tree.family
    w = fam.mu.weights
    energy = cube_sums(tree.part, fam.b(F) ** 2 * w)
    out = np.zeros(tree.part.n_cubes)
    for H in tree.children_of(F):
        out[tree.part.parent[H]] += energy[H]
    return out


def classical_truncation_norm(part: GridPartition, mu: DiscreteMeasure, spec: TransformSpec, p: float,
                              probes, tree: StoppingTree | None = None) -> dict:
    """Maximal truncations of a classical martingale transform, over probes.

    ``full`` sums every cube; ``removed`` (needs ``tree`` and ``spec.F``) keeps
    the cubes with ``Q^a = F`` and drops the stopping children H.
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    fams = {"full": classical_family(part, mu, spec.eps)}
    if tree is not None and spec.F is not None:
        par = np.maximum(part.parent, 0)
        keep = (tree.anc[par] == spec.F) & (tree.anc == spec.F)
        fams["removed"] = classical_family(part, mu, spec.eps, keep)
    out = {k: 0.0 for k in fams}
    for h in probes:
        h = as_atom_fn(mu, h)
        hn = lp_norm(mu, h, p)
        if hn == 0:
            continue
        for k, fm in fams.items():
            val = lp_norm(mu, fm.scale * maximal_truncation(fm, h), p) / hn
            out[k] = max(out[k], val)
    return out


def dq1_testing(tree: StoppingTree, fam: TestFunctionFamily | None, F: int, spec: TransformSpec,
                P, p: float) -> float:
    """``||sup_eps |sum_{Q^a=F, Q in P} eps_Q D_Q 1|||_p^p / mu(P)``."""
    if p < 1:
        raise ValueError("p must be at least 1")
    fm = half_twisted_family(tree, F, spec.eps, within=P)
    mu = tree.family.mu
    gid = _gid(tree.part, P)
    vals = fm.scale * maximal_truncation(fm, np.where(tree.part.inside, 1.0, 0.0), gid)
    return float(np.dot(vals**p, mu.weights) / tree.family.mass[gid])


def dq_maximal_norm(tree: StoppingTree, fam: TestFunctionFamily | None, F: int, spec: TransformSpec,
                    h, p: float) -> float:
    """``||sup_eps |sum_{Q^a=F} eps_Q D_Q h|||_p / ||h||_p``."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    mu = tree.family.mu
    h = as_atom_fn(mu, h)
    hn = lp_norm(mu, h, p)
    if hn == 0:
        return 0.0
    fm = half_twisted_family(tree, F, spec.eps)
    return lp_norm(mu, fm.scale * maximal_truncation(fm, h), p) / hn


SUITES = ("square", "transform", "dq1", "dq_maximal")


def cell_probe(part: GridPartition, points: np.ndarray, seed: int, generation: int | None = None) -> np.ndarray:
    """Values uniform in [-1, 1], constant on grid cells of one generation, zero outside the root.

    Each cell's value is keyed by its lattice position, so the probe is the same
    function of space whatever the atoms are.
    """
    g = part.depth if generation is None else int(generation)
    dim = part.grid.dimension
    table = np.random.default_rng([seed, g]).uniform(-1.0, 1.0, 2 ** (g * dim))
    idx = np.clip(part.grid.locate(points, g), 0, 2**g - 1)
    flat = np.ravel_multi_index(tuple(idx.T), (2**g,) * dim)
    return np.where(part.inside, table[flat], 0.0)


def sweep_instance(tree: StoppingTree, seed: int, suites=SUITES, n_probes: int = 2) -> dict:
    """Largest ratio of each suite over probes and stopping cubes of one tree.

    square: square function of a bounded probe; transform: greedy-sign
    transform over ``Q^a = F``; dq1: ``D_Q 1`` truncations over P in {F, children
    of F} with p in {1, 2, 4}; dq_maximal: ``D_Q h`` truncations, p = 2, with
    all-plus and random signs.
    """
    part, mu = tree.part, tree.family.mu
    probes = [cell_probe(part, mu.points, seed * 1000 + k) for k in range(n_probes)]
    out = {}
    if "square" in suites:
        out["square"] = max(square_function_ratio(expand(tree, None, h)) for h in probes)
    stops = [int(F) for F in tree.stop_gids]
    if "transform" in suites:
        out["transform"] = max(transform_norm(tree, None, F, "greedy", h) for F in stops for h in probes)
    signs = [TransformSpec.constant(part, 1.0), TransformSpec.random_signs(part, seed)]
    if "dq1" in suites:
        best = 0.0
        for F in stops:
            cands = [F] + [int(q) for q in part.children(F) if tree.anc[q] == F]
            for P in cands:
                for spec in signs:
                    for p in (1, 2, 4):
                        best = max(best, dq1_testing(tree, None, F, spec, P, p))
        out["dq1"] = best
    if "dq_maximal" in suites:
        out["dq_maximal"] = max(dq_maximal_norm(tree, None, F, spec, h, 2)
                                for F in stops for spec in signs for h in probes)
    return out


@dataclass
class SweepRow:
    suite: str
    seed: int
    params: str
    ratio: float
    ceiling: float = float("nan")


def with_ceilings(rows: list[SweepRow]) -> list[SweepRow]:
    """Fill each row's ceiling with the largest ratio of its suite."""
    top: dict[str, float] = {}
    for r in rows:
        top[r.suite] = max(top.get(r.suite, 0.0), r.ratio)
    for r in rows:
        r.ceiling = top[r.suite]
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["suite", "seed", "instance-params", "ratio", "ceiling"])
        for r in rows:
            wr.writerow([r.suite, r.seed, r.params, f"{r.ratio:.17g}", f"{r.ceiling:.17g}"])
