"""Exact decomposition of ``<Tf, g>`` over two independent random grids.

Every piece below is an exact bilinear quantity; the estimates that bound each
piece are reported next to it but never used to produce a value.  The pieces
resum to ``<Tf, g>`` up to rounding, and each bucket is checked against an
independent route as it is computed (``BookkeepingError`` names the bucket that
fails).

Orientation: the f-side grid carries ``Delta_Q f`` and the T-family, the g-side
grid carries ``Delta_R g`` and the T*-family.  Pair values are always
``<T(Delta_Q f), Delta_R g>``; the half where the g-side cube is the smaller one
is handled by the same code with the roles swapped and T replaced by T*.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .czo import DiscretizedOperator, KernelSpec
from .geometry import (Cube, GridPartition, ShiftedDyadicGrid, alpha_from_bad, bad_generations,
                       boundary_collar, box_distance, build_grid, random_shift)
from .measure import DiscreteMeasure, centred_maximal, cube_sums, spread
from .martingale import MartingaleDecomposition, ancestor_profiles, expand
from .stopping import StoppingTree
from .testfns import TestFunctionFamily

SEPARATED, NESTED, DIAGONAL = 0, 1, 2
BUCKETS = ("separated", "nested", "diagonal")
RESUM_TOL = 1e-8


class BookkeepingError(RuntimeError):
    """An exact identity between two routes failed beyond rounding."""


def _check_resum(name: str, total: float, parts, tol: float = RESUM_TOL, floor: float = 0.0) -> float:
    """Relative check; ``floor`` (a Cauchy-Schwarz size of the quantity) guards values that are pure rounding."""
    parts = np.atleast_1d(np.asarray(parts, dtype=float))
    scale = max(abs(total), float(np.abs(parts).sum()), floor, 1e-300)
    err = abs(float(parts.sum()) - total) / scale
    if err > tol:
        raise BookkeepingError(f"{name}: pieces resum with relative error {err:.3e}")
    return err


@dataclass(frozen=True)
class Params:
    lam: float = 8.0  # root enlargement: bounds are normalized by mu(lam Q0)
    beta: int = 4  # stopping-generation cutoff
    gamma: float | None = None  # None: alpha / (2m + 2 alpha) from the kernel
    r: int = 3
    theta: float = 2.0**-8
    sigma: float = 2.0**-12
    u: float = 1.0 / 8.0  # collar width around Q*
    trials: int = 32
    fit_trials: int = 256

    def __post_init__(self):
        if self.lam <= 1:
            raise ValueError("lambda must exceed 1")
        if self.beta < 1 or self.r < 1:
            raise ValueError("beta and r must be positive integers")
        if self.gamma is not None and not (0.0 < self.gamma < 0.5):
            raise ValueError("gamma must lie in (0, 1/2)")
        if not (0.0 < self.theta < 2.0**-4):
            raise ValueError("theta must lie in (0, 1/16)")
        if not (0.0 < self.sigma < 0.5):
            raise ValueError("sigma must lie in (0, 1/2)")
        if not (0.0 <= self.u < 1.0):
            raise ValueError("u must lie in [0, 1)")

    def gamma_for(self, kernel: KernelSpec) -> float:
        derived = kernel.alpha / (2.0 * kernel.m + 2.0 * kernel.alpha)
        if self.gamma is None:
            return derived
        return self.gamma

    @property
    def j_theta(self) -> int:
        """The integer j with ``2^-21 theta <= 2^j < 2^-20 theta``."""
        mant, ex = math.frexp(self.theta)  # theta = mant * 2^ex, mant in [1/2, 1)
        j = ex - 22 if mant == 0.5 else ex - 21
        assert 2.0**-21 * self.theta <= 2.0**j < 2.0**-20 * self.theta
        return j

    @staticmethod
    def root_scale(q0_side: float) -> int:
        """N with ``2^(N-3) <= side(Q0) < 2^(N-2)``."""
        if q0_side <= 0:
            raise ValueError("Q0 must have positive side")
        mant, ex = math.frexp(q0_side)
        return ex - 1 + 3

    def covers(self, q0_side: float) -> bool:
        """Whether ``lam Q0`` contains every possible root ``w + [-2^N, 2^N]^n``."""
        N = self.root_scale(q0_side)
        return self.lam * q0_side / 2.0 >= 1.5 * 2.0**N


# pair classification -------------------------------------------------------


@dataclass
class PairSets:
    """Bucket of every (f-side cube, g-side cube) pair; rows and columns are cube ids."""

    bucket: np.ndarray  # (nQ, nR) codes SEPARATED / NESTED / DIAGONAL
    first_half: np.ndarray  # side(Q) < side(R)
    side_q: np.ndarray
    side_r: np.ndarray
    dist: np.ndarray
    threshold: np.ndarray

    def mask(self, bucket: int, half: int | None = None) -> np.ndarray:
        m = self.bucket == bucket
        if half == 1:
            m &= self.first_half
        elif half == 2:
            m &= ~self.first_half
        return m

    def counts(self) -> dict:
        return {name: int(np.sum(self.bucket == k)) for k, name in enumerate(BUCKETS)}


def _carrying(part: GridPartition) -> int:
    """Number of cube ids below the finest generation (those with a difference)."""
    return int(part.offsets[part.depth])


def split_pairs(part_q: GridPartition, part_r: GridPartition, gamma: float, r: int,
                n_q: int | None = None, n_r: int | None = None) -> PairSets:
    """Separated / nested / diagonal classification of all cube pairs.

    For side(Q) < side(R): separated iff d > side(Q)^gamma side(R)^(1-gamma), else
    nested iff side(Q) <= 2^-r side(R), else diagonal.  The other half is the
    mirror image with equal sides included there.
    """
    n_q = _carrying(part_q) if n_q is None else n_q
    n_r = _carrying(part_r) if n_r is None else n_r
    lq, lr = part_q.side[:n_q], part_r.side[:n_r]
    dist = box_distance(part_q.lower[:n_q, None, :], part_q.upper[:n_q, None, :],
                        part_r.lower[None, :n_r, :], part_r.upper[None, :n_r, :])
    small = np.minimum(lq[:, None], lr[None, :])
    big = np.maximum(lq[:, None], lr[None, :])
    thr = small**gamma * big ** (1.0 - gamma)
    first = lq[:, None] < lr[None, :]
    bucket = np.full(dist.shape, DIAGONAL, dtype=np.int8)
    bucket[small <= 2.0**-r * big] = NESTED
    bucket[dist > thr] = SEPARATED
    return PairSets(bucket, first, lq, lr, dist, thr)


def coupling_A(pairs: PairSets, mass_q, mass_r, kernel: KernelSpec) -> np.ndarray:
    """``(l(Q) l(R))^(alpha/2) mu(Q)^(1/2) mu(R)^(1/2) / D^(m+alpha)`` with ``D = l(Q)+l(R)+d``."""
    a, m = kernel.alpha, kernel.m
    D = pairs.side_q[:, None] + pairs.side_r[None, :] + pairs.dist
    nq, nr = pairs.bucket.shape
    return ((pairs.side_q[:, None] * pairs.side_r[None, :]) ** (a / 2)
            * np.sqrt(mass_q[:nq, None] * mass_r[None, :nr]) / D ** (m + a))


@dataclass
class SeparatedPiece:
    value: float
    bound: float  # sum of A_QR ||Delta_Q f|| ||Delta_R g||
    pairwise_constant: float  # max |pair| / (A_QR ||.|| ||.||)
    n_pairs: int


def separated_sum(pairs: PairSets, values: np.ndarray, norms_q, norms_r, mass_q, mass_r,
                  kernel: KernelSpec, active: np.ndarray | None = None) -> SeparatedPiece:
    sel = pairs.bucket == SEPARATED
    if active is not None:
        sel &= active
    A = coupling_A(pairs, mass_q, mass_r, kernel)
    prod = A * np.outer(norms_q, norms_r)
    val = float(values[sel].sum())
    bound = float(prod[sel].sum())
    nz = sel & (prod > 0)
    C = float(np.max(np.abs(values[nz]) / prod[nz])) if nz.any() else 0.0
    return SeparatedPiece(val, bound, C, int(sel.sum()))


# Schur test matrices -------------------------------------------------------

SCHUR_DENSE_LIMIT = 4_000_000


@dataclass
class SchurReport:
    separated_norm: float
    nested_norm: float
    n_separated: int
    n_nested: int
    note: str = ""


def _dense_index(part: GridPartition) -> list[np.ndarray]:
    """Per generation, lattice index (raveled) -> cube id, -1 for empty cubes."""
    out = []
    dim = part.grid.dimension
    for g in range(part.depth + 1):
        table = np.full(2 ** (g * dim), -1, dtype=np.int64)
        idx = part.indices[g]
        if idx.size:
            table[np.ravel_multi_index(tuple(idx.T), (2**g,) * dim)] = np.arange(idx.shape[0]) + part.offsets[g]
        out.append(table)
    return out


def containing_cube(part: GridPartition, table: list[np.ndarray], lo: np.ndarray, hi: np.ndarray,
                    g: int) -> np.ndarray:
    """Id of the generation-g cube of ``part`` containing each box, -1 if none does."""
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    grid = part.grid
    idx = grid.locate(0.5 * (lo + hi), g)
    n = 2**g
    ok = np.all((idx >= 0) & (idx < n), axis=1)
    out = np.full(lo.shape[0], -1, dtype=np.int64)
    if not ok.any():
        return out
    flat = np.ravel_multi_index(tuple(np.clip(idx, 0, n - 1).T), (n,) * grid.dimension)
    gid = np.where(ok, table[g][flat], -1)
    c_lo = grid.lower + idx * grid.side(g)
    inside = np.all((lo >= c_lo) & (hi <= c_lo + grid.side(g)), axis=1)
    return np.where(inside, gid, -1)


def nested_children(part_q: GridPartition, part_r: GridPartition, r: int,
                    n_q: int | None = None, n_r: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Triples (Q, R, R_Q) with side(Q) <= 2^-r side(R) and Q inside the child R_Q of R."""
    n_q = _carrying(part_q) if n_q is None else n_q
    n_r = _carrying(part_r) if n_r is None else n_r
    table = _dense_index(part_r)
    qs, rs, cs = [], [], []
    lo, hi = part_q.lower[:n_q], part_q.upper[:n_q]
    for h in range(part_r.depth):
        kid = containing_cube(part_r, table, lo, hi, h + 1)
        ok = (kid >= 0) & (part_q.side[:n_q] <= 2.0**-r * part_r.grid.side(h))
        q = np.flatnonzero(ok)
        R = part_r.parent[kid[q]]
        keep = R < n_r
        qs.append(q[keep])
        rs.append(R[keep])
        cs.append(kid[q][keep])
    return np.concatenate(qs), np.concatenate(rs), np.concatenate(cs)


def _top_singular(M: np.ndarray) -> float:
    if M.size == 0 or not np.any(M):
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0])


def schur_norm(part_q: GridPartition, part_r: GridPartition, mass_q, mass_r, kernel: KernelSpec,
               gamma: float, r: int, seed: int = 0, limit: int = SCHUR_DENSE_LIMIT) -> SchurReport:
    """Operator norms on l2 of the separated matrix A and the nested matrix B.

    A is indexed by separated pairs with side(Q) < side(R); B by pairs with
    side(Q) <= 2^-r side(R) and Q inside a child R_Q of R, entry
    ``(l(Q)/l(R))^(alpha/2) (mu(Q)/mu(R_Q))^(1/2)``.  Matrices above ``limit``
    entries are restricted to a seeded random subset of rows and columns,
    which can only lower the norm; the note records it.
    """
    pairs = split_pairs(part_q, part_r, gamma, r)
    nq, nr = pairs.bucket.shape
    note = ""
    rows, cols = np.arange(nq), np.arange(nr)
    if nq * nr > limit:
        rng = np.random.default_rng(seed)
        keep = int(math.sqrt(limit))
        rows = np.sort(rng.choice(nq, min(nq, keep), replace=False))
        cols = np.sort(rng.choice(nr, min(nr, keep), replace=False))
        note = f"subsampled {rows.size}x{cols.size} of {nq}x{nr}"
    sep = (pairs.bucket == SEPARATED) & pairs.first_half
    A = np.where(sep, coupling_A(pairs, mass_q, mass_r, kernel), 0.0)
    q, R, RQ = nested_children(part_q, part_r, r)
    B = np.zeros((nq, nr))
    a = kernel.alpha
    B[q, R] = (part_q.side[q] / part_r.side[R]) ** (a / 2) * np.sqrt(mass_q[q] / mass_r[RQ])
    return SchurReport(_top_singular(A[np.ix_(rows, cols)]), _top_singular(B[np.ix_(rows, cols)]),
                       int(sep.sum()), int(q.size), note)


# good/bad probabilities and the collar ---------------------------------------


@dataclass
class MCEstimate:
    mean: float
    half_width: float  # 95% normal-approximation half-width
    trials: int


def _binomial(hits: np.ndarray) -> MCEstimate:
    n = hits.size
    p = float(hits.mean()) if n else 0.0
    return MCEstimate(p, 1.96 * math.sqrt(max(p * (1 - p), 0.0) / n) if n else 0.0, n)


def bad_probability_ladder(Q: Cube, ks, gamma: float, trials: int, seed: int = 0) -> list[MCEstimate]:
    """P over the other grid's shift that Q is bad w.r.t. a cube of side >= 2^k side(Q), per k."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ks = [int(k) for k in ks]
    rng = np.random.default_rng(seed)
    N, dim = Q.grid.N, Q.grid.dimension
    depth = max(Q.generation, 1)
    hits = np.zeros((len(ks), trials), dtype=bool)
    for t in range(trials):
        other = build_grid(random_shift(rng, N, dim), N, depth, dim)
        row = bad_generations(Q.lower[None, :], Q.upper[None, :], other, gamma)[0]
        for i, k in enumerate(ks):
            top = Q.generation - k  # generations h <= top have side >= 2^k side(Q)
            hits[i, t] = top >= 0 and bool(row[: top + 1].any())
    return [_binomial(h) for h in hits]


def bad_probability_mc(Q: Cube, k: int, gamma: float, trials: int, seed: int = 0) -> MCEstimate:
    return bad_probability_ladder(Q, [k], gamma, trials, seed)[0]


@dataclass
class DecayFit:
    ks: list
    estimates: list
    exponent: float  # fitted e in p ~ c 2^(-e k)
    prefactor: float


def fit_decay(ks, estimates: list[MCEstimate]) -> DecayFit:
    """Least-squares fit of log2 p against k over the positive estimates."""
    k = np.asarray(ks, dtype=float)
    p = np.array([e.mean for e in estimates])
    pos = p > 0
    if pos.sum() < 2:
        return DecayFit(list(ks), estimates, float("nan"), float("nan"))
    slope, icpt = np.polyfit(k[pos], np.log2(p[pos]), 1)
    return DecayFit(list(ks), estimates, float(-slope) + 0.0, float(2.0**icpt))


@dataclass
class CollarReport:
    us: list
    mass: list  # E_w int over (1+u)Q* minus Q* of |b|^2
    half_width: list
    statistic: list  # sqrt(mass / mu(lam Q0))


def collar_mass_mc(mu: DiscreteMeasure, q0_side: float, p: Params, trials: int, seed: int = 0,
                   us=None, weight: np.ndarray | None = None) -> CollarReport:
    """Collar mass of ``(1+u)Q* \\ Q*`` averaged over the shift w of Q*.

    All u share the same shifts, so the estimates are monotone in u exactly.
    """
    us = [p.u] if us is None else list(us)
    N = Params.root_scale(q0_side)
    dim = mu.dimension
    wt = np.ones(mu.n_atoms) if weight is None else np.asarray(weight, dtype=float)
    dens = wt**2 * mu.weights
    rng = np.random.default_rng(seed)
    shifts = np.array([random_shift(rng, N, dim) for _ in range(trials)])
    half = 2.0**N
    masses = np.zeros((len(us), trials))
    for t, w in enumerate(shifts):
        in_root = in_box(mu.points, w - half, w + half)
        for i, u in enumerate(us):
            in_big = in_box(mu.points, w - (1.0 + u) * half, w + (1.0 + u) * half)
            masses[i, t] = dens[in_big & ~in_root].sum()
    big = lambda_mass(mu, q0_side, p.lam)
    mean = masses.mean(axis=1)
    hw = 1.96 * masses.std(axis=1, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros(len(us))
    stat = np.sqrt(mean / big) if big > 0 else np.zeros(len(us))
    return CollarReport(us, mean.tolist(), list(map(float, hw)), stat.tolist())


def in_box(points: np.ndarray, lo, hi) -> np.ndarray:
    """Half-open box membership, the convention used for every box in this module."""
    return np.all((points >= lo) & (points < hi), axis=1)


def lambda_mass(mu: DiscreteMeasure, q0_side: float, lam: float) -> float:
    half = 0.5 * lam * q0_side
    return mu.mass_of_box(np.full(mu.dimension, -half), np.full(mu.dimension, half))


# one side of a trial ---------------------------------------------------------


class Side:
    """A grid with its family, stopping tree, expansion and per-cube pieces.

    ``pieces[:, c]`` is ``Delta_c h`` for every cube id ``c`` below the finest
    generation; ``applied`` is the operator of this side applied to them (T on
    the f-side, T* on the g-side) and ``adjoint`` applies the other one.
    """

    def __init__(self, tree: StoppingTree, h: np.ndarray, apply, adjoint):
        self.tree = tree
        self.fam = tree.family
        self.part = tree.part
        self.mu = self.fam.mu
        self.apply, self.adjoint = apply, adjoint
        self.dec: MartingaleDecomposition = expand(tree, None, h)
        part, w = self.part, self.mu.weights
        self.n = _carrying(part)
        n_atoms = self.mu.n_atoms
        self.pieces = np.zeros((n_atoms, self.n))
        for g in range(part.depth):
            lab = part.gid_labels(g)
            rows = np.flatnonzero(lab >= 0)
            self.pieces[rows, lab[rows]] = self.dec.generation_piece(g)[rows]
        self.applied = apply(self.pieces)
        self.norms = np.sqrt(np.einsum("xc,x->c", self.pieces**2, w))
        self.profiles = ancestor_profiles(tree)
        self.coef = np.zeros(part.n_cubes)
        h_sum = cube_sums(part, self.dec.f * w)
        for g in range(part.depth + 1):
            ids = part.gids_at(g)
            b_sum = cube_sums(part, self.profiles[g] * w)
            self.coef[ids] = h_sum[ids] / b_sum[ids]
        self.beta = tree.beta
        self.stops = np.asarray(tree.stop_gids)
        self.stop_col = {int(F): k for k, F in enumerate(self.stops)}
        self.b_stops = np.stack([self.fam.b(int(F)) for F in self.stops], axis=1)

    def phi(self, S: int) -> np.ndarray:
        """``<h>_S / <b_{S^a}>_S * b_{S^a}``."""
        return self.coef[S] * self.fam.b(int(self.tree.anc[S]))

    def child_columns(self, per_gen: list[np.ndarray]) -> np.ndarray:
        """Column c (generation >= 1) holds ``1_c * per_gen[gen(c) - 1]``."""
        part = self.part
        M = np.zeros((self.mu.n_atoms, part.n_cubes))
        for g in range(1, part.depth + 1):
            lab = part.gid_labels(g)
            rows = np.flatnonzero(lab >= 0)
            M[rows, lab[rows]] = per_gen[g - 1][rows]
        return M


def _inner_cols(applied: np.ndarray, w: np.ndarray, M: np.ndarray) -> np.ndarray:
    return applied.T @ (w[:, None] * M)


# nested sum --------------------------------------------------------------------


@dataclass
class NestedPiece:
    total: float = 0.0
    good: float = 0.0
    bad: float = 0.0
    outside: float = 0.0  # <S Delta_Q, 1_{R_Q^c} Delta_R>
    inside_tail: float = 0.0  # scalar * <S Delta_Q, 1_{R_Q^c} b_{R^a}>
    paraproduct: float = 0.0
    bad_coef: float = 0.0  # times ||T||: sum_k (sum_R ||sum_Q Delta_Q||^2)^(1/2) (sum_R ||Delta_R||^2)^(1/2)
    bad_coef_exact: float = 0.0  # times ||T||: sum_R ||sum_Q Delta_Q|| ||Delta_R||
    outside_structural: float = 0.0  # sum B_QR ||Delta_Q|| ||Delta_R||
    inside_structural: float = 0.0  # sum |scalar| (l(Q)/l(R))^(alpha/2) mu(Q)^(1/2) ||Delta_Q||
    outside_constant: float = 0.0
    inside_constant: float = 0.0
    paraproduct_bound: float = 0.0  # testing form, both endpoint families
    paraproduct_split_ratio: float = 0.0  # max over F of beta-split norm / mu(F)^(1/2)
    eps_ratio: float = 0.0  # max |eps_Q(F)| / max |h|
    containment_failures: int = 0
    no_top_cube: int = 0
    n_good: int = 0
    n_bad: int = 0

    def add(self, other: "NestedPiece") -> "NestedPiece":
        out = NestedPiece()
        for k, v in asdict(self).items():
            o = getattr(other, k)
            if k in ("outside_constant", "inside_constant", "paraproduct_split_ratio", "eps_ratio"):
                setattr(out, k, max(v, o))
            else:
                setattr(out, k, v + o)
        return out


def _paraproduct_endpoint(small: Side, big: Side, qs: np.ndarray, S: np.ndarray, p: Params,
                          piece: NestedPiece) -> tuple[float, float]:
    """``sum_q <S Delta_q, phi(S(q))>`` and its testing bound for one endpoint family S(q)."""
    if qs.size == 0:
        return 0.0, 0.0
    w = small.mu.weights
    anc = big.tree.anc[S]
    eps = big.coef[S]
    h_max = float(np.max(np.abs(big.dec.f))) if big.dec.f.size else 0.0
    if h_max > 0:
        piece.eps_ratio = max(piece.eps_ratio, float(np.max(np.abs(eps))) / h_max)
    Fs = np.unique(anc)
    value, bound = 0.0, 0.0
    for F in Fs:
        sel = anc == F
        coeffs = np.zeros(small.n)
        coeffs[qs[sel]] = eps[sel]
        summed = small.pieces @ coeffs
        bF = big.fam.b(int(F))
        testing = np.where(big.part.atom_mask(int(F)), small.adjoint(bF[:, None])[:, 0], 0.0)
        v_adj = float(np.dot(summed * testing, w))
        v_dir = float(coeffs @ (small.applied.T @ (w * bF)))
        _check_resum("paraproduct testing pairing", v_dir, [v_adj])
        value += v_dir
        bound += math.sqrt(float(np.dot(summed**2, w))) * math.sqrt(float(np.dot(testing**2, w)))
        # split by stopping generation of the small tree: sum_j (sum_K ||.||^2)^(1/2)
        split = 0.0
        for j in range(p.beta):
            acc = 0.0
            for K in small.tree.level(j):
                part_K = np.where(small.tree.anc[: small.n] == K, coeffs, 0.0)
                vec = small.pieces @ part_K
                acc += float(np.dot(vec**2, w))
            split += math.sqrt(acc)
        massF = big.fam.mass[int(F)]
        piece.paraproduct_split_ratio = max(piece.paraproduct_split_ratio, split / math.sqrt(massF))
    return value, bound


def top_cubes(small: Side, big: Side, p: Params, gamma: float, bad_tab: np.ndarray | None = None):
    """Per small cube Q below the cutoff: the child J(Q) of H(Q) containing Q.

    H(Q) is the smallest big-side cube below the cutoff containing Q with side at
    least ``2^alpha(Q) side(Q)``, alpha(Q) the least k >= r at which Q is good.
    Returns (Q ids, J ids, number of Q with no such cube).
    """
    sp, bp = small.part, big.part
    if bad_tab is None:
        bad_tab = bad_generations(sp.lower[: small.n], sp.upper[: small.n], bp.grid, gamma)
    table = _dense_index(bp)
    tq, tJ, missing = [], [], 0
    for q in np.flatnonzero(small.beta[: small.n] < p.beta):
        gq = int(sp.gen[q])
        alpha = alpha_from_bad(bad_tab[q], bp.grid, float(sp.side[q]), p.r, gq)
        J = -1
        if alpha is not None:
            for h in range(min(gq - alpha, bp.depth - 1), -1, -1):
                H = int(containing_cube(bp, table, sp.lower[q], sp.upper[q], h)[0])
                if H >= 0 and big.beta[H] < p.beta:
                    J = int(containing_cube(bp, table, sp.lower[q], sp.upper[q], h + 1)[0])
                    break
        if J < 0:
            missing += 1
            continue
        tq.append(q)
        tJ.append(J)
    return np.asarray(tq, dtype=np.int64), np.asarray(tJ, dtype=np.int64), missing


def nested_half(small: Side, big: Side, values: np.ndarray, mask: np.ndarray, p: Params,
                kernel: KernelSpec, gamma: float) -> NestedPiece:
    """Good/bad split and the good-part analysis for pairs with the small cube nested in the big one.

    ``values[q, R] = <S Delta_q, Delta_R>`` where S is the small side's operator;
    ``mask`` selects the nested pairs (both cutoffs already applied).
    """
    piece = NestedPiece()
    w = small.mu.weights
    q_idx, R_idx = np.nonzero(mask)
    piece.total = float(values[mask].sum())
    if q_idx.size == 0:
        return piece
    sp, bp = small.part, big.part
    bad_tab = bad_generations(sp.lower[: small.n], sp.upper[: small.n], big.part.grid, gamma)
    bad_cum = np.logical_or.accumulate(bad_tab, axis=1)
    is_bad = bad_cum[q_idx, bp.gen[R_idx]]
    good_q, good_R = q_idx[~is_bad], R_idx[~is_bad]
    bad_q, bad_R = q_idx[is_bad], R_idx[is_bad]
    piece.n_good, piece.n_bad = int(good_q.size), int(bad_q.size)
    piece.good = float(values[good_q, good_R].sum())
    piece.bad = float(values[bad_q, bad_R].sum())
    _check_resum("nested good/bad split", piece.total, [piece.good, piece.bad])

    # bad part, per k = log2(side(R)/side(Q)): sum_k (sum_R ||X_Rk||^2)^(1/2) (sum_R ||Delta_R||^2)^(1/2)
    if bad_q.size:
        k = np.rint(np.log2(bp.side[bad_R] / sp.side[bad_q])).astype(np.int64)
        for kk in np.unique(k):
            sel = k == kk
            x_sq, r_sq = 0.0, 0.0
            for R in np.unique(bad_R[sel]):
                vec = small.pieces[:, bad_q[sel & (bad_R == R)]].sum(axis=1)
                x_sq += float(np.dot(vec**2, w))
                r_sq += big.norms[R] ** 2
            piece.bad_coef += math.sqrt(x_sq * r_sq)
        for R in np.unique(bad_R):
            vec = small.pieces[:, bad_q[bad_R == R]].sum(axis=1)
            piece.bad_coef_exact += math.sqrt(float(np.dot(vec**2, w))) * big.norms[R]

    if good_q.size == 0:
        return piece
    # the child R_Q of R containing Q
    table = _dense_index(bp)
    RQ = np.full(good_q.size, -1, dtype=np.int64)
    for h in np.unique(bp.gen[good_R]):
        sel = bp.gen[good_R] == h
        RQ[sel] = containing_cube(bp, table, sp.lower[good_q[sel]], sp.upper[good_q[sel]], int(h) + 1)
    fails = (RQ < 0) | (bp.parent[np.maximum(RQ, 0)] != good_R)
    lo_q, hi_q = sp.lower[good_q], sp.upper[good_q]
    margin = np.min(np.minimum(lo_q - bp.lower[np.maximum(RQ, 0)], bp.upper[np.maximum(RQ, 0)] - hi_q), axis=1)
    thr = sp.side[good_q] ** gamma * bp.side[good_R] ** (1.0 - gamma)
    fails |= ~(margin > thr)
    piece.containment_failures = int(fails.sum())
    if fails.any():
        raise BookkeepingError(f"nested: {int(fails.sum())} good pairs are not deep inside a child")

    # <S Delta_q, 1_{R'} Delta_{parent R'} big> and <S Delta_q, 1_{R'} b_{parent^a}>
    Z = _inner_cols(small.applied, w, big.child_columns([big.dec.generation_piece(g) for g in range(bp.depth)]))
    Y = _inner_cols(small.applied, w, big.child_columns(big.profiles[: bp.depth]))
    W1 = _inner_cols(small.applied, w, big.b_stops)
    col = big.stop_col
    ancR = big.tree.anc[good_R]
    ancRQ = big.tree.anc[RQ]
    c_anc_R = np.array([col[int(F)] for F in ancR])
    c_anc_RQ = np.array([col[int(F)] for F in ancRQ])
    pair_vals = values[good_q, good_R]
    inside = Z[good_q, RQ]
    outside = pair_vals - inside
    tail = W1[good_q, c_anc_R] - Y[good_q, RQ]  # <S Delta_q, 1_{R_Q^c} b_{R^a}>
    same = ancRQ == ancR
    scalar = np.where(same, big.coef[good_R] - big.coef[RQ], big.coef[good_R])
    inside_part = scalar * tail
    par_pairs = big.coef[RQ] * W1[good_q, c_anc_RQ] - big.coef[good_R] * W1[good_q, c_anc_R]
    _check_resum("nested inside split", float(inside.sum()), [float(inside_part.sum()), float(par_pairs.sum())])
    piece.outside = float(outside.sum())
    piece.inside_tail = float(inside_part.sum())
    a = kernel.alpha
    ratio = (sp.side[good_q] / bp.side[good_R]) ** (a / 2)
    Bqr = ratio * np.sqrt(small.fam.mass[good_q] / big.fam.mass[RQ])
    prod = Bqr * small.norms[good_q] * big.norms[good_R]
    piece.outside_structural = float(prod.sum())
    nz = prod > 0
    piece.outside_constant = float(np.max(np.abs(outside[nz]) / prod[nz])) if nz.any() else 0.0
    l42 = ratio * np.sqrt(small.fam.mass[good_q]) * small.norms[good_q]
    piece.inside_structural = float(np.sum(np.abs(scalar) * l42))
    nz = l42 > 0
    piece.inside_constant = float(np.max(np.abs(tail[nz]) / l42[nz])) if nz.any() else 0.0

    # paraproduct, telescoped: J(Q) is the child containing Q of the top cube H(Q)
    tq, tJ, piece.no_top_cube = top_cubes(small, big, p, gamma, bad_tab)
    root = np.zeros(tq.size, dtype=np.int64)
    v_J, b_J = _paraproduct_endpoint(small, big, tq, tJ, p, piece)
    v_R, b_R = _paraproduct_endpoint(small, big, tq, root, p, piece)
    piece.paraproduct = v_J - v_R
    piece.paraproduct_bound = b_J + b_R
    _check_resum("paraproduct telescoping", float(par_pairs.sum()), [piece.paraproduct])
    _check_resum("nested good part", piece.good, [piece.outside, piece.inside_tail, piece.paraproduct])
    return piece


# beta tails, the top terms and the corner ---------------------------------------


def _l2(v: np.ndarray, w: np.ndarray) -> float:
    return math.sqrt(float(np.dot(v * v, w)))


@dataclass
class CornerSplit:
    """``<T b_Q*, b_R*>`` split over Q*, the collar ``(1+u)Q* \\ Q*`` and the rest."""

    inner: float
    collar: float
    far: float
    inner_bound: float  # ||1_Q* T b_Q*|| ||b_R*||
    collar_coef: float  # times ||T||: ||b_Q*|| ||1_collar b_R*||
    far_abs: float  # sum |K| |b_Q*| |1_far b_R*|
    far_bound: float  # C_K ||b_Q*||_1 ||1_far b_R*||_1 / (u 2^N)^m

    @property
    def total(self) -> float:
        return self.inner + self.collar + self.far


def corner_split(op: DiscretizedOperator, bQ: np.ndarray, bR: np.ndarray, root_lo, root_hi,
                 u: float) -> CornerSplit:
    mu = op.mu
    w, pts = mu.weights, mu.points
    root_lo, root_hi = np.asarray(root_lo, float), np.asarray(root_hi, float)
    c, h = 0.5 * (root_lo + root_hi), 0.5 * (root_hi - root_lo)
    in_root = in_box(pts, root_lo, root_hi)
    in_big = in_box(pts, c - (1.0 + u) * h, c + (1.0 + u) * h)
    TbQ = op.apply(bQ)
    masks = (in_root, in_big & ~in_root, ~in_big)
    vals = [float(np.dot(TbQ * bR * m, w)) for m in masks]
    _check_resum("corner split", op.pair(bQ, bR), vals)
    far_b = np.where(masks[2], bR, 0.0)
    far_abs = float(np.abs(far_b * w) @ np.abs(op.K) @ np.abs(bQ * w))
    k = op.kernel
    gap = u * float(h.min())
    l1 = float(np.dot(np.abs(bQ), w)) * float(np.dot(np.abs(far_b), w))
    far_bound = k.C * l1 / gap**k.m if gap > 0 else (0.0 if l1 == 0 else math.inf)
    return CornerSplit(vals[0], vals[1], vals[2],
                       _l2(np.where(in_root, TbQ, 0.0), w) * _l2(bR, w),
                       _l2(bQ, w) * _l2(np.where(masks[1], bR, 0.0), w), far_abs, far_bound)


@dataclass
class TailPiece:
    """Everything outside the main sum over pairs with both stopping levels below the cutoff."""

    values: dict  # name -> exact value
    c_parts: dict  # name -> bound with no operator-norm factor
    t_coefs: dict  # name -> coefficient of ||T|| in its bound
    corner: CornerSplit
    tail_ratio_f: float  # ||sum over beta(Q) >= beta of Delta_Q f|| / ||f||
    tail_ratio_g: float
    generation_coef: float  # mu(Q0)^(1/2) sum_{j >= beta} (sum_{F in F^j} mu(F))^(1/2), both trees


def _generation_tail(tree: StoppingTree, beta: int) -> float:
    mass = tree.family.mass
    out = 0.0
    for j in range(beta, tree.n_levels):
        out += math.sqrt(float(mass[tree.level(j)].sum()))
    return out


def beta_tail(fside: Side, gside: Side, op: DiscretizedOperator, p: Params, u: float | None = None,
              q0_mass: float | None = None) -> TailPiece:
    """Exact tail, top and leaf terms around the truncated main sum.

    With ``f = Df_lo + Df_hi + top_f + e_f`` (``Df_lo`` over cubes with stopping
    level below the cutoff, ``e_f`` the part finer than the finest generation) and
    the same for g, ``<Tf, g>`` is the main sum ``<T Df_lo, Dg_lo>`` plus the values here.
    """
    w = fside.mu.weights
    u = p.u if u is None else u
    f, g = fside.dec.f, gside.dec.f
    lo_f = fside.beta[: fside.n] < p.beta
    lo_g = gside.beta[: gside.n] < p.beta
    Df_lo, Df_hi = fside.pieces @ lo_f, fside.pieces @ ~lo_f
    Dg_lo, Dg_hi = gside.pieces @ lo_g, gside.pieces @ ~lo_g
    e_f = f - fside.dec.reconstruct()
    e_g = g - gside.dec.reconstruct()
    bQ, bR = fside.fam.b(0), gside.fam.b(0)
    cf, cg = float(fside.coef[0]), float(gside.coef[0])
    T_Dlo = op.apply(Df_lo)
    T_Dhi = op.apply(Df_hi)
    T_e = op.apply(e_f)
    T_bQ = op.apply(bQ)
    ip = lambda a, b: float(np.dot(a * b, w))
    corner = corner_split(op, bQ, bR, fside.part.grid.lower, fside.part.grid.upper, u)
    values = {
        "tail_mixed": ip(T_Dlo, Dg_hi),
        "testing_R": cg * op.pair(f, bR),
        "tail_pivot": -cg * ip(T_Dhi, bR),
        "corner_inner": -cf * cg * corner.inner,
        "corner_collar": -cf * cg * corner.collar,
        "corner_far": -cf * cg * corner.far,
        "tail_f": ip(T_Dhi, g),
        "top_f": cf * ip(T_bQ, g),
        "leaf": ip(T_e, g) + ip(T_Dlo, e_g) - cg * ip(T_e, bR),
    }
    in_R = gside.part.inside
    in_Q = fside.part.inside
    nf, ng = _l2(f, w), _l2(g, w)
    TsbR = op.adjoint_apply(bR)
    c_parts = {
        "testing_R": abs(cg) * nf * _l2(np.where(in_R, TsbR, 0.0), w),
        "corner_inner": abs(cf * cg) * corner.inner_bound,
        "corner_far": abs(cf * cg) * corner.far_bound,
        "top_f": abs(cf) * _l2(np.where(in_Q, T_bQ, 0.0), w) * ng,
    }
    t_coefs = {
        "tail_mixed": _l2(Df_lo, w) * _l2(Dg_hi, w),
        "tail_pivot": abs(cg) * _l2(Df_hi, w) * _l2(bR, w),
        "corner_collar": abs(cf * cg) * corner.collar_coef,
        "tail_f": _l2(Df_hi, w) * ng,
        "leaf": _l2(e_f, w) * ng + _l2(Df_lo, w) * _l2(e_g, w) + abs(cg) * _l2(e_f, w) * _l2(bR, w),
    }
    q0 = fside.mu.weights.sum() if q0_mass is None else q0_mass
    gen = math.sqrt(q0) * (_generation_tail(fside.tree, p.beta) + _generation_tail(gside.tree, p.beta))
    return TailPiece(values, c_parts, t_coefs, corner,
                     _l2(Df_hi, w) / nf if nf > 0 else 0.0, _l2(Dg_hi, w) / ng if ng > 0 else 0.0, gen)


# theta surgery ---------------------------------------------------------------------


def _box_to_boundary(lo, hi, B_lo, B_hi) -> np.ndarray:
    """Distance from each box to the boundary of the box B."""
    inside = np.all((lo > B_lo) & (hi < B_hi), axis=-1)
    margin = np.min(np.minimum(lo - B_lo, B_hi - hi), axis=-1)
    return np.where(inside, margin, box_distance(lo, hi, B_lo, B_hi))


@dataclass
class ThetaSurgery:
    """Atom masks for the smaller cube (``small_*``) and the larger one (``big_*``).

    ``labels[x]`` numbers the matched lattice cube whose core holds atom x (-1
    otherwise); ``H_lo``/``H_hi`` are the cores, shrunk by theta times the
    lattice side on every face.
    """

    small_sep: np.ndarray
    small_bd: np.ndarray
    small_delta: np.ndarray
    big_sep: np.ndarray
    big_bd: np.ndarray
    big_delta: np.ndarray
    labels: np.ndarray
    H_lo: np.ndarray
    H_hi: np.ndarray
    five_inside: np.ndarray  # per matched cube: 5H inside small & big
    lattice_side: float

    @property
    def n_matched(self) -> int:
        return int(self.H_lo.shape[0])


def theta_surgery(points: np.ndarray, small_lo, small_hi, big_lo, big_hi, theta: float,
                  lattice_side: float, lattice_origin, in_small=None, in_big=None) -> ThetaSurgery:
    """Split the atoms of two cubes into separated, boundary and matched-lattice parts.

    A lattice cube G of the given side (anchored at ``lattice_origin``) puts its
    atoms in the boundary part of the small cube if G is within
    ``theta * side(big) / 2`` of the big cube's boundary, or if an atom of both
    cubes lies within ``theta * side(G)`` of the boundary of G; symmetrically for
    the big cube.  ``in_small``/``in_big`` override box membership (use the grid
    partition's labels so that floating-point edges agree with it).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    small_lo, small_hi = np.asarray(small_lo, float), np.asarray(small_hi, float)
    big_lo, big_hi = np.asarray(big_lo, float), np.asarray(big_hi, float)
    ls, lb = float(small_hi[0] - small_lo[0]), float(big_hi[0] - big_lo[0])
    if ls > lb:
        raise ValueError("the first cube must be the smaller one")
    if not (0.0 < theta < 2.0**-4):
        raise ValueError("theta must lie in (0, 1/16)")
    in_s = in_box(pts, small_lo, small_hi) if in_small is None else np.asarray(in_small, bool)
    in_b = in_box(pts, big_lo, big_hi) if in_big is None else np.asarray(in_big, bool)
    origin = np.asarray(lattice_origin, float)
    s = float(lattice_side)
    idx = np.floor((pts - origin) / s).astype(np.int64)
    g_lo = origin + idx * s
    g_hi = g_lo + s
    core = in_box(pts, g_lo + theta * s, g_hi - theta * s)
    d_big = _box_to_boundary(g_lo, g_hi, big_lo, big_hi)
    d_small = _box_to_boundary(g_lo, g_hi, small_lo, small_hi)
    small_bd = in_s & ((d_big < theta * lb / 2) | (in_b & ~core))
    big_bd = in_b & ((d_small < theta * ls / 2) | (in_s & ~core))
    small_delta = in_s & ~small_bd & in_b
    big_delta = in_b & ~big_bd & in_s
    labels = np.full(pts.shape[0], -1, dtype=np.int64)
    both = small_delta & big_delta
    keys = np.unique(idx[both], axis=0)
    if keys.shape[0]:
        # a matched lattice cube's atoms are in both Delta-parts or in neither
        key_of = {tuple(k): n for n, k in enumerate(keys)}
        for x in np.flatnonzero(small_delta | big_delta):
            n = key_of.get(tuple(idx[x]))
            if n is not None:
                if not (small_delta[x] and big_delta[x]):
                    raise BookkeepingError("theta surgery: a matched lattice cube is split")
                labels[x] = n
    H_lo = origin + keys * s + theta * s
    H_hi = origin + (keys + 1) * s - theta * s
    c, h = 0.5 * (H_lo + H_hi), 0.5 * (H_hi - H_lo)
    lo5, hi5 = c - 5 * h, c + 5 * h
    five = (np.all(lo5 >= np.maximum(small_lo, big_lo), axis=1)
            & np.all(hi5 <= np.minimum(small_hi, big_hi), axis=1))
    return ThetaSurgery(in_s & ~small_bd & ~in_b, small_bd, small_delta,
                        in_b & ~big_bd & ~in_s, big_bd, big_delta, labels, H_lo, H_hi, five, s)


def bad_region(points: np.ndarray, other: ShiftedDyadicGrid, generation: int, r: int, theta: float,
               lattice: ShiftedDyadicGrid, lattice_generations) -> np.ndarray:
    """Atoms within theta of a lattice boundary of the other grid at generations gen +- r, or of the given lattice."""
    out = np.zeros(len(points), dtype=bool)
    for a in range(generation - r, generation + r + 1):
        if a >= 0:
            out |= boundary_collar(other, a, theta)(points)
    for a in lattice_generations:
        out |= boundary_collar(lattice, a, theta)(points)
    return out


# sigma surgery -----------------------------------------------------------------------

SIGMA_TERMS = ("full", "far", "mid", "collar", "matched", "far_meanzero", "far_pivot",
               "pivot_full", "pivot_mid", "pivot_collar", "pivot_self")


@dataclass
class SigmaSplit:
    """Per matched cube H: ``<T(1_H u), 1_H v> = full - far - mid - collar``.

    ``far`` is split into a mean-zero part and ``<b_H/mu(H), Phi> int_H v``, and
    ``<b_H, Phi>`` into ``pivot_full - pivot_mid - pivot_collar - pivot_self``
    (Phi = T applied to u outside 5H).
    """

    terms: dict  # name -> (k,) array
    mean_ratio: float  # max over atoms of H of |Phi - <b_H/mu(H), Phi>| / M u
    collar_coef: np.ndarray  # times ||T||, per H
    skipped: int  # cubes with zero mass

    def total(self, name: str) -> float:
        return float(self.terms[name].sum())


def _sigma_many(op: DiscretizedOperator, H_lo, H_hi, u, v, bH, sigma: float, Mu=None) -> SigmaSplit:
    mu = op.mu
    pts, w = mu.points, mu.weights
    H_lo, H_hi = np.atleast_2d(H_lo), np.atleast_2d(H_hi)
    k = H_lo.shape[0]
    c, h = 0.5 * (H_lo + H_hi), 0.5 * (H_hi - H_lo)

    def box(factor):
        lo, hi = c - factor * h, c + factor * h
        return np.all((pts[None] >= lo[:, None]) & (pts[None] < hi[:, None]), axis=2)

    in_H, in_s, in_5 = box(1.0), box(1.0 + sigma), box(5.0)
    hl, hx = np.nonzero(in_H)
    rows = op.matrix[hx]
    pick = lambda m: (rows * m[hl]) @ u
    Tu = rows @ u
    far = pick(~in_5)
    mid = pick(in_5 & ~in_s)
    col = pick(in_s & ~in_H)
    slf = pick(in_H)
    bH = np.atleast_2d(bH)
    vw = v[hx] * w[hx]
    bw = bH[hl, hx] * w[hx]
    S = lambda x: np.bincount(hl, x, minlength=k)
    mass = S(w[hx])
    skipped = int(np.sum(mass <= 0))
    safe = np.where(mass > 0, mass, 1.0)
    m_H = np.where(mass > 0, S(bw * far) / safe, 0.0)
    terms = {"full": S(vw * Tu), "far": S(vw * far), "mid": S(vw * mid), "collar": S(vw * col),
             "matched": S(vw * slf), "far_meanzero": S(vw * (far - m_H[hl])), "far_pivot": m_H * S(vw),
             "pivot_full": S(bw * Tu), "pivot_mid": S(bw * mid), "pivot_collar": S(bw * col),
             "pivot_self": S(bw * slf)}
    t = terms
    _check_resum("sigma surgery", float(t["matched"].sum()),
                  [t["full"].sum(), -t["far"].sum(), -t["mid"].sum(), -t["collar"].sum()])
    _check_resum("sigma far split", float(t["far"].sum()), [t["far_meanzero"].sum(), t["far_pivot"].sum()])
    _check_resum("sigma pivot split", float(S(bw * far).sum()),
                 [t["pivot_full"].sum(), -t["pivot_mid"].sum(), -t["pivot_collar"].sum(), -t["pivot_self"].sum()])
    ratio = 0.0
    if hx.size:
        Mu = centred_maximal(mu, u) if Mu is None else Mu
        dev = np.abs(far - m_H[hl])
        Mh = Mu[hx]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(dev == 0, 0.0, dev / Mh)
        ratio = float(r.max())
    u_col = np.sqrt(((in_s & ~in_H) * (u * u * w)[None, :]).sum(axis=1))
    v_H = np.sqrt(S(v[hx] ** 2 * w[hx]))
    b_H = np.sqrt(S(bH[hl, hx] ** 2 * w[hx]))
    v_int = np.abs(S(vw))
    coef = u_col * v_H + v_int / safe * b_H * u_col
    return SigmaSplit(terms, ratio, coef, skipped)


def sigma_surgery(op: DiscretizedOperator, H_lo, H_hi, u, v, bH, sigma: float, Mu=None) -> SigmaSplit:
    """Four-term split of ``<T(1_H u), 1_H v>`` for one cube H, and the smoothing ratio."""
    if not (0.0 < sigma < 0.5):
        raise ValueError("sigma must lie in (0, 1/2)")
    u, v, bH = (np.asarray(a, dtype=float) for a in (u, v, bH))
    return _sigma_many(op, np.asarray(H_lo, float)[None], np.asarray(H_hi, float)[None], u, v, bH[None], sigma, Mu)


# diagonal sum ------------------------------------------------------------------------

DIAG_C_TERMS = ("g_sep", "f_sep", "offdiagonal", "full", "mid", "far_meanzero", "far_pivot")
DIAG_T_TERMS = ("g_boundary", "f_boundary", "collar")


@dataclass(frozen=True)
class DiagonalChoice:
    """One of the three ways a child restricts ``Delta_Q``: ``1_{Q_i} Delta_Q = sum sign A 1_{Q_i} b_{stop}``."""

    branch: int  # 0: Q_i^a = Q^a; 1: Q_i stopping, its own function; 2: Q_i stopping, the parent's function
    child: int
    amplitude: float
    sign: float
    stop: int  # stopping cube whose function is used

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("branch amplitudes are nonnegative")


def branches(side: Side, Q: int, child: int) -> list[DiagonalChoice]:
    anc = side.tree.anc
    cQ, ci = side.coef[Q], side.coef[child]
    same = anc[child] == anc[Q]
    stop = anc[child] == child
    return [DiagonalChoice(0, child, abs(ci - cQ) if same else 0.0, float(np.sign(ci - cQ)), int(anc[Q])),
            DiagonalChoice(1, child, abs(ci) if stop else 0.0, float(np.sign(ci)), int(child)),
            DiagonalChoice(2, child, abs(cQ) if stop else 0.0, -float(np.sign(cQ)), int(anc[Q]))]


@dataclass
class DiagonalPiece:
    total: float = 0.0
    parts: dict = field(default_factory=lambda: {k: 0.0 for k in DIAG_C_TERMS + DIAG_T_TERMS})
    abs_sums: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    c_part: float = 0.0
    t_coef: float = 0.0
    bad_form_coef: float = 0.0  # times ||T||: ||1_bad u|| ||1_R v|| + ||1_Q u|| ||1_bad v||
    mean_ratio: float = 0.0
    containment_failures: int = 0
    five_failures: int = 0
    matched: int = 0
    sigma_skipped: int = 0
    neighbours: int = 0
    n_pairs: int = 0
    n_child_pairs: int = 0


class _Cache(dict):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def __missing__(self, key):
        val = self[key] = self.fn(key)
        return val


def diagonal_sum(fside: Side, gside: Side, values: np.ndarray, mask: np.ndarray, op: DiscretizedOperator,
                 dstar: ShiftedDyadicGrid, p: Params) -> DiagonalPiece:
    """Child-by-child analysis of the near-diagonal pairs selected by ``mask``.

    Each ``<T(1_{Q_i} u), 1_{R_j} v>`` is split by the theta surgery into
    g-separated, g-boundary, f-separated, f-boundary, off-diagonal and matched
    parts; each matched part by the sigma surgery.  Signed parts resum to the
    pair values exactly.
    """
    out = DiagonalPiece()
    mu = op.mu
    pts, w = mu.points, mu.weights
    pf, pg = fside.part, gside.part
    q_idx, R_idx = np.nonzero(mask)
    out.n_pairs = int(q_idx.size)
    out.total = float(values[mask].sum())
    if q_idx.size == 0:
        return out
    out.neighbours = int(max(mask.sum(axis=0).max(), mask.sum(axis=1).max()))
    atoms_f = _Cache(lambda gid: np.flatnonzero(pf.atom_mask(gid)))
    atoms_g = _Cache(lambda gid: np.flatnonzero(pg.atom_mask(gid)))
    b_f = _Cache(lambda gid: fside.fam.b(gid))
    b_g = _Cache(lambda gid: gside.fam.b(gid))
    M_f = _Cache(lambda gid: centred_maximal(mu, b_f[gid]))
    grids = {"f": pf.grid, "g": pg.grid, "lattice": dstar}
    collars = _Cache(lambda key: boundary_collar(grids[key[0]], key[1], p.theta)(pts))
    j = p.j_theta
    for q, R in zip(q_idx, R_idx):
        kids_f = [(i, branches(fside, q, i)) for i in pf.children(q)]
        kids_g = [(jj, branches(gside, R, jj)) for jj in pg.children(R)]
        pair_sum = 0.0
        for i, bi in kids_f:
            I = atoms_f[i]
            for jj, bj in kids_g:
                J = atoms_g[jj]
                out.n_child_pairs += 1
                pair_sum += _child_pair(out, fside, gside, op, dstar, p, j, i, jj, I, J, bi, bj, b_f, b_g, M_f,
                                        collars)
        size = _l2(fside.applied[:, q], w) * gside.norms[R]
        _check_resum("diagonal children", float(values[q, R]), [pair_sum], floor=size)
    parts = out.parts
    _check_resum("diagonal bucket", out.total, [parts[k] for k in DIAG_C_TERMS + DIAG_T_TERMS])
    return out


def _collar_union(collars, U, grid_key: str, gens, lattice_gens) -> np.ndarray:
    out = np.zeros(U.size, dtype=bool)
    for a in gens:
        if a >= 0:
            out |= collars[(grid_key, a)][U]
    for a in lattice_gens:
        out |= collars[("lattice", a)][U]
    return out


def _child_pair(out: DiagonalPiece, fside: Side, gside: Side, op, dstar, p: Params, j: int,
                i: int, jj: int, I, J, bi, bj, b_f, b_g, M_f, collars) -> float:
    mu = op.mu
    pts, w = mu.points, mu.weights
    pf, pg = fside.part, gside.part
    U = np.union1d(I, J)
    in_I, in_J = np.isin(U, I), np.isin(U, J)
    lf, lg = pf.side[i], pg.side[jj]
    f_small = lf <= lg
    (s_gid, s_part, s_in, s_key), (b_gid, b_part, b_in, b_key) = (
        ((i, pf, in_I, "f"), (jj, pg, in_J, "g")) if f_small else ((jj, pg, in_J, "g"), (i, pf, in_I, "f")))
    s_gen = int(s_part.gen[s_gid])
    lattice_gen = s_gen - j
    surg = theta_surgery(pts[U], s_part.lower[s_gid], s_part.upper[s_gid], b_part.lower[b_gid],
                         b_part.upper[b_gid], p.theta, dstar.side(lattice_gen), dstar.lower, s_in, b_in)
    # bad sets: the small cube per the lattice-collar definition, the big one analogously
    b_gen = int(b_part.gen[b_gid])
    bad_s = s_in & _collar_union(collars, U, b_key, range(s_gen - p.r, s_gen + p.r + 1), [lattice_gen])
    bad_b = b_in & _collar_union(collars, U, s_key, range(b_gen - p.r, b_gen + p.r + 1),
                                 [b_gen + a - j for a in range(-p.r, p.r + 1)])
    out.containment_failures += int(np.sum(surg.small_bd & ~bad_s) + np.sum(surg.big_bd & ~bad_b))
    out.five_failures += int(np.sum(~surg.five_inside))
    out.matched += surg.n_matched
    if f_small:
        f_sep, f_bd, f_del, g_sep, g_bd, g_del = (surg.small_sep, surg.small_bd, surg.small_delta,
                                                  surg.big_sep, surg.big_bd, surg.big_delta)
        bad_f, bad_g = bad_s, bad_b
    else:
        f_sep, f_bd, f_del, g_sep, g_bd, g_del = (surg.big_sep, surg.big_bd, surg.big_delta,
                                                  surg.small_sep, surg.small_bd, surg.small_delta)
        bad_f, bad_g = bad_b, bad_s
    M = op.matrix[np.ix_(U, U)]
    wU = w[U]
    lab = surg.labels
    same_H = (lab[:, None] == lab[None, :]) & (lab[:, None] >= 0)
    bH = None
    if surg.n_matched:
        bH = np.stack([gside.fam.b_for_box(lo, hi) for lo, hi in zip(surg.H_lo, surg.H_hi)])
    total = 0.0
    for a in bi:
        if a.amplitude == 0:
            continue
        u_full = b_f[a.stop]
        uU = u_full[U]
        for b in bj:
            if b.amplitude == 0:
                continue
            v_full = b_g[b.stop]
            vU = v_full[U]
            vw = vU * wU
            tp = lambda mu_mask, mv_mask: float((vw * mv_mask) @ M @ (uU * mu_mask))
            X = tp(in_I, in_J)
            vals = {"g_sep": tp(in_I, g_sep), "g_boundary": tp(in_I, g_bd),
                    "f_sep": tp(f_sep, g_del), "f_boundary": tp(f_bd, g_del)}
            delta = tp(f_del, g_del)
            matched = float(vw @ (M * same_H) @ uU)
            vals["offdiagonal"] = delta - matched
            sig_coef = 0.0
            if surg.n_matched:
                sig = _sigma_many(op, surg.H_lo, surg.H_hi, u_full, v_full, bH, p.sigma, M_f[a.stop])
                t = sig.terms
                _check_resum("matched cubes", matched, [float(t["matched"].sum())])
                vals.update(full=sig.total("full"), mid=-sig.total("mid"), collar=-sig.total("collar"),
                            far_meanzero=-sig.total("far_meanzero"), far_pivot=-sig.total("far_pivot"))
                out.mean_ratio = max(out.mean_ratio, sig.mean_ratio)
                out.sigma_skipped += sig.skipped
                sig_coef = float(sig.collar_coef.sum())
            _check_resum("theta surgery", X, list(vals.values()))
            weight = a.sign * b.sign * a.amplitude * b.amplitude
            AB = a.amplitude * b.amplitude
            for k, v in vals.items():
                out.parts[k] += weight * v
            out.abs_sums[a.branch, b.branch] += AB * abs(X)
            out.c_part += AB * sum(abs(vals[k]) for k in DIAG_C_TERMS if k in vals)
            n = lambda vec, m: math.sqrt(float(np.dot(vec * vec * m, wU)))
            out.t_coef += AB * (n(uU, f_bd) * n(vU, g_del) + n(uU, in_I) * n(vU, g_bd) + sig_coef)
            out.bad_form_coef += AB * (n(uU, bad_f) * n(vU, in_J) + n(uU, in_I) * n(vU, bad_g))
            total += weight * X
    return total


def branch_energy_sums(side: Side, Mu_cache: dict | None = None) -> dict:
    """``sum_Q sum_i sum_branches A^2 (||1_{Q_i} M u||^2 + ||1_{Q_i} S u||^2)`` and its ratio to ``||h||^2``."""
    mu = side.mu
    w = mu.weights
    Mu_cache = {} if Mu_cache is None else Mu_cache
    Su_cache = {}
    maximal, testing = 0.0, 0.0
    for q in range(side.n):
        for i in side.part.children(q):
            mask = side.part.atom_mask(int(i))
            for c in branches(side, q, int(i)):
                if c.amplitude == 0:
                    continue
                if c.stop not in Mu_cache:
                    Mu_cache[c.stop] = centred_maximal(mu, side.fam.b(c.stop))
                if c.stop not in Su_cache:
                    Su_cache[c.stop] = side.apply(side.fam.b(c.stop)[:, None])[:, 0]
                maximal += c.amplitude**2 * float(np.dot(Mu_cache[c.stop] ** 2 * mask, w))
                testing += c.amplitude**2 * float(np.dot(Su_cache[c.stop] ** 2 * mask, w))
    h2 = float(np.dot(side.dec.f**2, w))
    return {"maximal": maximal, "testing": testing,
            "maximal_ratio": maximal / h2 if h2 > 0 else 0.0, "testing_ratio": testing / h2 if h2 > 0 else 0.0}


# scenarios, trials and the report -------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Measure, kernel, families and the pair (f, g); the grids are drawn per trial.

    Atoms form a mesh of the finest grid side over ``[-3 2^(N-1), 3 2^(N-1))^n``,
    which holds every possible root of both grids.  f and g are seeded uniform
    values in [-1, 1] on the atoms of Q0 (``functions="same"`` sets g = f,
    ``"ones"`` uses the indicator of Q0 for both).
    """

    dimension: int = 1
    q0_side: float = 1.0
    depth: int = 7
    kernel: str = "cauchy"
    kernel_scale: float = 1.0
    measure: str = "uniform"  # uniform | jittered
    family: str = "custom"  # custom | perturbed | indicator
    amplitude: float = 0.5
    eta: float = 0.25
    functions: str = "random"  # random | same | ones
    seed: int = 0

    def __post_init__(self):
        if self.measure not in ("uniform", "jittered"):
            raise ValueError(f"unknown measure {self.measure!r}")
        if self.family not in ("custom", "perturbed", "indicator"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.functions not in ("random", "same", "ones"):
            raise ValueError(f"unknown functions {self.functions!r}")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")

    @property
    def N(self) -> int:
        return Params.root_scale(self.q0_side)

    @property
    def atoms_per_side(self) -> int:
        return 3 * 2 ** (self.depth - 1)


@dataclass
class ScenarioData:
    scenario: Scenario
    mu: DiscreteMeasure
    op: DiscretizedOperator
    f: np.ndarray
    g: np.ndarray
    M_norm: float
    T_norm: float
    q0_mass: float


def build_scenario(sc: Scenario, M_norm: float | None = None) -> ScenarioData:
    from .czo import discretize, kernel_from_config
    from .instances import jittered_mesh
    from .measure import maximal_op_norm, uniform_measure

    half = 1.5 * 2.0**sc.N
    n = sc.atoms_per_side
    if sc.measure == "uniform":
        mu = uniform_measure(n, -half, half, sc.dimension)
    else:
        mu = jittered_mesh(sc.seed, n, sc.dimension, half_width=half)
    cfg = {"name": sc.kernel}
    if sc.kernel_scale != 1.0:
        cfg["scale"] = sc.kernel_scale
    op = discretize(kernel_from_config(cfg, sc.dimension), mu)
    h0 = 0.5 * sc.q0_side
    in_q0 = in_box(mu.points, -h0, h0)
    if sc.functions == "ones":
        f = in_q0.astype(float)
        g = f.copy()
    else:
        f = np.where(in_q0, np.random.default_rng([sc.seed, 1]).uniform(-1, 1, mu.n_atoms), 0.0)
        g = f.copy() if sc.functions == "same" else np.where(
            in_q0, np.random.default_rng([sc.seed, 2]).uniform(-1, 1, mu.n_atoms), 0.0)
    M = maximal_op_norm(mu).value if M_norm is None else M_norm
    return ScenarioData(sc, mu, op, f, g, M, op.op_norm(), float(mu.weights[in_q0].sum()))


def _family(sc: Scenario, part: GridPartition, mu: DiscreteMeasure, side: str, seed: int) -> TestFunctionFamily:
    from .testfns import FamilyStrategy, make_family, random_custom_records

    if sc.family == "custom":
        build = lambda pt: random_custom_records(pt, sc.amplitude, seed, 2, mu.points)
        return TestFunctionFamily(FamilyStrategy("custom", builder=build), part.grid, mu, side, part)
    if sc.family == "perturbed":
        return make_family({"kind": "perturbed", "eta": sc.eta, "seed": seed,
                            "signs_resolution": part.depth}, part.grid, mu, side, part)
    return make_family({"kind": "indicator"}, part.grid, mu, side, part)


@dataclass
class Trial:
    """Grids, trees and sides for one draw of the three shifts."""

    index: int
    shifts: dict
    fside: Side
    gside: Side
    dstar: ShiftedDyadicGrid
    A: float
    B: float


def draw_trial(data: ScenarioData, t: int) -> Trial:
    from .testfns import constants
    from .stopping import build_stopping

    sc, mu, op = data.scenario, data.mu, data.op
    w = mu.weights
    rng = np.random.default_rng([sc.seed, 7, t])
    wT, wS, wD = (random_shift(rng, sc.N, sc.dimension) for _ in range(3))
    grids = [build_grid(s, sc.N, sc.depth, sc.dimension) for s in (wT, wS, wD)]
    famT = _family(sc, GridPartition(grids[0], mu.points), mu, "T", 2 * sc.seed)
    famS = _family(sc, GridPartition(grids[1], mu.points), mu, "T*", 2 * sc.seed + 1)
    c = constants(famT, op, famS)
    treeT = build_stopping(famT, op, c.A, c.B, M_norm=data.M_norm)
    treeS = build_stopping(famS, op, c.A, c.B, M_norm=data.M_norm)
    T = lambda X: op.matrix @ X
    Ts = lambda X: op.K.T @ (w[:, None] * X)
    fside = Side(treeT, data.f, T, Ts)
    gside = Side(treeS, data.g, Ts, T)
    shifts = {"f_grid": list(map(float, wT)), "g_grid": list(map(float, wS)), "lattice": list(map(float, wD))}
    return Trial(t, shifts, fside, gside, grids[2], c.A, c.B)


@dataclass
class TrialResult:
    index: int
    shifts: dict
    exact: float
    pieces: dict
    residual: float
    c_parts: dict
    t_coefs: dict
    diagnostics: dict

    @property
    def c_total(self) -> float:
        return float(sum(self.c_parts.values()))

    @property
    def t_total(self) -> float:
        return float(sum(self.t_coefs.values()))


def run_trial(data: ScenarioData, p: Params, t: int) -> TrialResult:
    tr = draw_trial(data, t)
    fside, gside, op = tr.fside, tr.gside, data.op
    w = data.mu.weights
    kernel = op.kernel
    gamma = p.gamma_for(kernel)
    P = fside.applied.T @ (w[:, None] * gside.pieces)
    P_adj = gside.applied.T @ (w[:, None] * fside.pieces)
    scale = max(float(np.abs(P).max(initial=0.0)), 1e-300)
    if float(np.abs(P - P_adj.T).max(initial=0.0)) > RESUM_TOL * scale:
        raise BookkeepingError("pair matrix: T and T* routes disagree")
    pairs = split_pairs(fside.part, gside.part, gamma, p.r)
    act = (fside.beta[: fside.n] < p.beta)[:, None] & (gside.beta[: gside.n] < p.beta)[None, :]
    main = float(P[act].sum())
    sep = separated_sum(pairs, P, fside.norms, gside.norms, fside.fam.mass, gside.fam.mass, kernel, act)
    n1 = nested_half(fside, gside, P, pairs.mask(NESTED, 1) & act, p, kernel, gamma)
    n2 = nested_half(gside, fside, P.T, (pairs.mask(NESTED, 2) & act).T, p, kernel, gamma)
    nest = n1.add(n2)
    diag = diagonal_sum(fside, gside, P, pairs.mask(DIAGONAL) & act, op, tr.dstar, p)
    _check_resum("main sum buckets", main, [sep.value, nest.total, diag.total])
    tail = beta_tail(fside, gside, op, p, q0_mass=data.q0_mass)
    pieces = {"separated": sep.value, "nested_bad": nest.bad, "nested_outside": nest.outside,
              "nested_inside": nest.inside_tail, "paraproduct": nest.paraproduct}
    pieces.update({f"diagonal_{k}": v for k, v in diag.parts.items()})
    pieces.update(tail.values)
    exact = op.pair(data.f, data.g)
    vals = np.array(list(pieces.values()))
    residual = abs(float(vals.sum()) - exact) / max(abs(exact), float(np.abs(vals).max(initial=0.0)), 1e-300)
    if residual > RESUM_TOL:
        raise BookkeepingError(f"total: pieces resum to <Tf, g> with relative error {residual:.3e}")
    c_parts = {"separated": sep.pairwise_constant * sep.bound,
               "nested_outside": nest.outside_constant * nest.outside_structural,
               "nested_inside": nest.inside_constant * nest.inside_structural,
               "paraproduct": nest.paraproduct_bound, "diagonal": diag.c_part}
    c_parts.update(tail.c_parts)
    t_coefs = {"nested_bad": nest.bad_coef, "diagonal": diag.t_coef}
    t_coefs.update(tail.t_coefs)
    diagnostics = {
        "A": tr.A, "B": tr.B, "gamma": gamma,
        "pair_counts": pairs.counts(), "active_pairs": int(act.sum()),
        "separated_constant": sep.pairwise_constant, "separated_structural": sep.bound,
        "nested_good": nest.good, "nested_bad": nest.bad, "n_good": nest.n_good, "n_bad": nest.n_bad,
        "nested_bad_coef_exact": nest.bad_coef_exact,
        "outside_constant": nest.outside_constant, "inside_constant": nest.inside_constant,
        "containment_failures": nest.containment_failures, "no_top_cube": nest.no_top_cube,
        "eps_ratio": nest.eps_ratio, "paraproduct_split_ratio": nest.paraproduct_split_ratio,
        "diagonal_abs_sums": diag.abs_sums.tolist(), "diagonal_bad_form_coef": diag.bad_form_coef,
        "diagonal_neighbours": diag.neighbours, "diagonal_child_pairs": diag.n_child_pairs,
        "matched_cubes": diag.matched, "surgery_containment_failures": diag.containment_failures,
        "five_failures": diag.five_failures, "sigma_skipped": diag.sigma_skipped,
        "mean_ratio": diag.mean_ratio,
        "tail_ratio_f": tail.tail_ratio_f, "tail_ratio_g": tail.tail_ratio_g,
        "generation_tail_coef": tail.generation_coef,
        "corner_far_abs": tail.corner.far_abs,
        "depth_capped": bool(fside.tree.depth_capped or gside.tree.depth_capped),
    }
    return TrialResult(t, tr.shifts, exact, pieces, residual, c_parts, t_coefs, diagnostics)


@dataclass
class PairingReport:
    scenario: Scenario
    params: Params
    trials: list
    M_norm: float
    T_norm: float
    lambda_mass: float
    lambda_covers: bool
    collar: CollarReport | None = None

    @property
    def max_residual(self) -> float:
        return max((t.residual for t in self.trials), default=0.0)

    def normalized(self) -> dict:
        """Mean and max over trials of the C-part and the ||T||-coefficient, over mu(lam Q0)."""
        m = self.lambda_mass if self.lambda_mass > 0 else 1.0
        C = np.array([t.c_total for t in self.trials]) / m
        c = np.array([t.t_total for t in self.trials]) / m
        return {"C_mean": float(C.mean()), "C_max": float(C.max()),
                "c_mean": float(c.mean()), "c_max": float(c.max()),
                "T_part_max": float(c.max()) * self.T_norm}

    def summary(self) -> dict:
        out = {"trials": len(self.trials), "max_residual": self.max_residual, "M_norm": self.M_norm,
               "T_norm": self.T_norm, "lambda_mass": self.lambda_mass, "lambda_covers": self.lambda_covers}
        out.update(self.normalized())
        names = list(self.trials[0].pieces) if self.trials else []
        out["pieces_mean"] = {k: float(np.mean([t.pieces[k] for t in self.trials])) for k in names}
        out["exact_mean"] = float(np.mean([t.exact for t in self.trials])) if self.trials else 0.0
        return out

    def to_dict(self) -> dict:
        return {"scenario": asdict(self.scenario), "params": asdict(self.params),
                "summary": self.summary(),
                "collar": asdict(self.collar) if self.collar is not None else None,
                "trials": [asdict(t) for t in self.trials]}


def full_report(scenario: Scenario | None = None, params: Params | None = None, trials: int | None = None,
                data: ScenarioData | None = None, workers: int = 1, collar_us=None) -> PairingReport:
    """Run every trial of the decomposition; any failed identity raises ``BookkeepingError``."""
    scenario = Scenario() if scenario is None else scenario
    params = Params() if params is None else params
    trials = params.trials if trials is None else trials
    data = build_scenario(scenario) if data is None else data
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda t: run_trial(data, params, t), range(trials)))
    else:
        results = [run_trial(data, params, t) for t in range(trials)]
    lam = lambda_mass(data.mu, scenario.q0_side, params.lam)
    us = [params.u] if collar_us is None else collar_us
    collar = collar_mass_mc(data.mu, scenario.q0_side, params, max(trials, 2), scenario.seed, us)
    return PairingReport(scenario, params, results, data.M_norm, data.T_norm, lam,
                         params.covers(scenario.q0_side), collar)
