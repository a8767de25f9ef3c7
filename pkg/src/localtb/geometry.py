"""Shifted dyadic grids, half-open cubes, skeleton distances and good/bad cubes.

A grid with root scale ``N`` and shift ``w`` has root cube ``w + [-2^N, 2^N)^n``;
generation ``g`` cubes have side ``2^(N+1-g)``.  Shifts are dyadic rationals with
at most ``SHIFT_BITS`` fractional bits relative to the root side, so every corner
of every generation up to ``SHIFT_BITS`` is exactly representable in binary64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SHIFT_BITS = 48


class GridRangeError(ValueError):
    """Raised when a grid shift lies outside ``[-2^(N-1), 2^(N-1)]^n``."""


@dataclass(frozen=True)
class ShiftedDyadicGrid:
    shift: tuple[float, ...]
    N: int
    depth: int
    dimension: int

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.shift) != self.dimension:
            raise ValueError("shift has wrong dimension")
        half = 2.0 ** (self.N - 1)
        for s in self.shift:
            if not (-half <= s <= half):
                raise GridRangeError(f"shift component {s} outside [-{half}, {half}]")

    @property
    def root_side(self) -> float:
        return 2.0 ** (self.N + 1)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.shift, dtype=float) - 2.0 ** self.N

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.shift, dtype=float) + 2.0 ** self.N

    def side(self, generation: int) -> float:
        return 2.0 ** (self.N + 1 - generation)

    def generation_of_side(self, side: float) -> int:
        return self.N + 1 - int(round(math.log2(side)))

    def root(self) -> "Cube":
        return Cube(self, 0, (0,) * self.dimension)

    def locate(self, points: np.ndarray, generation: int) -> np.ndarray:
        """Integer lattice index of the generation cube containing each point.

        Points outside the root get indices outside ``[0, 2^generation)``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.lower) / self.side(generation)).astype(np.int64)

    def cube_at(self, point: Sequence[float], generation: int) -> "Cube | None":
        idx = self.locate(np.asarray(point, dtype=float)[None, :], generation)[0]
        if np.any(idx < 0) or np.any(idx >= 2**generation):
            return None
        return Cube(self, generation, tuple(int(i) for i in idx))

    def inside(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lower) & (pts < self.upper), axis=1)


def build_grid(shift, N: int, depth: int, dimension: int) -> ShiftedDyadicGrid:
    """Grid with root ``shift + [-2^N, 2^N)^dimension`` and ``depth`` generations."""
    shift = tuple(float(s) for s in np.atleast_1d(np.asarray(shift, dtype=float)))
    if len(shift) == 1 and dimension > 1:
        shift = shift * dimension
    return ShiftedDyadicGrid(shift=shift, N=int(N), depth=int(depth), dimension=int(dimension))


def random_shift(rng: np.random.Generator, N: int, dimension: int) -> tuple[float, ...]:
    """Uniform dyadic shift in ``[-2^(N-1), 2^(N-1)]^n`` on a 2^-SHIFT_BITS lattice."""
    ticks = 2 ** (SHIFT_BITS - 2)  # half-box width in lattice units
    unit = 2.0 ** (N + 1 - SHIFT_BITS)
    raw = rng.integers(-ticks, ticks, size=dimension, endpoint=True)
    return tuple(float(k) * unit for k in raw)


def random_grid(rng: np.random.Generator, N: int, depth: int, dimension: int) -> ShiftedDyadicGrid:
    return build_grid(random_shift(rng, N, dimension), N, depth, dimension)


@dataclass(frozen=True)
class Cube:
    grid: ShiftedDyadicGrid = field(repr=False)
    generation: int
    index: tuple[int, ...]

    @property
    def side(self) -> float:
        return self.grid.side(self.generation)

    @property
    def lower(self) -> np.ndarray:
        return self.grid.lower + np.asarray(self.index, dtype=float) * self.side

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.side

    @property
    def center(self) -> np.ndarray:
        return self.lower + 0.5 * self.side

    def children(self) -> list["Cube"]:
        n = self.grid.dimension
        out = []
        for bits in range(2**n):
            idx = tuple(2 * i + ((bits >> k) & 1) for k, i in enumerate(self.index))
            out.append(Cube(self.grid, self.generation + 1, idx))
        return out

    def parent(self) -> "Cube":
        if self.generation == 0:
            raise ValueError("the root has no parent")
        return Cube(self.grid, self.generation - 1, tuple(i // 2 for i in self.index))

    def ancestor(self, k: int) -> "Cube":
        """The k-fold parent."""
        if k > self.generation:
            raise ValueError("ancestor above the root")
        shift = 2**k
        return Cube(self.grid, self.generation - k, tuple(i // shift for i in self.index))

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lower) & (pts < self.upper), axis=1)

    def contains(self, other: "Cube") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def dilate(self, factor: float) -> tuple[np.ndarray, np.ndarray]:
        """Concentric box with ``factor`` times the side, as (lower, upper)."""
        half = 0.5 * factor * self.side
        return self.center - half, self.center + half


def _interval_gap(a_lo, a_hi, b_lo, b_hi):
    return np.maximum(0.0, np.maximum(b_lo - a_hi, a_lo - b_hi))


def box_distance(lo_a, hi_a, lo_b, hi_b) -> np.ndarray:
    """Euclidean distance between closed boxes; broadcasts over leading axes."""
    gap = _interval_gap(np.asarray(lo_a), np.asarray(hi_a), np.asarray(lo_b), np.asarray(hi_b))
    return np.sqrt(np.sum(gap * gap, axis=-1))


def cube_distance(Q: Cube, R: Cube) -> float:
    return float(box_distance(Q.lower, Q.upper, R.lower, R.upper))


def long_distance(Q: Cube, R: Cube) -> float:
    """``side(Q) + side(R) + dist(Q, R)``."""
    return Q.side + R.side + cube_distance(Q, R)


def _distance_to_box_boundary(q_lo, q_hi, s_lo, s_hi) -> float:
    # closure(Q) inside the open box: nearest face is reached along one axis
    if np.all(q_lo > s_lo) and np.all(q_hi < s_hi):
        return float(np.min(np.minimum(q_lo - s_lo, s_hi - q_hi)))
    gap = _interval_gap(q_lo, q_hi, s_lo, s_hi)
    # disjoint closures: the nearest point of the closed box is on its boundary
    return float(np.sqrt(np.sum(gap * gap)))


def skeleton_distance(Q: Cube, S: Cube) -> float:
    """Distance from Q to the union of the boundaries of the children of S."""
    return min(_distance_to_box_boundary(Q.lower, Q.upper, c.lower, c.upper) for c in S.children())


def lattice_skeleton_distance(lo: np.ndarray, hi: np.ndarray, grid: ShiftedDyadicGrid,
                              generation: int) -> np.ndarray:
    """Distance from boxes to the union of ``sk S`` over all grid cubes S at ``generation``.

    That union is the boundary set of every generation+1 lattice cube in the root.
    ``lo``/``hi`` have shape (k, n).  Vectorized; exact up to the final square root.
    """
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    r_lo, r_hi = grid.lower, grid.upper
    step = grid.side(generation + 1)
    root_gap = _interval_gap(lo, hi, r_lo, r_hi)
    best = np.full(lo.shape[0], np.inf)
    for i in range(grid.dimension):
        # nearest lattice hyperplane x_i = r_lo + k*step, k in [0, 2^(generation+1)]
        kmax = 2 ** (generation + 1)
        k_lo = np.ceil((lo[:, i] - r_lo[i]) / step)
        k_hi = np.floor((hi[:, i] - r_lo[i]) / step)
        hit = np.maximum(k_lo, 0) <= np.minimum(k_hi, kmax)
        below = r_lo[i] + np.clip(k_hi, 0, kmax) * step
        above = r_lo[i] + np.clip(k_lo, 0, kmax) * step
        g = np.minimum(_interval_gap(lo[:, i], hi[:, i], below, below),
                       _interval_gap(lo[:, i], hi[:, i], above, above))
        g = np.where(hit, 0.0, g)
        other = np.sum(np.delete(root_gap, i, axis=1) ** 2, axis=1)
        best = np.minimum(best, np.sqrt(g * g + other))
    return best


@dataclass(frozen=True)
class GoodBadParams:
    gamma: float
    r: int

    def __post_init__(self):
        if not (0.0 < self.gamma < 0.5):
            raise ValueError("gamma must lie in (0, 1/2)")
        if self.r < 0:
            raise ValueError("r must be nonnegative")

    @classmethod
    def from_kernel(cls, m: float, alpha: float, r: int) -> "GoodBadParams":
        return cls(gamma=alpha / (2.0 * m + 2.0 * alpha), r=r)


def bad_generations(lo: np.ndarray, hi: np.ndarray, other: ShiftedDyadicGrid,
                    gamma: float) -> np.ndarray:
    """Boolean (k, depth+1) table: box k is bad w.r.t. some cube of ``other`` at generation h."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    side_q = hi[:, 0] - lo[:, 0]
    out = np.zeros((lo.shape[0], other.depth + 1), dtype=bool)
    for h in range(other.depth + 1):
        s = other.side(h)
        threshold = side_q**gamma * s ** (1.0 - gamma)
        # boundary convention: equality counts as bad
        out[:, h] = lattice_skeleton_distance(lo, hi, other, h) <= threshold
    return out


def is_good(Q: Cube, other: ShiftedDyadicGrid, A_scale: float, p: GoodBadParams) -> bool:
    """True iff Q is strictly far from ``sk S`` for every S in ``other`` with side >= A_scale."""
    if A_scale <= 0:
        raise ValueError("A_scale must be positive")
    bad = bad_generations(Q.lower[None, :], Q.upper[None, :], other, p.gamma)[0]
    for h in range(other.depth + 1):
        if other.side(h) >= A_scale and bad[h]:
            return False
    return True


def alpha_from_bad(bad_row: np.ndarray, other: ShiftedDyadicGrid, side_q: float, r: int,
                   k_max: int) -> int | None:
    """Smallest k in [r, k_max] with no bad generation of side >= 2^k * side_q."""
    bad_h = np.flatnonzero(bad_row)
    if bad_h.size == 0:
        return r if r <= k_max else None
    largest_bad_side = other.side(int(bad_h.min()))
    # good at scale A iff A > largest bad side; sides are powers of two
    k_needed = int(round(math.log2(2.0 * largest_bad_side / side_q)))
    k = max(r, k_needed)
    return k if k <= k_max else None


def alpha_generation(Q: Cube, other: ShiftedDyadicGrid, p: GoodBadParams,
                     k_max: int) -> int | None:
    """Smallest k >= r such that Q is good w.r.t. all cubes of side >= 2^k side(Q)."""
    if k_max < p.r:
        raise ValueError("k_max must be >= r")
    bad = bad_generations(Q.lower[None, :], Q.upper[None, :], other, p.gamma)[0]
    return alpha_from_bad(bad, other, Q.side, p.r, k_max)


@dataclass(frozen=True)
class BoundaryCollar:
    """Membership predicate for points within ``sigma * side`` of a lattice cube boundary."""

    grid: ShiftedDyadicGrid
    generation: int
    sigma: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        s = self.grid.side(self.generation)
        # the lattice is extended periodically outside the root
        offset = np.mod(pts - self.grid.lower, s)
        to_face = np.minimum(offset, s - offset)
        return np.min(to_face, axis=1) < self.sigma * s


def boundary_collar(grid: ShiftedDyadicGrid, k: int, sigma: float) -> BoundaryCollar:
    if not (0.0 <= sigma < 0.5):
        raise ValueError("sigma must lie in [0, 1/2)")
    return BoundaryCollar(grid, int(k), float(sigma))


class GridPartition:
    """Positive-mass cubes of a grid, indexed by atoms.

    Every atom inside the root belongs to exactly one cube per generation.
    ``labels[g][x]`` is the local number of that cube (``-1`` outside the root);
    ``gid = offsets[g] + local`` is a global cube id.
    """

    def __init__(self, grid: ShiftedDyadicGrid, points: np.ndarray):
        self.grid = grid
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        self.n_atoms = pts.shape[0]
        self.inside = grid.inside(pts)
        inside_idx = np.flatnonzero(self.inside)
        self.labels: list[np.ndarray] = []
        self.indices: list[np.ndarray] = []
        parents: list[np.ndarray] = []
        for g in range(grid.depth + 1):
            lab = np.full(self.n_atoms, -1, dtype=np.int64)
            if inside_idx.size:
                idx = grid.locate(pts[inside_idx], g)
                uniq, inv = np.unique(idx, axis=0, return_inverse=True)
                lab[inside_idx] = inv.ravel()
            else:
                uniq = np.zeros((0, grid.dimension), dtype=np.int64)
            self.labels.append(lab)
            self.indices.append(uniq)
            par = np.full(uniq.shape[0], -1, dtype=np.int64)
            if g > 0 and inside_idx.size:
                par[lab[inside_idx]] = self.labels[g - 1][inside_idx]
            parents.append(par)
        counts = [ix.shape[0] for ix in self.indices]
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.n_cubes = int(self.offsets[-1])
        self.gen = np.concatenate([np.full(c, g, dtype=np.int64) for g, c in enumerate(counts)])
        self.local = np.concatenate([np.arange(c, dtype=np.int64) for c in counts])
        self.parent = np.concatenate(
            [np.where(p >= 0, p + (self.offsets[g - 1] if g > 0 else 0), -1) for g, p in enumerate(parents)]
        ).astype(np.int64)
        self.index_table = np.concatenate(self.indices, axis=0) if self.n_cubes else np.zeros((0, grid.dimension))
        self.side = np.array([grid.side(int(g)) for g in self.gen])
        self.lower = grid.lower + self.index_table * self.side[:, None]
        self.upper = self.lower + self.side[:, None]
        self.atom_count = np.concatenate(
            [np.bincount(self.labels[g][self.inside], minlength=counts[g]) for g in range(grid.depth + 1)]
        )
        self._children = None

    @property
    def depth(self) -> int:
        return self.grid.depth

    def gid_labels(self, g: int) -> np.ndarray:
        """Global cube id per atom at generation g (-1 outside the root)."""
        lab = self.labels[g]
        return np.where(lab >= 0, lab + self.offsets[g], -1)

    def gids_at(self, g: int) -> np.ndarray:
        return np.arange(self.offsets[g], self.offsets[g + 1])

    def children(self, gid: int) -> np.ndarray:
        if self._children is None:
            order = np.argsort(self.parent, kind="stable")
            sorted_par = self.parent[order]
            starts = np.searchsorted(sorted_par, np.arange(self.n_cubes), side="left")
            ends = np.searchsorted(sorted_par, np.arange(self.n_cubes), side="right")
            self._children = (order, starts, ends)
        order, starts, ends = self._children
        return order[starts[gid]:ends[gid]]

    def ancestor_at(self, gid: int, g: int) -> int:
        while self.gen[gid] > g:
            gid = int(self.parent[gid])
        return gid

    def cube(self, gid: int) -> Cube:
        return Cube(self.grid, int(self.gen[gid]), tuple(int(i) for i in self.index_table[gid]))

    def find(self, cube: Cube) -> int | None:
        """Global id of ``cube`` if it has positive atom count in this partition."""
        g = cube.generation
        if g > self.depth:
            return None
        hits = np.flatnonzero(np.all(self.indices[g] == np.asarray(cube.index), axis=1))
        return int(hits[0] + self.offsets[g]) if hits.size else None

    def atom_mask(self, gid: int) -> np.ndarray:
        g = int(self.gen[gid])
        return self.labels[g] == self.local[gid]
