"""Finite atomic measures, averages, norms, growth certificates and maximal functions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import Cube, GridPartition, ShiftedDyadicGrid


class EmptyCubeError(ValueError):
    """Raised when an average over a zero-mass cube is requested."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray
    m: float
    r_min: float | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights differ in length")
        if w.size == 0:
            raise ValueError("measure needs at least one atom")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and strictly positive")
        if self.m <= 0:
            raise ValueError("growth exponent m must be positive")
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ValueError("atom points must be pairwise distinct")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if self.r_min is None:
            object.__setattr__(self, "r_min", self._min_spacing())

    def _min_spacing(self) -> float:
        if self.n_atoms == 1:
            return 1.0
        d = self.distances.copy()
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @cached_property
    def distances(self) -> np.ndarray:
        return cdist(self.points, self.points)

    @cached_property
    def _balls(self) -> "_BallTable":
        return _BallTable(self.distances, self.weights)

    def mass_in(self, mask: np.ndarray) -> float:
        return float(self.weights[mask].sum())

    def mass_of_box(self, lo, hi) -> float:
        inside = np.all((self.points >= lo) & (self.points < hi), axis=1)
        return float(self.weights[inside].sum())

    def restrict_to_box(self, lo, hi) -> np.ndarray:
        return np.all((self.points >= lo) & (self.points < hi), axis=1)


def as_atom_fn(mu: DiscreteMeasure, values) -> np.ndarray:
    v = np.asarray(values, dtype=float).ravel()
    if v.shape[0] != mu.n_atoms:
        raise ValueError(f"function has {v.shape[0]} values for {mu.n_atoms} atoms")
    return v


def integral(mu: DiscreteMeasure, f) -> float:
    return float(np.dot(as_atom_fn(mu, f), mu.weights))


def inner(mu: DiscreteMeasure, f, g) -> float:
    return float(np.sum(as_atom_fn(mu, f) * as_atom_fn(mu, g) * mu.weights))


def average(mu: DiscreteMeasure, f, Q: Cube) -> float:
    """Mean of f over Q with respect to mu."""
    mask = Q.contains_points(mu.points)
    mass = mu.weights[mask].sum()
    if mass <= 0:
        raise EmptyCubeError("average over a cube of zero mass")
    return float(np.dot(as_atom_fn(mu, f)[mask], mu.weights[mask]) / mass)


def lp_norm(mu: DiscreteMeasure, h, p: float) -> float:
    if p < 1:
        raise ValueError("p must be >= 1")
    a = np.abs(as_atom_fn(mu, h))
    return float(np.sum(a**p * mu.weights) ** (1.0 / p))


def weak_lp_quasinorm(mu: DiscreteMeasure, h, p: float) -> float:
    """``sup_t t * mu(|h| > t)^(1/p)``, attained as t increases to an atom value."""
    if p < 1:
        raise ValueError("p must be >= 1")
    a = np.abs(as_atom_fn(mu, h))
    order = np.argsort(-a, kind="stable")
    vals = a[order]
    mass = np.cumsum(mu.weights[order])
    # group ties so that mass counts every atom with |h| >= level
    last = np.r_[vals[1:] != vals[:-1], True]
    levels, masses = vals[last], mass[last]
    if levels.size == 0:
        return 0.0
    return float(np.max(levels * masses ** (1.0 / p)))


def verify_growth(mu: DiscreteMeasure) -> float:
    """Largest ``mu(B(x, r)) / r^m`` over atoms x and a dyadic radius ladder.

    Balls are open here; radii run over ``r_min * 2^k`` up to the diameter, plus
    ``r_min`` and the diameter themselves.
    """
    d = mu.distances
    diam = float(d.max())
    radii = [mu.r_min]
    r = mu.r_min
    while r * 2 <= diam:
        r *= 2
        radii.append(r)
    if diam > mu.r_min:
        radii.append(diam)
    radii = np.asarray(radii)
    order = np.argsort(d, axis=1)
    ds = np.take_along_axis(d, order, axis=1)
    cum = np.cumsum(mu.weights[order], axis=1)
    best = 0.0
    for rad in radii:
        counts = np.array([np.searchsorted(row, rad, side="left") for row in ds])
        masses = cum[np.arange(mu.n_atoms), counts - 1]
        best = max(best, float(masses.max() / rad**mu.m))
    return best


class _BallTable:
    """Sorted neighbourhoods for closed-ball averages around every atom."""

    def __init__(self, distances: np.ndarray, weights: np.ndarray):
        self.order = np.argsort(distances, axis=1, kind="stable")
        ds = np.take_along_axis(distances, self.order, axis=1)
        # a closed ball contains whole tie groups: evaluate only at group ends
        self.ends = np.concatenate([ds[:, 1:] != ds[:, :-1], np.ones((ds.shape[0], 1), bool)], axis=1)
        self.cum_w = np.cumsum(weights[self.order], axis=1)
        self.weights = weights
        # rank[x, i]: position of atom i in the ordering around x, moved to its group end
        n = distances.shape[0]
        pos = np.empty_like(self.order)
        np.put_along_axis(pos, self.order, np.arange(n)[None, :].repeat(n, 0), axis=1)
        end_index = np.where(self.ends, np.arange(n)[None, :], n)
        end_index = np.minimum.accumulate(end_index[:, ::-1], axis=1)[:, ::-1]
        self.ball_mass_through = np.take_along_axis(
            np.take_along_axis(self.cum_w, end_index, axis=1), pos, axis=1
        )

    def maximal(self, h_abs: np.ndarray, with_radius: bool = False):
        cum_h = np.cumsum((h_abs * self.weights)[self.order], axis=1)
        ratio = np.where(self.ends, cum_h / self.cum_w, -np.inf)
        if with_radius:
            k = ratio.argmax(axis=1)
            return ratio[np.arange(ratio.shape[0]), k], k
        return ratio.max(axis=1)

    def averaging_matrix(self, k: np.ndarray) -> np.ndarray:
        """Row x averages over the ``k[x]+1`` nearest atoms of x (a fixed radius choice)."""
        n = self.order.shape[0]
        rows = np.zeros((n, n))
        take = np.arange(n)[None, :] <= k[:, None]
        vals = np.where(take, self.weights[self.order] / self.cum_w[np.arange(n), k][:, None], 0.0)
        np.put_along_axis(rows, self.order, vals, axis=1)
        return rows


def centred_maximal(mu: DiscreteMeasure, h) -> np.ndarray:
    """Centred maximal function over closed balls, evaluated at every atom."""
    return mu._balls.maximal(np.abs(as_atom_fn(mu, h)))


@dataclass
class MaximalNormEstimate:
    value: float
    probe_count: int
    probe_kinds: dict = field(default_factory=dict)


def maximal_op_norm(mu: DiscreteMeasure, seed: int = 0, n_random: int = 32,
                    n_ball_centres: int = 64, extra_probes=None,
                    n_ascent_starts: int = 3) -> MaximalNormEstimate:
    """Largest ``||M h|| / ||h||`` over a deterministic probe set.

    Probes: every atom indicator (closed form), the constant 1, indicators of
    nested balls around evenly spaced centres, seeded random nonnegative
    functions, and any ``extra_probes`` supplied by the caller.  The best few
    probes then seed a monotone ascent (see ``_selection_ascent``).
    """
    balls = mu._balls
    w = mu.weights
    kinds = {}
    # M(1_{x_i})(x) = w_i / mu(smallest closed ball about x containing x_i)
    ratio_sq = (w[None, :] / balls.ball_mass_through**2 * w[:, None]).sum(axis=0)
    best = float(np.sqrt(ratio_sq.max()))
    kinds["indicator"] = mu.n_atoms

    scored: list[tuple[float, int, np.ndarray]] = []

    def consider(h):
        nonlocal best
        nh = lp_norm(mu, h, 2)
        if nh > 0:
            val = lp_norm(mu, centred_maximal(mu, h), 2) / nh
            best = max(best, val)
            scored.append((val, len(scored), h))

    consider(np.ones(mu.n_atoms))
    kinds["constant"] = 1
    centres = np.unique(np.linspace(0, mu.n_atoms - 1, min(n_ball_centres, mu.n_atoms)).astype(int))
    n_ball = 0
    for c in centres:
        k = 2
        while k < mu.n_atoms:
            h = np.zeros(mu.n_atoms)
            h[balls.order[c, :k]] = 1.0
            consider(h)
            n_ball += 1
            k *= 4
    kinds["ball"] = n_ball
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        consider(rng.random(mu.n_atoms) ** 4)
    kinds["random"] = n_random
    n_extra = 0
    for h in extra_probes or ():
        consider(np.abs(h))
        n_extra += 1
    kinds["extra"] = n_extra
    top = np.argsort(ratio_sq)[::-1][:n_ascent_starts]
    starts = [h for _, _, h in sorted(scored, key=lambda t: (-t[0], t[1]))[:n_ascent_starts]]
    for i in top:
        e = np.zeros(mu.n_atoms)
        e[i] = 1.0
        starts.append(e)
    n_ascent = 0
    for h in starts:
        best = max(best, _selection_ascent(mu, h))
        n_ascent += 1
    kinds["ascent"] = n_ascent
    return MaximalNormEstimate(best, sum(kinds.values()), kinds)


def _selection_ascent(mu: DiscreteMeasure, h: np.ndarray, rounds: int = 10,
                      power_steps: int = 30) -> float:
    """Alternate the maximizing radii and the Perron vector of the frozen averaging map.

    With radii frozen, ``h -> (averages)`` is linear with nonnegative entries, so its top
    singular vector in L2(mu) is nonnegative; each round cannot decrease the ratio.
    """
    balls = mu._balls
    sw = np.sqrt(mu.weights)
    best = 0.0
    for _ in range(rounds):
        Mh, k = balls.maximal(np.abs(h), with_radius=True)
        ratio = float(np.sqrt(np.sum(Mh**2 * mu.weights) / np.sum(h**2 * mu.weights)))
        if ratio <= best * (1 + 1e-12):
            break
        best = ratio
        B = sw[:, None] * balls.averaging_matrix(k) / sw[None, :]
        v = sw * np.abs(h)
        for _ in range(power_steps):
            v_new = B.T @ (B @ v)
            v_new /= np.linalg.norm(v_new)
            if np.linalg.norm(v_new - v) < 1e-13:
                v = v_new
                break
            v = v_new
        h = np.abs(v) / sw
    return best


def cube_sums(part: GridPartition, values: np.ndarray) -> np.ndarray:
    """Per-cube sums of an atom array, indexed by global cube id."""
    out = np.empty(part.n_cubes)
    v = np.asarray(values, dtype=float)
    for g in range(part.depth + 1):
        lab = part.labels[g]
        sel = lab >= 0
        out[part.offsets[g]:part.offsets[g + 1]] = np.bincount(
            lab[sel], weights=v[sel], minlength=part.offsets[g + 1] - part.offsets[g]
        )
    return out


def cube_averages(part: GridPartition, mu: DiscreteMeasure, f) -> np.ndarray:
    mass = cube_sums(part, mu.weights)
    return cube_sums(part, as_atom_fn(mu, f) * mu.weights) / mass


def spread(part: GridPartition, per_cube: np.ndarray, g: int) -> np.ndarray:
    """Atom array carrying the value of each atom's generation-g cube (0 outside the root)."""
    lab = part.gid_labels(g)
    return np.where(lab >= 0, per_cube[np.maximum(lab, 0)], 0.0)


def dyadic_maximal(mu: DiscreteMeasure, h, grid: ShiftedDyadicGrid | GridPartition) -> np.ndarray:
    """``sup`` of ``<|h|>_R`` over grid cubes R containing each atom."""
    part = grid if isinstance(grid, GridPartition) else GridPartition(grid, mu.points)
    avg = cube_averages(part, mu, np.abs(as_atom_fn(mu, h)))
    out = np.zeros(mu.n_atoms)
    for g in range(part.depth + 1):
        out = np.maximum(out, spread(part, avg, g))
    return out


def uniform_measure(n_per_side: int, lo, hi, dimension: int = 1, m: float | None = None,
                    mass: float | None = None) -> DiscreteMeasure:
    """Atoms at the centres of a regular mesh on the box, equal weights.

    Total mass defaults to the box volume (density one).
    """
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dimension,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dimension,))
    axes = [lo[i] + (np.arange(n_per_side) + 0.5) * (hi[i] - lo[i]) / n_per_side for i in range(dimension)]
    pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    volume = float(np.prod(hi - lo)) if mass is None else float(mass)
    w = np.full(pts.shape[0], volume / pts.shape[0])
    spacing = float(np.min((hi - lo) / n_per_side))
    return DiscreteMeasure(pts, w, m=float(dimension if m is None else m), r_min=spacing)


def cantor_measure(ratio: float, levels: int, lo, hi, dimension: int = 1,
                   mass: float = 1.0) -> DiscreteMeasure:
    """Product Cantor-type measure: keep two end intervals of relative length ``ratio``."""
    if not (0.0 < ratio < 0.5):
        raise ValueError("ratio must lie in (0, 1/2)")
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dimension,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dimension,))
    axes = []
    for i in range(dimension):
        starts = np.array([lo[i]])
        length = hi[i] - lo[i]
        for _ in range(levels):
            length *= ratio
            starts = np.concatenate([starts, starts + (length / ratio - length)])
        axes.append(np.sort(starts + 0.5 * length))
    pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    w = np.full(pts.shape[0], mass / pts.shape[0])
    m = dimension * math.log(2.0) / math.log(1.0 / ratio)
    finest = float(np.min(hi - lo)) * ratio**levels
    return DiscreteMeasure(pts, w, m=m, r_min=finest)


def point_mass_mixture(n_background: int, n_heavy: int, heavy_factor: float, lo, hi,
                       dimension: int = 1, seed: int = 0, m: float | None = None) -> DiscreteMeasure:
    """Uniform background mesh plus seeded heavy atoms at random mesh positions."""
    base = uniform_measure(n_background, lo, hi, dimension, m=m)
    rng = np.random.default_rng(seed)
    w = base.weights.copy()
    heavy = rng.choice(base.n_atoms, size=min(n_heavy, base.n_atoms), replace=False)
    w[heavy] *= heavy_factor
    return DiscreteMeasure(base.points, w, m=base.m, r_min=base.r_min)


def load_measure(path) -> DiscreteMeasure:
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - {"dimension", "m", "atoms", "r_min"}
    if unknown:
        raise ValueError(f"unknown measure keys: {sorted(unknown)}")
    dim = int(doc["dimension"])
    pts = np.array([a[0] for a in doc["atoms"]], dtype=float).reshape(-1, dim)
    w = np.array([a[1] for a in doc["atoms"]], dtype=float)
    return DiscreteMeasure(pts, w, m=float(doc["m"]), r_min=doc.get("r_min"))


def dump_measure(mu: DiscreteMeasure, path) -> None:
    doc = {
        "dimension": mu.dimension,
        "m": mu.m,
        "r_min": mu.r_min,
        "atoms": [[list(map(float, p)), float(w)] for p, w in zip(mu.points, mu.weights)],
    }
    Path(path).write_text(json.dumps(doc, indent=1))
