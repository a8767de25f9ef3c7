"""Accretive test-function families, one function per positive-mass cube.

A family stores, for each generation g, one atom-length array ``values[g]``: the
cubes of a generation partition the atoms in the root, so ``values[g][x]`` is the
value at x of the function attached to the generation-g cube containing x.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .czo import DiscretizedOperator
from .geometry import GridPartition, ShiftedDyadicGrid
from .measure import DiscreteMeasure, cube_sums, spread

SIDES = ("T", "T*")


class NonAccretiveError(ValueError):
    """Raised when a test function has zero mean on its cube."""


@dataclass(frozen=True)
class FamilyStrategy:
    """How to build the function attached to a cube.

    ``kind`` is one of ``indicator``, ``perturbed`` or ``custom``.  For ``perturbed``,
    ``signs_resolution`` (a generation of the grid, or None for atomwise signs) makes
    the sign field constant on cells so that it does not depend on atom density.
    """

    kind: str = "indicator"
    eta: float = 0.0
    seed: int = 0
    signs_resolution: int | None = None
    path: str | None = None
    records: dict = field(default_factory=dict, compare=False, repr=False)
    builder: object = field(default=None, compare=False, repr=False)  # partition -> records

    def records_for(self, part: GridPartition) -> dict:
        """Custom records for a partition; a builder regenerates them for any grid."""
        return self.builder(part) if self.builder is not None else self.records

    def __post_init__(self):
        if self.kind not in ("indicator", "perturbed", "custom"):
            raise ValueError(f"unknown family strategy {self.kind!r}")
        if self.kind == "perturbed" and not (0.0 <= self.eta <= 0.5):
            raise ValueError("perturbation size eta must lie in [0, 1/2]")

    @classmethod
    def from_config(cls, cfg: dict) -> "FamilyStrategy":
        kind = cfg.get("kind", "indicator")
        if kind == "custom":
            return cls(kind="custom", path=cfg["path"], records=load_custom_records(cfg["path"]))
        return cls(kind=kind, eta=float(cfg.get("eta", 0.0)), seed=int(cfg.get("seed", 0)),
                   signs_resolution=cfg.get("signs_resolution"))


def load_custom_records(path) -> dict:
    """Map ``(generation, index tuple) -> {atom id: value}`` from a JSON list of records."""
    recs = json.loads(Path(path).read_text())
    out = {}
    for r in recs:
        unknown = set(r) - {"generation", "index", "values"}
        if unknown:
            raise ValueError(f"unknown custom-family keys: {sorted(unknown)}")
        key = (int(r["generation"]), tuple(int(i) for i in r["index"]))
        out[key] = {int(k): float(v) for k, v in r["values"].items()}
    return out


def dump_custom_records(fam: "TestFunctionFamily", path) -> None:
    recs = []
    for gid in range(fam.part.n_cubes):
        g = int(fam.part.gen[gid])
        mask = fam.part.atom_mask(gid)
        vals = {str(int(i)): float(fam.values[g][i]) for i in np.flatnonzero(mask)}
        recs.append({"generation": g, "index": [int(i) for i in fam.part.index_table[gid]], "values": vals})
    Path(path).write_text(json.dumps(recs))


def random_custom_records(part: GridPartition, amplitude: float, seed: int,
                          resolution: int | None = None, points: np.ndarray | None = None) -> dict:
    """Independent per-cube functions ``1 + amplitude * xi`` with xi uniform in [-1, 1].

    Usable as ``FamilyStrategy(kind="custom", records=...)``; unlike the perturbed
    family, the function attached to a cube is unrelated to its parent's.  With
    ``resolution = k`` (needs the atom ``points``), xi is constant on the subcells
    k generations below the cube and drawn from a stream keyed by the cube's
    position, so refining the atoms samples the same functions.
    """
    if resolution is not None and points is None:
        raise ValueError("a spatial resolution needs the atom points")
    rng = np.random.default_rng(seed)
    dim = part.grid.dimension
    out = {}
    for gid in range(part.n_cubes):
        atoms = np.flatnonzero(part.atom_mask(gid))
        g = int(part.gen[gid])
        index = tuple(int(i) for i in part.index_table[gid])
        if resolution is None:
            xi = rng.uniform(-1.0, 1.0, atoms.size)
        else:
            k = int(resolution)
            sub = part.grid.locate(points[atoms], g + k) - np.asarray(index) * 2**k
            flat = np.ravel_multi_index(tuple(sub.T), (2**k,) * dim)
            table = np.random.default_rng([seed, g, *index]).uniform(-1.0, 1.0, 2 ** (k * dim))
            xi = table[flat]
        out[(g, index)] = {int(a): float(1.0 + amplitude * v) for a, v in zip(atoms, xi)}
    return out


def sign_field(strategy: FamilyStrategy, grid: ShiftedDyadicGrid, mu: DiscreteMeasure) -> np.ndarray:
    """Seeded +-1 per atom; constant on grid cells when a resolution is set."""
    if strategy.signs_resolution is None:
        return np.random.default_rng(strategy.seed).choice([-1.0, 1.0], size=mu.n_atoms)
    g = int(strategy.signs_resolution)
    per_axis = 2**g
    table = np.random.default_rng(strategy.seed).choice([-1.0, 1.0], size=per_axis**grid.dimension)
    idx = np.clip(grid.locate(mu.points, g), 0, per_axis - 1)
    flat = np.ravel_multi_index(tuple(idx.T), (per_axis,) * grid.dimension)
    return table[flat]


class TestFunctionFamily:
    __test__ = False  # not a pytest class

    def __init__(self, strategy: FamilyStrategy, grid: ShiftedDyadicGrid, mu: DiscreteMeasure,
                 side: str = "T", part: GridPartition | None = None):
        if side not in SIDES:
            raise ValueError("side must be 'T' or 'T*'")
        self.strategy = strategy
        self.grid = grid
        self.mu = mu
        self.side = side
        self.part = part if part is not None else GridPartition(grid, mu.points)
        self.mass = cube_sums(self.part, mu.weights)
        inside = self.part.inside
        if strategy.kind == "perturbed":
            self.profile = 1.0 + strategy.eta * sign_field(strategy, grid, mu)
        else:
            self.profile = np.ones(mu.n_atoms)
        self.raw = np.where(inside, self.profile, 0.0)
        self._records = strategy.records_for(self.part) if strategy.kind == "custom" else {}
        self.values = [self._generation_values(g) for g in range(self.part.depth + 1)]
        self.norm_sq = np.concatenate([
            cube_sums(self.part, self.values[g] ** 2 * mu.weights)[self.part.gids_at(g)]
            for g in range(self.part.depth + 1)
        ])

    def _generation_values(self, g: int) -> np.ndarray:
        part, w = self.part, self.mu.weights
        lab = part.gid_labels(g)
        vals = self.raw.copy()
        if self.strategy.kind == "custom":
            records = self._records
            for gid in part.gids_at(g):
                rec = records.get((g, tuple(int(i) for i in part.index_table[gid])))
                if rec is None:
                    continue  # cubes absent from the file keep the indicator
                mask = lab == gid
                allowed = set(np.flatnonzero(mask).tolist())
                if not set(rec) <= allowed:
                    raise ValueError(f"custom function for cube {gid} is not supported in it")
                v = np.zeros(mask.sum())
                pos = {a: k for k, a in enumerate(np.flatnonzero(mask))}
                for a, val in rec.items():
                    v[pos[a]] = val
                vals[mask] = v
        integ = cube_sums(part, vals * w)
        means = integ / self.mass
        gids = part.gids_at(g)
        scale_tol = np.sqrt(cube_sums(part, vals**2 * w) / self.mass)
        bad = np.abs(means[gids]) <= 1e-14 * np.maximum(scale_tol[gids], 1e-300)
        if np.any(bad):
            raise NonAccretiveError(f"test function with zero mean on cube {int(gids[bad][0])}")
        denom = spread(part, means, g)
        return np.divide(vals, denom, out=np.zeros_like(vals), where=lab >= 0)

    def b(self, gid: int) -> np.ndarray:
        g = int(self.part.gen[gid])
        return np.where(self.part.atom_mask(gid), self.values[g], 0.0)

    def b_for_box(self, lo, hi) -> np.ndarray:
        """Function the strategy attaches to an arbitrary box (custom files fall back to the indicator)."""
        mask = np.all((self.mu.points >= lo) & (self.mu.points < hi), axis=1)
        vals = np.where(mask, self.profile, 0.0)
        mass = self.mu.weights[mask].sum()
        if mass <= 0:
            return vals
        return vals / (np.dot(vals, self.mu.weights) / mass)

    def side_apply(self, op: DiscretizedOperator, h: np.ndarray) -> np.ndarray:
        return op.apply(h) if self.side == "T" else op.adjoint_apply(h)

    def local_testing(self, op: DiscretizedOperator) -> np.ndarray:
        """``||1_Q S b_Q||^2`` per cube id, S = T or T* by side; uses only the Q-by-Q block."""
        out = np.empty(self.part.n_cubes)
        w = self.mu.weights
        for g in range(self.part.depth + 1):
            lab = self.part.labels[g]
            order = np.argsort(lab, kind="stable")
            order = order[lab[order] >= 0]
            bounds = np.searchsorted(lab[order], np.arange(len(self.part.gids_at(g)) + 1))
            vals = self.values[g]
            for local in range(len(bounds) - 1):
                I = order[bounds[local]:bounds[local + 1]]
                if self.side == "T":
                    img = op.matrix[np.ix_(I, I)] @ vals[I]
                else:
                    img = op.K[np.ix_(I, I)].T @ (w[I] * vals[I])
                out[self.part.offsets[g] + local] = np.sum(img**2 * w[I])
        return out


def make_family(strategy: FamilyStrategy | dict, grid: ShiftedDyadicGrid, mu: DiscreteMeasure,
                side: str = "T", part: GridPartition | None = None) -> TestFunctionFamily:
    if isinstance(strategy, dict):
        strategy = FamilyStrategy.from_config(strategy)
    return TestFunctionFamily(strategy, grid, mu, side, part)


@dataclass
class FamilyConstants:
    A: float
    B: float
    A_per_side: dict
    B_per_side: dict


def constants(fam: TestFunctionFamily, op: DiscretizedOperator,
              other: TestFunctionFamily | None = None) -> FamilyConstants:
    """``A`` and ``B`` as maxima over stored cubes of (summed) normalized squares.

    With two sides, every cube of either grid carries both functions (each family's
    strategy is evaluated on the other grid), and the per-cube sums are maximized.
    """
    if other is None:
        a = float(np.max(fam.norm_sq / fam.mass))
        b = float(np.max(fam.local_testing(op) / fam.mass))
        return FamilyConstants(a, b, {fam.side: a}, {fam.side: b})
    if other.side == fam.side:
        raise ValueError("the two families must be for T and T*")
    a_sum, b_sum = 0.0, 0.0
    a_side = {fam.side: 0.0, other.side: 0.0}
    b_side = {fam.side: 0.0, other.side: 0.0}
    for grid_owner in (fam, other):
        pair = [fam, other]
        on_grid = [f if f.grid == grid_owner.grid else
                   TestFunctionFamily(f.strategy, grid_owner.grid, f.mu, f.side, grid_owner.part)
                   for f in pair]
        mass = grid_owner.mass
        an = [f.norm_sq / mass for f in on_grid]
        bn = [f.local_testing(op) / mass for f in on_grid]
        a_sum = max(a_sum, float(np.max(an[0] + an[1])))
        b_sum = max(b_sum, float(np.max(bn[0] + bn[1])))
        for f, x, y in zip(on_grid, an, bn):
            a_side[f.side] = max(a_side[f.side], float(x.max()))
            b_side[f.side] = max(b_side[f.side], float(y.max()))
    return FamilyConstants(a_sum, b_sum, a_side, b_side)
