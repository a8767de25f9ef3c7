"""Seeded instances for the batteries: measure, grid, test functions, operator and tree."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .czo import DiscretizedOperator, cauchy_kernel, discretize, riesz_kernel
from .geometry import GridPartition, ShiftedDyadicGrid, build_grid
from .measure import DiscreteMeasure, uniform_measure
from .stopping import StoppingTree, build_stopping
from .testfns import FamilyConstants, FamilyStrategy, TestFunctionFamily, constants, make_family, random_custom_records


def jittered_mesh(seed: int, n_per_side: int, dimension: int = 1, jitter: float = 0.3,
                  weight_range=(0.05, 2.0), density_cells: int | None = 16,
                  half_width: float = 1.0) -> DiscreteMeasure:
    """Mesh on [-half_width, half_width)^n with each atom moved by up to ``jitter`` spacings.

    Atoms stay at least ``(1 - 2 jitter)`` spacings apart, which keeps kernel
    blocks bounded.  Weights are a random density times the cell volume; the
    density is constant on ``density_cells`` cells per axis (so refining the mesh
    samples the same measure) or drawn per atom when ``density_cells`` is None.
    """
    if not 0 <= jitter < 0.5:
        raise ValueError("jitter must lie in [0, 1/2)")
    rng = np.random.default_rng(seed)
    base = uniform_measure(n_per_side, -half_width, half_width, dimension)
    h = base.r_min
    pts = base.points + rng.uniform(-jitter * h, jitter * h, base.points.shape)
    if density_cells is None:
        dens = rng.uniform(*weight_range, base.n_atoms)
    else:
        table = np.random.default_rng([seed, density_cells]).uniform(*weight_range, density_cells**dimension)
        cell = np.clip(np.floor((base.points + half_width) / (2.0 * half_width) * density_cells).astype(np.int64), 0, density_cells - 1)
        dens = table[np.ravel_multi_index(tuple(cell.T), (density_cells,) * dimension)]
    return DiscreteMeasure(pts, dens * h**dimension, float(dimension), r_min=h)


@dataclass(frozen=True)
class InstanceSpec:
    seed: int
    dimension: int = 1
    depth: int = 6
    atoms_per_side: int = 64
    family: str = "custom"  # custom | perturbed | indicator
    kernel: str = "cauchy"  # cauchy | riesz
    amplitude: float = 1.0  # custom family: b = 1 + amplitude * xi
    resolution: int | None = 2  # custom family: xi constant on subcells this many generations down
    eta: float = 0.5  # perturbed family

    def label(self) -> str:
        return ";".join(f"{k}={v}" for k, v in asdict(self).items() if k != "seed")


@dataclass
class Instance:
    spec: InstanceSpec
    mu: DiscreteMeasure
    grid: ShiftedDyadicGrid
    part: GridPartition
    family: TestFunctionFamily
    op: DiscretizedOperator
    constants: FamilyConstants
    tree: StoppingTree


def build_instance(spec: InstanceSpec, M_norm: float | None = None) -> Instance:
    mu = jittered_mesh(spec.seed, spec.atoms_per_side, spec.dimension)
    grid = build_grid(0.0, 0, spec.depth, spec.dimension)
    part = GridPartition(grid, mu.points)
    if spec.family == "custom":
        recs = random_custom_records(part, spec.amplitude, spec.seed, spec.resolution, mu.points)
        fam = TestFunctionFamily(FamilyStrategy("custom", records=recs), grid, mu, "T", part)
    elif spec.family == "perturbed":
        fam = make_family({"kind": "perturbed", "eta": spec.eta, "seed": spec.seed,
                           "signs_resolution": spec.depth}, grid, mu, part=part)
    elif spec.family == "indicator":
        fam = make_family({"kind": "indicator"}, grid, mu, part=part)
    else:
        raise ValueError(f"unknown family {spec.family!r}")
    if spec.kernel == "cauchy":
        k = cauchy_kernel()
    elif spec.kernel == "riesz":
        k = riesz_kernel(spec.dimension)
    else:
        raise ValueError(f"unknown kernel {spec.kernel!r}")
    op = discretize(k, mu)
    c = constants(fam, op)
    tree = build_stopping(fam, op, c.A, c.B, M_norm=M_norm)
    return Instance(spec, mu, grid, part, fam, op, c, tree)
