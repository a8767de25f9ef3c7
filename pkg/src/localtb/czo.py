"""Singular kernels, their standard estimates, and the atom-discretized operator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import svdvals

from .measure import DiscreteMeasure, as_atom_fn

DENSE_LIMIT = 4096


class DenseLimitError(ValueError):
    """Raised when a dense computation is requested above the configured atom count."""


class CoincidentPointsError(ValueError):
    """Raised when a kernel would be evaluated on the diagonal."""


# evaluator(diff) receives x - y with shape (..., n) and returns K(x, y) with shape (...)
Evaluator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class KernelSpec:
    name: str
    dimension: int
    m: float
    alpha: float
    C: float
    evaluator: Evaluator | None = field(default=None, repr=False, compare=False)
    antisymmetric: bool = False
    size_exponent: float | None = None
    table: np.ndarray | None = field(default=None, repr=False, compare=False)
    scale: float = 1.0

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("homogeneity m must be positive")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("Hölder exponent must lie in (0, 1]")
        if (self.evaluator is None) == (self.table is None):
            raise ValueError("give exactly one of evaluator or table")

    @property
    def size_power(self) -> float:
        return self.m if self.size_exponent is None else self.size_exponent

    def scaled(self, factor: float) -> "KernelSpec":
        return replace(self, scale=self.scale * factor, C=self.C * abs(factor))

    def pairwise(self, mu: DiscreteMeasure) -> np.ndarray:
        """Kernel matrix on the atoms; the diagonal is set to 0."""
        if self.table is not None:
            if self.table.shape != (mu.n_atoms, mu.n_atoms):
                raise ValueError("tabulated kernel does not match the atom count")
            K = np.array(self.table, dtype=float) * self.scale
        else:
            diff = mu.points[:, None, :] - mu.points[None, :, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                K = self.evaluator(diff) * self.scale
        np.fill_diagonal(K, 0.0)
        return K

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.evaluator is None:
            raise TypeError("tabulated kernels are only defined on their atoms")
        diff = np.atleast_2d(x) - np.atleast_2d(y)
        if np.any(np.all(diff == 0, axis=-1)):
            raise CoincidentPointsError("kernel evaluated at coincident points")
        return self.evaluator(diff) * self.scale


def _cauchy(diff):
    return 1.0 / diff[..., 0]


def cauchy_kernel() -> KernelSpec:
    """``1/(x - y)`` on the line; size and smoothness hold with C = 2."""
    return KernelSpec("cauchy", 1, 1.0, 1.0, 2.0, evaluator=_cauchy, antisymmetric=True)


def riesz_kernel(dimension: int, m: float | None = None) -> KernelSpec:
    """First Riesz-type component ``(x - y)_1 / |x - y|^(m+1)``.

    The gradient is at most ``(m+2)/|u|^(m+1)`` and ``|u|`` stays above ``|x-y|/2``
    on the admissible segment, hence ``C = (m+2) 2^(m+1)``.
    """
    m = float(dimension if m is None else m)

    def ev(diff):
        r = np.sqrt(np.sum(diff * diff, axis=-1))
        return diff[..., 0] / r ** (m + 1)

    return KernelSpec("riesz", dimension, m, 1.0, (m + 2) * 2 ** (m + 1), evaluator=ev, antisymmetric=True)


def zero_kernel(dimension: int, m: float) -> KernelSpec:
    return KernelSpec("zero", dimension, float(m), 1.0, 1.0,
                      evaluator=lambda diff: np.zeros(diff.shape[:-1]), antisymmetric=True)


def tabulated_kernel(table: np.ndarray, dimension: int, m: float, alpha: float, C: float) -> KernelSpec:
    t = np.asarray(table, dtype=float)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError("kernel table must be square")
    return KernelSpec("tabulated", dimension, float(m), float(alpha), float(C), table=t,
                      antisymmetric=bool(np.allclose(t, -t.T)))


def write_kernel_table(table: np.ndarray, path) -> None:
    """Little-endian uint64 atom count followed by the row-major binary64 matrix."""
    t = np.ascontiguousarray(table, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", t.shape[0]))
        fh.write(t.tobytes())


def read_kernel_table(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    body = np.frombuffer(raw[8:], dtype="<f8")
    if body.size != n * n:
        raise ValueError(f"kernel table holds {body.size} values, header says {n}x{n}")
    return body.reshape(n, n).astype(float)


def kernel_from_config(cfg: dict, dimension: int) -> KernelSpec:
    name = cfg.get("name", "cauchy")
    if name == "cauchy":
        if dimension != 1:
            raise ValueError("the Cauchy kernel is one-dimensional")
        k = cauchy_kernel()
    elif name == "riesz":
        k = riesz_kernel(dimension, cfg.get("m"))
    elif name == "zero":
        k = zero_kernel(dimension, cfg.get("m", dimension))
    elif name == "tabulated":
        k = tabulated_kernel(read_kernel_table(cfg["path"]), dimension, cfg["m"], cfg["alpha"], cfg["C"])
    else:
        raise ValueError(f"unknown kernel {name!r}")
    if "scale" in cfg:
        k = k.scaled(float(cfg["scale"]))
    if "size_exponent" in cfg:
        k = replace(k, size_exponent=float(cfg["size_exponent"]))
    return k


@dataclass
class StandardnessReport:
    size_ratio: float
    holder_x_ratio: float
    holder_y_ratio: float
    n_triples: int

    @property
    def passed(self) -> bool:
        # sharp configurations hit ratio 1 exactly; allow rounding in the last bits
        return max(self.size_ratio, self.holder_x_ratio, self.holder_y_ratio) <= 1.0 + 1e-12


def _admissible_triples(dist: np.ndarray, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Rows (x, x', y) with x' != x, y != x, x' != y and |x - y| >= 2|x - x'|."""
    n = dist.shape[0]
    out = []
    attempts = 0
    while len(out) < samples and attempts < 50 * samples:
        attempts += 1
        x, y = rng.integers(0, n, 2)
        if x == y:
            continue
        near = np.flatnonzero((dist[x] > 0) & (2 * dist[x] <= dist[x, y]))
        near = near[near != y]
        if near.size == 0:
            continue
        out.append((x, int(rng.choice(near)), y))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def standardness_ratios(K: np.ndarray, dist: np.ndarray, triples: np.ndarray, k: KernelSpec):
    """Size and both smoothness ratios over given (x, x', y) atom triples."""
    if triples.size == 0:
        return 0.0, 0.0, 0.0
    x, xp, y = triples.T
    d = dist[x, y]
    size = np.abs(K[x, y]) * d**k.size_power / k.C
    size = np.maximum(size, np.abs(K[xp, y]) * dist[xp, y] ** k.size_power / k.C)
    scale = d ** (k.m + k.alpha) / (k.C * dist[x, xp] ** k.alpha)
    hx = np.abs(K[x, y] - K[xp, y]) * scale
    # the y-variant reuses the triple with the roles of the two arguments swapped
    hy = np.abs(K[y, x] - K[y, xp]) * scale
    return float(size.max()), float(hx.max()), float(hy.max())


def verify_standard(k: KernelSpec, mu: DiscreteMeasure, samples: int, seed: int = 0) -> StandardnessReport:
    if samples < 1:
        raise ValueError("samples must be >= 1")
    K = k.pairwise(mu)
    if not np.all(np.isfinite(K)):
        raise CoincidentPointsError("kernel is not finite on distinct atoms")
    dist = mu.distances
    triples = _admissible_triples(dist, samples, np.random.default_rng(seed))
    s, hx, hy = standardness_ratios(K, dist, triples, k)
    return StandardnessReport(s, hx, hy, len(triples))


class DiscretizedOperator:
    """``(T f)(x_i) = sum_{j != i} K(x_i, x_j) f(x_j) w_j`` on the atoms of a measure."""

    def __init__(self, kernel: KernelSpec, mu: DiscreteMeasure, dense_limit: int = DENSE_LIMIT):
        if mu.n_atoms > dense_limit:
            raise DenseLimitError(f"{mu.n_atoms} atoms exceed the dense limit {dense_limit}")
        self.kernel = kernel
        self.mu = mu
        self.K = kernel.pairwise(mu)
        self.matrix = self.K * mu.weights[None, :]
        self.K.setflags(write=False)
        self.matrix.setflags(write=False)
        self._norm = None

    @classmethod
    def from_matrix(cls, K: np.ndarray, mu: DiscreteMeasure) -> "DiscretizedOperator":
        return cls(tabulated_kernel(K, mu.dimension, mu.m, 1.0, 1.0), mu)

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)

    def adjoint_apply(self, g) -> np.ndarray:
        return self.K.T @ (self.mu.weights * np.asarray(g, dtype=float))

    def pair(self, f, g) -> float:
        return float(np.dot(self.apply(as_atom_fn(self.mu, f)) * self.mu.weights, as_atom_fn(self.mu, g)))

    def op_norm(self) -> float:
        if self._norm is None:
            sw = np.sqrt(self.mu.weights)
            sym = sw[:, None] * self.K * sw[None, :]
            self._norm = float(svdvals(sym, check_finite=False)[0]) if sym.size else 0.0
        return self._norm


def discretize(k: KernelSpec, mu: DiscreteMeasure, dense_limit: int = DENSE_LIMIT) -> DiscretizedOperator:
    return DiscretizedOperator(k, mu, dense_limit)


def op_norm(op: DiscretizedOperator) -> float:
    """Largest singular value of ``W^(1/2) T W^(-1/2)``, the L2(mu) operator norm."""
    return op.op_norm()


def pair(op: DiscretizedOperator, f, g) -> float:
    return op.pair(f, g)


def apply(op: DiscretizedOperator, f) -> np.ndarray:
    return op.apply(f)


def adjoint_apply(op: DiscretizedOperator, g) -> np.ndarray:
    return op.adjoint_apply(g)


__all__ = [
    "KernelSpec", "DiscretizedOperator", "StandardnessReport", "DenseLimitError",
    "CoincidentPointsError", "cauchy_kernel", "riesz_kernel", "zero_kernel", "tabulated_kernel",
    "kernel_from_config", "verify_standard", "discretize", "op_norm", "pair", "apply",
    "adjoint_apply", "write_kernel_table", "read_kernel_table", "standardness_ratios",
]
