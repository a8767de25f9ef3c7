"""Estimator-style wrappers around tree building and the martingale expansion.

Both estimators are fitted on atom positions (rows of ``X``) with optional
``sample_weight`` as the atom masses.  The transformer then maps functions on
those atoms, one function per row, to their per-generation pieces.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .czo import discretize, kernel_from_config
from .geometry import GridPartition, build_grid
from .martingale import expand
from .measure import DiscreteMeasure
from .stopping import build_stopping, check_carleson, check_decay
from .testfns import constants, make_family


class StoppingTreeEstimator(BaseEstimator):
    """Build the stopping tree of a test-function family on a weighted point set.

    Parameters mirror the configuration: the grid is ``build_grid(shift, N, depth, d)``
    and the family strategy is ``family`` with perturbation ``eta``.
    """

    def __init__(self, N: int = 0, depth: int = 6, shift=0.0, kernel: str = "cauchy", family: str = "indicator",
                 eta: float = 0.0, family_seed: int = 0, M_norm: float | None = None):
        self.N = N
        self.depth = depth
        self.shift = shift
        self.kernel = kernel
        self.family = family
        self.eta = eta
        self.family_seed = family_seed
        self.M_norm = M_norm

    def fit(self, X, y=None, sample_weight=None):
        X = check_array(X, dtype=float)
        n, dim = X.shape
        w = np.full(n, 1.0 / n) if sample_weight is None else check_array(sample_weight, ensure_2d=False, dtype=float)
        if w.shape != (n,) or np.any(w <= 0):
            raise ValueError("sample_weight must be positive with one entry per row of X")
        self.measure_ = DiscreteMeasure(X, w, float(dim))
        self.grid_ = build_grid(self.shift, self.N, self.depth, dim)
        part = GridPartition(self.grid_, X)
        self.family_ = make_family({"kind": self.family, "eta": self.eta, "seed": self.family_seed},
                                   self.grid_, self.measure_, part=part)
        self.operator_ = discretize(kernel_from_config({"name": self.kernel}, dim), self.measure_)
        self.constants_ = constants(self.family_, self.operator_)
        self.tree_ = build_stopping(self.family_, self.operator_, self.constants_.A, self.constants_.B,
                                    M_norm=self.M_norm)
        self.n_levels_ = self.tree_.n_levels
        self.decay_ratio_ = check_decay(self.tree_)
        self.carleson_ratio_ = check_carleson(self.tree_)
        self.depth_capped_ = self.tree_.depth_capped
        self.n_features_in_ = dim
        return self

    def apply(self, X):
        """Stopping level of the smallest fitted cube holding each point, -1 outside the root."""
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        part, grid = self.tree_.part, self.grid_
        out = np.full(X.shape[0], -1, dtype=np.int64)
        for i, x in enumerate(X):
            # walk up from the finest cube until one holds a fitted atom
            for g in range(grid.depth, -1, -1):
                Q = grid.cube_at(x, g)
                gid = None if Q is None else part.find(Q)
                if gid is not None:
                    out[i] = int(self.tree_.beta[gid])
                    break
        return out


class MartingaleTransformer(TransformerMixin, BaseEstimator):
    """Per-generation martingale pieces of functions on the fitted atoms.

    ``transform`` maps each row ``f`` to ``[piece_0, ..., piece_{depth-1}, mean term]``
    concatenated (each of length n_atoms); ``inverse_transform`` sums them back.
    Values on atoms outside the root cube are dropped before expanding.
    """

    def __init__(self, N: int = 0, depth: int = 6, shift=0.0, kernel: str = "cauchy", family: str = "indicator",
                 eta: float = 0.0, family_seed: int = 0, M_norm: float | None = None):
        self.N = N
        self.depth = depth
        self.shift = shift
        self.kernel = kernel
        self.family = family
        self.eta = eta
        self.family_seed = family_seed
        self.M_norm = M_norm

    def fit(self, X, y=None, sample_weight=None):
        self.tree_estimator_ = StoppingTreeEstimator(**self.get_params()).fit(X, sample_weight=sample_weight)
        self.n_atoms_ = self.tree_estimator_.measure_.n_atoms
        self.n_features_in_ = self.tree_estimator_.n_features_in_
        return self

    def _values(self, F) -> np.ndarray:
        check_is_fitted(self, "tree_estimator_")
        F = check_array(F, dtype=float)
        if F.shape[1] != self.n_atoms_:
            raise ValueError(f"each row must hold {self.n_atoms_} atom values")
        return F

    def transform(self, F):
        F = self._values(F)
        tree = self.tree_estimator_.tree_
        out = []
        for f in F:
            dec = expand(tree, None, np.where(tree.part.inside, f, 0.0))
            out.append(np.concatenate([dec.generation_piece(g) for g in range(tree.part.depth)]
                                      + [dec.residual_term]))
        return np.asarray(out)

    def inverse_transform(self, Z):
        Z = check_array(Z, dtype=float)
        n = self.n_atoms_
        if Z.shape[1] % n:
            raise ValueError("row length is not a multiple of the atom count")
        return Z.reshape(Z.shape[0], -1, n).sum(axis=1)

    def square_function(self, F) -> np.ndarray:
        """Per row, the square-function norm over the L2 norm of the root part."""
        F = self._values(F)
        w = self.tree_estimator_.measure_.weights
        tree = self.tree_estimator_.tree_
        out = []
        for f in F:
            dec = expand(tree, None, np.where(tree.part.inside, f, 0.0))
            out.append(float(np.sqrt(dec.norms_sq().sum() / max(np.dot(dec.f**2, w), 1e-300))))
        return np.asarray(out)
