"""Stopping-time trees driven by averages, maximal functions and testing of b_F."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .czo import DiscretizedOperator
from .geometry import Cube
from .measure import centred_maximal, cube_sums, lp_norm, maximal_op_norm
from .testfns import TestFunctionFamily

TRIGGERS = ("avg", "maximal", "testing")


@dataclass
class StoppingTree:
    family: TestFunctionFamily
    A: float
    B: float
    M_norm: float
    stop_gids: np.ndarray  # in creation order, root first
    stop_level: np.ndarray  # j with F in F^j
    stop_parent: np.ndarray  # enclosing stopping cube (-1 for the root)
    triggers: list  # per stopping cube, the conditions that held
    anc: np.ndarray  # per cube id: id of the minimal stopping cube containing it
    beta: np.ndarray  # per cube id: stopping level of anc
    depth_capped: bool
    M_norm_history: list = field(default_factory=list)

    @property
    def part(self):
        return self.family.part

    @property
    def tau(self) -> float:
        return 1.0 - 1.0 / (8.0 * self.A)

    @property
    def root(self) -> int:
        return int(self.stop_gids[0])

    @property
    def n_levels(self) -> int:
        return int(self.stop_level.max()) + 1

    def is_stopping(self) -> np.ndarray:
        mask = np.zeros(self.part.n_cubes, bool)
        mask[self.stop_gids] = True
        return mask

    def level(self, j: int) -> np.ndarray:
        return self.stop_gids[self.stop_level == j]

    def children_of(self, F: int) -> np.ndarray:
        return self.stop_gids[self.stop_parent == F]

    def anc_atoms(self, g: int) -> np.ndarray:
        """Per atom: stopping ancestor of its generation-g cube (-1 outside the root)."""
        lab = self.part.gid_labels(g)
        return np.where(lab >= 0, self.anc[np.maximum(lab, 0)], -1)


def _scan(fam: TestFunctionFamily, op: DiscretizedOperator, F: int, thresholds) -> tuple[list, list, float]:
    """Maximal strict subcubes of F violating a condition against b_F, coarse to fine."""
    part, mu = fam.part, fam.mu
    w = mu.weights
    gF = int(part.gen[F])
    inF = part.atom_mask(F)
    idx = np.flatnonzero(inF)
    b = fam.b(F)
    Mb_full = centred_maximal(mu, b)
    ratio = lp_norm(mu, Mb_full, 2) / lp_norm(mu, b, 2)
    mb2 = np.zeros(mu.n_atoms)
    mb2[idx] = Mb_full[idx] ** 2
    if fam.side == "T":
        img = op.matrix[np.ix_(idx, idx)] @ b[idx]
    else:
        img = op.K[np.ix_(idx, idx)].T @ (w[idx] * b[idx])
    tb2 = np.zeros(mu.n_atoms)
    tb2[idx] = img**2
    half, max_thr, test_thr = thresholds
    blocked = ~inF
    found, why = [], []
    for g in range(gF + 1, part.depth + 1):
        lab = part.gid_labels(g)
        sel = ~blocked & (lab >= 0)
        if not sel.any():
            break
        gids = np.unique(lab[sel])
        mass = cube_sums(part, w * sel)[gids]
        avg_b = cube_sums(part, b * w * sel)[gids] / mass
        avg_m = cube_sums(part, mb2 * w * sel)[gids] / mass
        avg_t = cube_sums(part, tb2 * w * sel)[gids] / mass
        conds = np.stack([np.abs(avg_b) < half, avg_m > max_thr, avg_t > test_thr], axis=1)
        hit = conds.any(axis=1)
        for k in np.flatnonzero(hit):
            found.append(int(gids[k]))
            why.append([t for t, c in zip(TRIGGERS, conds[k]) if c])
        if hit.any():
            blocked |= np.isin(lab, gids[hit])
    return found, why, ratio


def build_stopping(fam: TestFunctionFamily, op: DiscretizedOperator, A: float, B: float,
                   M_norm: float | None = None, max_restarts: int = 20) -> StoppingTree:
    """Stopping tree of ``fam`` with thresholds 1/2, 16 A^2 ||M||^2 and 16 A B.

    ``||M||`` must dominate ``||M b_F|| / ||b_F||`` for every stopping cube F used;
    when a scan finds a larger ratio the estimate is raised to it and the tree rebuilt.
    """
    part = fam.part
    if part.n_cubes == 0:
        raise ValueError("no atoms inside the root cube")
    if M_norm is None:
        M_norm = maximal_op_norm(fam.mu).value
    history = [M_norm]
    for _ in range(max_restarts):
        thresholds = (0.5, 16.0 * A * A * M_norm * M_norm, 16.0 * A * B)
        gids, levels, parents, triggers = [0], [0], [-1], [[]]
        worst = 0.0
        head = 0
        while head < len(gids):
            F = gids[head]
            found, why, ratio = _scan(fam, op, F, thresholds)
            worst = max(worst, ratio)
            gids.extend(found)
            levels.extend([levels[head] + 1] * len(found))
            parents.extend([F] * len(found))
            triggers.extend(why)
            head += 1
        if worst <= M_norm:
            break
        M_norm = worst
        history.append(M_norm)
    else:
        raise RuntimeError("maximal-norm estimate did not stabilize")
    gids = np.asarray(gids, dtype=np.int64)
    levels = np.asarray(levels, dtype=np.int64)
    anc = np.full(part.n_cubes, -1, dtype=np.int64)
    is_stop = np.zeros(part.n_cubes, bool)
    is_stop[gids] = True
    level_of = np.zeros(part.n_cubes, dtype=np.int64)
    level_of[gids] = levels
    for g in range(part.depth + 1):
        ids = part.gids_at(g)
        inherited = anc[np.maximum(part.parent[ids], 0)] if g > 0 else ids
        anc[ids] = np.where(is_stop[ids], ids, inherited)
    finest = part.gids_at(part.depth)
    capped = bool(np.any(part.atom_count[finest] >= 2))
    return StoppingTree(fam, A, B, M_norm, gids, levels, np.asarray(parents, dtype=np.int64),
                        triggers, anc, level_of[anc], capped, history)


def check_decay(tree: StoppingTree) -> float:
    """Largest next-generation mass fraction ``sum mu(S) / mu(F)`` over stopping cubes F."""
    mass = tree.family.mass
    best = 0.0
    for F in tree.stop_gids:
        kids = tree.children_of(int(F))
        if kids.size:
            best = max(best, float(mass[kids].sum() / mass[F]))
    return best


def check_carleson(tree: StoppingTree) -> float:
    """``sup_Q sum_{F in tree, F inside Q} mu(F) / mu(Q)`` over positive-mass cubes."""
    part = tree.part
    mass = tree.family.mass
    acc = np.where(tree.is_stopping(), mass, 0.0)
    for g in range(part.depth, 0, -1):
        ids = part.gids_at(g)
        np.add.at(acc, part.parent[ids], acc[ids])
    return float(np.max(acc / mass))


def ancestor(tree: StoppingTree, Q: Cube) -> Cube:
    return tree.part.cube(int(tree.anc[_gid(tree, Q)]))


def beta(tree: StoppingTree, Q: Cube) -> int:
    return int(tree.beta[_gid(tree, Q)])


def _gid(tree: StoppingTree, Q: Cube) -> int:
    if Q.grid != tree.family.grid or Q.generation > tree.part.depth:
        raise ValueError("cube is not in the tree's grid")
    if any(i < 0 or i >= 2**Q.generation for i in Q.index):
        raise ValueError("cube lies outside the root")
    gid = tree.part.find(Q)
    if gid is None:
        raise ValueError("cube has zero mass")
    return gid


def dump_tree(tree: StoppingTree, path) -> None:
    """Per generation: cube id, lattice position, enclosing stopping cube and triggers."""
    part = tree.part
    gens = []
    for j in range(tree.n_levels):
        rows = []
        for k in np.flatnonzero(tree.stop_level == j):
            gid = int(tree.stop_gids[k])
            rows.append({
                "cube": gid,
                "generation": int(part.gen[gid]),
                "index": [int(i) for i in part.index_table[gid]],
                "parent": int(tree.stop_parent[k]),
                "trigger": tree.triggers[k],
            })
        gens.append(rows)
    doc = {"side": tree.family.side, "A": tree.A, "B": tree.B, "M_norm": tree.M_norm,
           "depth_capped": tree.depth_capped, "generations": gens}
    Path(path).write_text(json.dumps(doc, indent=1))
