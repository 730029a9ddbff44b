"""Quadtree interaction graph with O(N) nodes and edges.

Space is split into a uniform grid per level: kept level ``l`` (1 = coarsest
kept) has ``2**(l+1)`` cells per side, and the particles sit below the
finest level ``depth - 1``. Cells at the same level interact through
near-neighbour edges: not adjacent themselves, but with adjacent parents.
Particles interact directly with particles in the same or an adjacent
finest cell. Every particle pair is therefore covered exactly once, either
by a particle edge or by one cell-cell edge between its ancestors.

Cell arrays are stored per level (index 0 is level 1) and are sorted by
grid key ``ix * grid + iy``, which makes construction deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .sim import ParticleSystem, min_image, wrap


@dataclass
class Cell:
    id: int
    level: int
    grid_index: tuple[int, int]
    total_mass: float
    com_position: np.ndarray
    com_velocity: np.ndarray
    total_charge: Optional[float]
    child_ids: list[int]
    children_are_particles: bool
    parent_id: Optional[int]


@dataclass
class CellLevel:
    level: int
    grid: int
    ix: np.ndarray
    iy: np.ndarray
    parent: np.ndarray  # index into the level above, -1 on the top kept level
    total_mass: np.ndarray
    com_position: np.ndarray
    com_velocity: np.ndarray
    total_charge: Optional[np.ndarray]
    near_senders: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    near_receivers: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return self.ix.shape[0]

    @property
    def centres(self) -> np.ndarray:
        """Geometric centres in units of the cell size (multiply by box / grid)."""
        return np.stack([self.ix + 0.5, self.iy + 0.5], axis=1)


@dataclass
class HierGraph:
    depth: int
    periodic: bool
    box: float
    levels: list[CellLevel]
    particle_cell: np.ndarray
    particle_senders: np.ndarray
    particle_receivers: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.particle_cell.shape[0]

    @property
    def n_cells(self) -> int:
        return sum(len(lv) for lv in self.levels)

    @property
    def n_nodes(self) -> int:
        return self.n_cells + self.n_particles

    @property
    def level_offsets(self) -> list[int]:
        """Global id of the first cell of each level."""
        return [int(x) for x in np.cumsum([0] + [len(lv) for lv in self.levels[:-1]])]

    @property
    def near_edges_by_level(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(lv.near_senders, lv.near_receivers) for lv in self.levels]

    @property
    def particle_edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.particle_senders, self.particle_receivers

    @property
    def parent_child_edges(self) -> list[tuple[int, int, str]]:
        """(parent cell id, child id, child kind) with global cell ids."""
        offsets = self.level_offsets
        edges = []
        for li in range(1, len(self.levels)):
            for c, p in enumerate(self.levels[li].parent):
                edges.append((offsets[li - 1] + int(p), offsets[li] + c, "cell"))
        for i, c in enumerate(self.particle_cell):
            edges.append((offsets[-1] + int(c), i, "particle"))
        return edges

    def ancestors(self, level: int) -> np.ndarray:
        """Index of each particle's cell at kept level `level` (1-based)."""
        anc = self.particle_cell
        for li in range(len(self.levels) - 1, level - 1, -1):
            anc = self.levels[li].parent[anc]
        return anc

    def children(self, li: int) -> list[list[int]]:
        """Child indices (cells of level li+1, or particles for the finest level)."""
        below = self.particle_cell if li == len(self.levels) - 1 else self.levels[li + 1].parent
        out: list[list[int]] = [[] for _ in range(len(self.levels[li]))]
        for child, parent in enumerate(below):
            out[parent].append(child)
        return out

    @property
    def cells_by_level(self) -> list[list[Cell]]:
        offsets = self.level_offsets
        result = []
        for li, lv in enumerate(self.levels):
            kids = self.children(li)
            finest = li == len(self.levels) - 1
            cells = []
            for c in range(len(lv)):
                child_ids = kids[c] if finest else [offsets[li + 1] + k for k in kids[c]]
                cells.append(
                    Cell(
                        id=offsets[li] + c,
                        level=lv.level,
                        grid_index=(int(lv.ix[c]), int(lv.iy[c])),
                        total_mass=float(lv.total_mass[c]),
                        com_position=lv.com_position[c].copy(),
                        com_velocity=lv.com_velocity[c].copy(),
                        total_charge=None if lv.total_charge is None else float(lv.total_charge[c]),
                        child_ids=child_ids,
                        children_are_particles=finest,
                        parent_id=None if li == 0 else offsets[li - 1] + int(lv.parent[c]),
                    )
                )
            result.append(cells)
        return result

    def edge_counts(self) -> dict[str, int]:
        near = int(sum(lv.near_senders.shape[0] for lv in self.levels))
        parent_child = int(sum(len(lv) for lv in self.levels[1:]) + self.n_particles)
        particle = int(self.particle_senders.shape[0])
        return {
            "near": near,
            "parent_child": parent_child,
            "particle": particle,
            "total": near + parent_child + particle,
        }


def choose_depth(N: int) -> int:
    """Nearest integer to log4(N), at least 2 (halves round up)."""
    if N < 1:
        raise InvalidInputError("N must be at least 1")
    return max(2, int(math.floor(math.log2(N) / 2.0 + 0.5)))


def adaptive_depth(sys: ParticleSystem, kmax: int = 1, max_depth: int = 12) -> int:
    """Shallowest uniform depth whose finest cells hold at most `kmax` particles."""
    if kmax < 1:
        raise InvalidInputError("kmax must be at least 1")
    for depth in range(2, max_depth + 1):
        cells = _cell_coords(_checked_positions(sys), sys.box, 1 << depth)
        _, counts = np.unique(cells[:, 0] * (1 << depth) + cells[:, 1], return_counts=True)
        if counts.size == 0 or counts.max() <= kmax:
            return depth
    return max_depth


def _checked_positions(sys: ParticleSystem) -> np.ndarray:
    pos = np.array(sys.positions, dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise InvalidInputError("non-finite particle positions")
    pos[pos == sys.box] = 0.0
    if np.any(pos < 0) or np.any(pos >= sys.box):
        raise InvalidInputError("particle outside [0, L)^2")
    return pos


def _cell_coords(pos: np.ndarray, box: float, grid: int) -> np.ndarray:
    return np.clip(np.floor(pos * (grid / box)).astype(np.int64), 0, grid - 1)


def _lookup(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index of each query key in sorted `keys`, -1 if absent."""
    idx = np.searchsorted(keys, query)
    idx = np.minimum(idx, max(keys.shape[0] - 1, 0))
    found = keys.shape[0] > 0
    return np.where(found & (keys[idx] == query), idx, -1) if found else np.full(query.shape, -1)


def _grid_distance(a: np.ndarray, b: np.ndarray, grid: int, periodic: bool) -> np.ndarray:
    d = np.abs(a - b)
    return np.minimum(d, grid - d) if periodic else d


def _summaries(centre, member, weight_pos, masses, velocities, charges, box, periodic, n_cells):
    """Mass-weighted COM position/velocity of groups, unwrapped around `centre`."""
    total = np.bincount(member, weights=masses, minlength=n_cells)
    offset = weight_pos - centre[member]
    if periodic:
        offset = min_image(offset, box)
    com = np.stack([np.bincount(member, masses * offset[:, k], n_cells) for k in range(2)], axis=1)
    com = centre + com / total[:, None]
    if periodic:
        com = wrap(com, box)
    vel = np.stack([np.bincount(member, masses * velocities[:, k], n_cells) for k in range(2)], axis=1)
    vel = vel / total[:, None]
    charge = None if charges is None else np.bincount(member, weights=charges, minlength=n_cells)
    return total, com, vel, charge


def _near_neighbours(lv: CellLevel, keys: np.ndarray, periodic: bool) -> tuple[np.ndarray, np.ndarray]:
    n = lv.grid
    ix, iy = lv.ix, lv.iy
    offs = np.arange(-3, 4)
    dx, dy = np.meshgrid(offs, offs, indexing="ij")
    dx, dy = dx.ravel(), dy.ravel()
    # children of the parent's 3x3 block span [2(p-1), 2(p+1)+1] per axis
    ok_x = (ix[:, None] + dx[None, :] >= 2 * (ix[:, None] // 2) - 2) & (ix[:, None] + dx[None, :] <= 2 * (ix[:, None] // 2) + 3)
    ok_y = (iy[:, None] + dy[None, :] >= 2 * (iy[:, None] // 2) - 2) & (iy[:, None] + dy[None, :] <= 2 * (iy[:, None] // 2) + 3)
    recv, which = np.nonzero(ok_x & ok_y)
    tx = ix[recv] + dx[which]
    ty = iy[recv] + dy[which]
    if periodic:
        tx, ty = tx % n, ty % n
    else:
        inside = (tx >= 0) & (tx < n) & (ty >= 0) & (ty < n)
        recv, tx, ty = recv[inside], tx[inside], ty[inside]
    far = np.maximum(_grid_distance(tx, ix[recv], n, periodic), _grid_distance(ty, iy[recv], n, periodic)) > 1
    recv, tx, ty = recv[far], tx[far], ty[far]
    send = _lookup(keys, tx * n + ty)
    keep = send >= 0
    recv, send = recv[keep], send[keep]
    # small periodic grids alias several offsets onto one cell
    pair = np.unique(recv * len(lv) + send)
    return pair % len(lv), pair // len(lv)


def _particle_pairs(cell_of: np.ndarray, fine: CellLevel, keys: np.ndarray, periodic: bool):
    n = fine.grid
    n_cells = len(fine)
    order = np.argsort(cell_of, kind="stable")
    counts = np.bincount(cell_of, minlength=n_cells)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])

    offs = np.array([-1, 0, 1])
    dx, dy = np.meshgrid(offs, offs, indexing="ij")
    tx = fine.ix[:, None] + dx.ravel()[None, :]
    ty = fine.iy[:, None] + dy.ravel()[None, :]
    if periodic:
        tx, ty = tx % n, ty % n
        valid = np.ones(tx.shape, dtype=bool)
    else:
        valid = (tx >= 0) & (tx < n) & (ty >= 0) & (ty < n)
    nb = np.where(valid, _lookup(keys, tx * n + ty), -1)
    cell_idx, slot = np.nonzero(nb >= 0)
    cell_pair_nb = nb[cell_idx, slot]
    # dedupe neighbour cells (only matters on tiny periodic grids)
    uniq = np.unique(cell_idx * n_cells + cell_pair_nb)
    cell_idx, cell_pair_nb = uniq // n_cells, uniq % n_cells

    # expand (receiver particle, neighbour cell) -> (receiver, sender particle)
    per_cell_nbs = np.bincount(cell_idx, minlength=n_cells)
    nb_start = np.concatenate([[0], np.cumsum(per_cell_nbs)[:-1]])
    recv_p = np.repeat(np.arange(cell_of.shape[0]), per_cell_nbs[cell_of])
    local = np.arange(recv_p.shape[0]) - np.repeat(np.cumsum(per_cell_nbs[cell_of]) - per_cell_nbs[cell_of], per_cell_nbs[cell_of])
    nb_cells = cell_pair_nb[nb_start[cell_of[recv_p]] + local]
    k = counts[nb_cells]
    receivers = np.repeat(recv_p, k)
    pos_in = np.arange(receivers.shape[0]) - np.repeat(np.cumsum(k) - k, k)
    senders = order[np.repeat(start[nb_cells], k) + pos_in]
    keep = senders != receivers
    receivers, senders = receivers[keep], senders[keep]
    idx = np.lexsort((senders, receivers))
    return senders[idx], receivers[idx]


def build_hier_graph(sys: ParticleSystem, depth: int, periodic: bool = True) -> HierGraph:
    """Quadtree interaction graph of `sys` with `depth - 1` kept cell levels."""
    if depth < 2:
        raise InvalidInputError("depth must be at least 2")
    pos = _checked_positions(sys)
    box = sys.box
    N = len(sys)
    masses = sys.masses

    levels_rev: list[CellLevel] = []
    keys_rev: list[np.ndarray] = []
    member = None  # child -> cell index, for the level being built
    child_pos, child_vel, child_mass, child_charge = pos, sys.velocities, masses, sys.charges
    for level in range(depth - 1, 0, -1):
        grid = 1 << (level + 1)
        if level == depth - 1:
            coords = _cell_coords(pos, box, grid)
        else:
            below = levels_rev[-1]
            coords = np.stack([below.ix // 2, below.iy // 2], axis=1)
        keys, member = np.unique(coords[:, 0] * grid + coords[:, 1], return_inverse=True)
        member = member.reshape(-1)
        ix, iy = keys // grid, keys % grid
        n_cells = keys.shape[0]
        centre = np.stack([ix + 0.5, iy + 0.5], axis=1) * (box / grid)
        total, com, vel, charge = _summaries(
            centre, member, child_pos, child_mass, child_vel, child_charge, box, periodic, n_cells
        )
        if levels_rev:
            levels_rev[-1].parent = member
        else:
            particle_cell = member
        levels_rev.append(
            CellLevel(level, grid, ix, iy, np.full(n_cells, -1, np.int64), total, com, vel, charge)
        )
        keys_rev.append(keys)
        child_pos, child_vel, child_mass, child_charge = com, vel, total, charge

    levels = levels_rev[::-1]
    keys_all = keys_rev[::-1]
    for lv, keys in zip(levels, keys_all):
        lv.near_senders, lv.near_receivers = _near_neighbours(lv, keys, periodic)
    if N:
        senders, receivers = _particle_pairs(particle_cell, levels[-1], keys_all[-1], periodic)
    else:
        particle_cell = np.zeros(0, np.int64)
        senders = receivers = np.zeros(0, np.int64)
    return HierGraph(depth, periodic, box, levels, particle_cell, senders, receivers)


@dataclass
class CoverageReport:
    n_pairs: int
    # (i, j, times j->i is covered, times i->j is covered) for i < j
    violations: list[tuple[int, int, int, int]]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return f"{len(self.violations)} violations over {self.n_pairs} pairs"


def coverage_matrix(g: HierGraph) -> np.ndarray:
    """cov[i, j] = number of routes by which particle j reaches particle i."""
    N = g.n_particles
    cov = np.zeros((N, N), dtype=np.int32)
    np.add.at(cov, (g.particle_receivers, g.particle_senders), 1)
    for li, lv in enumerate(g.levels):
        near = np.zeros((len(lv), len(lv)), dtype=np.int32)
        np.add.at(near, (lv.near_receivers, lv.near_senders), 1)
        anc = g.ancestors(li + 1)
        cov += near[anc[:, None], anc[None, :]]
    return cov


def interaction_coverage_check(g: HierGraph) -> CoverageReport:
    """Exhaustively count, for every particle pair, how often it is covered."""
    cov = coverage_matrix(g)
    i, j = np.triu_indices(g.n_particles, 1)
    bad = (cov[i, j] != 1) | (cov[j, i] != 1)
    violations = [(int(a), int(b), int(cov[a, b]), int(cov[b, a])) for a, b in zip(i[bad], j[bad])]
    return CoverageReport(int(i.shape[0]), violations)


def pairwise_min_image_distances(positions: np.ndarray, box: float, periodic: bool = True) -> np.ndarray:
    d = positions[:, None, :] - positions[None, :, :]
    if periodic:
        d = min_image(d, box)
    return np.einsum("ijk,ijk->ij", d, d)


def knn_graph(sys: ParticleSystem, k: int, periodic: bool = True, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Edges j -> i from each particle's k nearest neighbours (ties by index)."""
    N = len(sys)
    if not 0 < k < N:
        raise InvalidInputError(f"k must satisfy 0 < k < N, got k={k}, N={N}")
    pos = sys.positions
    senders = np.empty((N, k), dtype=np.int64)
    for lo in range(0, N, chunk):
        rows = np.arange(lo, min(lo + chunk, N))
        d = pos[rows, None, :] - pos[None, :, :]
        if periodic:
            d = min_image(d, sys.box)
        dist = np.einsum("ijk,ijk->ij", d, d)
        dist[np.arange(rows.shape[0]), rows] = np.inf
        senders[rows] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    receivers = np.repeat(np.arange(N), k)
    return senders.reshape(-1), receivers


def full_graph(N: int) -> tuple[np.ndarray, np.ndarray]:
    """All N(N-1) directed edges, grouped by receiver."""
    if N < 1:
        raise InvalidInputError("N must be at least 1")
    receivers, senders = np.nonzero(~np.eye(N, dtype=bool))
    return senders.astype(np.int64), receivers.astype(np.int64)


def graph_to_dict(g: HierGraph) -> dict:
    """JSON-ready dump of a hierarchy (debugging and tests)."""
    offsets = g.level_offsets
    levels = []
    for li, lv in enumerate(g.levels):
        cells = []
        for c in range(len(lv)):
            cell = {
                "id": offsets[li] + c,
                "grid_index": [int(lv.ix[c]), int(lv.iy[c])],
                "parent": None if li == 0 else offsets[li - 1] + int(lv.parent[c]),
                "total_mass": float(lv.total_mass[c]),
                "com_position": lv.com_position[c].tolist(),
                "com_velocity": lv.com_velocity[c].tolist(),
            }
            if lv.total_charge is not None:
                cell["total_charge"] = float(lv.total_charge[c])
            cells.append(cell)
        levels.append(
            {
                "level": lv.level,
                "grid": lv.grid,
                "cells": cells,
                "near_edges": [
                    (offsets[li] + lv.near_senders).tolist(),
                    (offsets[li] + lv.near_receivers).tolist(),
                ],
            }
        )
    return {
        "depth": g.depth,
        "periodic": g.periodic,
        "box": g.box,
        "n_particles": g.n_particles,
        "levels": levels,
        "particle_cell": (offsets[-1] + g.particle_cell).tolist(),
        "particle_edges": [g.particle_senders.tolist(), g.particle_receivers.tolist()],
        "edge_counts": g.edge_counts(),
    }
