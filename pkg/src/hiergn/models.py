"""DeltaGN and HOGN, each with a full/k-NN particle graph or the hierarchy.

A model sees a batch as a frozen `Topology` (who talks to whom, masses,
charges, cell membership) plus the live phase-space state. Relative
positions, cell centres of mass and cell velocities are recomputed from the
live state on every call, so HOGN's Hamiltonian is a differentiable function
of (q, p) even through the hierarchy, and RK4 stages can reuse one topology.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import hierarchy as hier
from .errors import InvalidInputError
from .gn import (
    DTYPE,
    EDGE_WIDTHS,
    GLOBAL_WIDTHS,
    NODE_WIDTHS,
    GraphData,
    Mlp,
    broadcast_globals,
    edge_block,
    global_block,
    gradients,
    chunked_incoming,
    node_block,
    node_update,
    scatter_sum,
)
from .sim import ParticleSystem

UP_WIDTHS = (100, 100)
DOWN_WIDTHS = (150, 150)
CELL_WIDTHS = (100, 100, 100)
CELL_PARTICLE_WIDTHS = (150, 150)

REL_DIM = 3  # displacement vector plus its length


# --------------------------------------------------------------------------
# graph specs and topologies


@dataclass(frozen=True)
class GraphSpec:
    """Which particle graph a model runs on.

    kind is "full", "knn" (uses k) or "hier" (uses depth; None means
    `choose_depth(N)`).
    """

    kind: str = "full"
    k: int = 8
    depth: Optional[int] = None
    periodic: bool = True

    def __post_init__(self):
        if self.kind not in ("full", "knn", "hier"):
            raise InvalidInputError(f"unknown graph kind {self.kind!r}")
        if self.kind == "hier" and self.depth is not None and self.depth < 2:
            raise InvalidInputError("hierarchy depth must be at least 2")

    def depth_for(self, n: int) -> int:
        return hier.choose_depth(n) if self.depth is None else self.depth

    def __str__(self) -> str:
        if self.kind == "knn":
            return f"knn:{self.k}"
        if self.kind == "hier":
            text = "hier" if self.depth is None else f"hier:{self.depth}"
            return text if self.periodic else text + ":open"
        return "full"

    @classmethod
    def parse(cls, text: str) -> "GraphSpec":
        parts = text.split(":")
        if parts[0] == "full" and len(parts) == 1:
            return cls("full")
        if parts[0] == "knn" and len(parts) == 2:
            return cls("knn", k=int(parts[1]))
        if parts[0] == "hier":
            periodic = not (parts[-1] == "open")
            rest = [p for p in parts[1:] if p != "open"]
            depth = int(rest[0]) if rest and rest[0] not in ("", "auto") else None
            return cls("hier", depth=depth, periodic=periodic)
        raise InvalidInputError(f"cannot parse graph spec {text!r}")


@dataclass
class SampleTopology:
    """Numpy topology of one system (cheap to cache and to collate)."""

    masses: np.ndarray
    charges: Optional[np.ndarray]
    box: float
    senders: np.ndarray
    receivers: np.ndarray
    # hierarchy, coarsest level first
    cell_centres: list = field(default_factory=list)
    cell_parents: list = field(default_factory=list)
    near_senders: list = field(default_factory=list)
    near_receivers: list = field(default_factory=list)
    particle_cell: Optional[np.ndarray] = None

    @property
    def depth(self) -> int:
        return len(self.cell_centres) + 1 if self.particle_cell is not None else 0


def sample_topology(sys: ParticleSystem, spec: GraphSpec) -> SampleTopology:
    """Build the interaction graph of `sys` as requested by `spec`."""
    n = len(sys)
    if spec.kind == "full":
        s, r = hier.full_graph(n)
        return SampleTopology(sys.masses, sys.charges, sys.box, s, r)
    if spec.kind == "knn":
        s, r = hier.knn_graph(sys, spec.k, periodic=spec.periodic)
        return SampleTopology(sys.masses, sys.charges, sys.box, s, r)
    g = hier.build_hier_graph(sys, spec.depth_for(n), spec.periodic)
    return SampleTopology(
        sys.masses,
        sys.charges,
        sys.box,
        g.particle_senders,
        g.particle_receivers,
        cell_centres=[lv.centres * (g.box / lv.grid) for lv in g.levels],
        cell_parents=[lv.parent for lv in g.levels],
        near_senders=[lv.near_senders for lv in g.levels],
        near_receivers=[lv.near_receivers for lv in g.levels],
        particle_cell=g.particle_cell,
    )


@dataclass
class CellLevelTopology:
    centre: torch.Tensor  # (C, 2) geometric centres
    box: torch.Tensor  # (C, 1)
    parent: Optional[torch.Tensor]  # (C,) into the coarser level
    near_senders: torch.Tensor
    near_receivers: torch.Tensor

    @property
    def n_cells(self) -> int:
        return self.centre.shape[0]


@dataclass
class Topology:
    masses: torch.Tensor  # (N,)
    charges: Optional[torch.Tensor]
    box: torch.Tensor  # (N, 1)
    senders: torch.Tensor
    receivers: torch.Tensor
    node_graph: torch.Tensor
    n_graphs: int
    levels: list[CellLevelTopology] = field(default_factory=list)
    particle_cell: Optional[torch.Tensor] = None

    @property
    def n_particles(self) -> int:
        return self.masses.shape[0]

    @property
    def hierarchical(self) -> bool:
        return self.particle_cell is not None


def _long(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.int64))


def _f64(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def collate(samples: Sequence[SampleTopology]) -> Topology:
    """Merge per-sample topologies into one disjoint batch graph."""
    if not samples:
        raise InvalidInputError("empty batch")
    charged = samples[0].charges is not None
    depth = samples[0].depth
    if any((s.charges is not None) != charged or s.depth != depth for s in samples):
        raise InvalidInputError("batch mixes charged/uncharged samples or hierarchy depths")
    n_nodes = np.array([s.masses.shape[0] for s in samples])
    node_off = np.concatenate([[0], np.cumsum(n_nodes)[:-1]])
    senders = np.concatenate([s.senders + o for s, o in zip(samples, node_off)])
    receivers = np.concatenate([s.receivers + o for s, o in zip(samples, node_off)])
    top = Topology(
        masses=_f64(np.concatenate([s.masses for s in samples])),
        charges=_f64(np.concatenate([s.charges for s in samples])) if charged else None,
        box=_f64(np.repeat([s.box for s in samples], n_nodes))[:, None],
        senders=_long(senders),
        receivers=_long(receivers),
        node_graph=_long(np.repeat(np.arange(len(samples)), n_nodes)),
        n_graphs=len(samples),
    )
    if depth:
        n_levels = depth - 1
        counts = [np.array([s.cell_centres[li].shape[0] for s in samples]) for li in range(n_levels)]
        offs = [np.concatenate([[0], np.cumsum(c)[:-1]]) for c in counts]
        for li in range(n_levels):
            parent = None
            if li > 0:
                parent = _long(np.concatenate([s.cell_parents[li] + o for s, o in zip(samples, offs[li - 1])]))
            top.levels.append(
                CellLevelTopology(
                    centre=_f64(np.concatenate([s.cell_centres[li] for s in samples])),
                    box=_f64(np.repeat([s.box for s in samples], counts[li]))[:, None],
                    parent=parent,
                    near_senders=_long(np.concatenate([s.near_senders[li] + o for s, o in zip(samples, offs[li])])),
                    near_receivers=_long(np.concatenate([s.near_receivers[li] + o for s, o in zip(samples, offs[li])])),
                )
            )
        top.particle_cell = _long(np.concatenate([s.particle_cell + o for s, o in zip(samples, offs[-1])]))
    return top


def build_topology(systems: Sequence[ParticleSystem], spec: GraphSpec) -> Topology:
    return collate([sample_topology(s, spec) for s in systems])


def state_tensors(systems: Sequence[ParticleSystem]) -> tuple[torch.Tensor, torch.Tensor]:
    q = _f64(np.concatenate([s.positions for s in systems]))
    v = _f64(np.concatenate([s.velocities for s in systems]))
    return q, v


# --------------------------------------------------------------------------
# feature helpers


def min_image(d: torch.Tensor, box: torch.Tensor) -> torch.Tensor:
    # floor() has zero derivative, so gradients flow as if no wrap happened
    return d - box * torch.floor(d / box + 0.5)


def relative(a: torch.Tensor, b: torch.Tensor, box: torch.Tensor) -> torch.Tensor:
    """Closest-copy displacement a - b and its length."""
    d = min_image(a - b, box)
    return torch.cat([d, torch.sqrt((d * d).sum(dim=1, keepdim=True) + 1e-12)], dim=1)


def node_features(top: Topology, motion: torch.Tensor) -> torch.Tensor:
    """[m, velocity or momentum, (charge)] per particle; positions are masked."""
    cols = [top.masses[:, None], motion]
    if top.charges is not None:
        cols.append(top.charges[:, None])
    return torch.cat(cols, dim=1)


def _edge_slice(top: Topology, q: torch.Tensor, lo: int = 0, hi: Optional[int] = None) -> torch.Tensor:
    r, s = top.receivers[lo:hi], top.senders[lo:hi]
    return relative(q[r], q[s], top.box[r])


def particle_graph(top: Topology, q: torch.Tensor, feats: torch.Tensor, u: torch.Tensor, with_edges: bool = True) -> GraphData:
    return GraphData(
        node_features=feats,
        senders=top.senders,
        receivers=top.receivers,
        edge_features=_edge_slice(top, q) if with_edges else q.new_zeros((0, REL_DIM)),
        global_features=u,
        node_graph=top.node_graph,
        edge_graph=top.node_graph[top.receivers],
        n_graphs=top.n_graphs,
    )


@dataclass
class CellState:
    raw: list[torch.Tensor]  # [M, com velocity, (Q)] per level, coarsest first
    com: list[torch.Tensor]


def cell_summaries(top: Topology, q: torch.Tensor, vel: torch.Tensor) -> CellState:
    """Mass, centre of mass and COM velocity per cell from the live state.

    Children are unwrapped around the cell's geometric centre, so the result
    is a smooth function of q inside the frozen topology.
    """
    n_levels = len(top.levels)
    raw: list = [None] * n_levels
    com: list = [None] * n_levels
    member = top.particle_cell
    pos, v, m, c = q, vel, top.masses, top.charges
    for li in range(n_levels - 1, -1, -1):
        lv = top.levels[li]
        C = lv.n_cells
        mass = m.new_zeros(C).index_add(0, member, m)
        offset = min_image(pos - lv.centre[member], lv.box[member])
        centre_of_mass = lv.centre + scatter_sum(m[:, None] * offset, member, C) / mass[:, None]
        velocity = scatter_sum(m[:, None] * v, member, C) / mass[:, None]
        cols = [mass[:, None], velocity]
        charge = None
        if c is not None:
            charge = c.new_zeros(C).index_add(0, member, c)
            cols.append(charge[:, None])
        raw[li] = torch.cat(cols, dim=1)
        com[li] = centre_of_mass
        pos, v, m, c = centre_of_mass, velocity, mass, charge
        member = lv.parent
    return CellState(raw, com)


# --------------------------------------------------------------------------
# hierarchy passes


class HierarchyNet(nn.Module):
    """MLPs of the upward and downward passes.

    `up` and the cell-cell / parent-to-child / cell-update MLPs are shared by
    all cell levels; `p2c` and `c2p` only touch the particle level.
    """

    def __init__(self, node_dim: int, cell_dim: int, u_dim: int, activation: str, generator=None):
        super().__init__()
        emb = cell_dim + UP_WIDTHS[-1]
        self.cell_dim = cell_dim
        self.u_dim = u_dim
        self.p2c = Mlp(cell_dim + node_dim + REL_DIM + u_dim, UP_WIDTHS, activation, generator=generator)
        self.up = Mlp(cell_dim + emb + REL_DIM + u_dim, UP_WIDTHS, activation, generator=generator)
        self.c2c = Mlp(2 * emb + REL_DIM + u_dim, DOWN_WIDTHS, activation, generator=generator)
        self.down = Mlp(2 * emb + REL_DIM + u_dim, DOWN_WIDTHS, activation, generator=generator)
        self.cell = Mlp(emb + DOWN_WIDTHS[-1] + u_dim, CELL_WIDTHS, activation, generator=generator)
        self.c2p = Mlp(node_dim + emb + REL_DIM + u_dim, CELL_PARTICLE_WIDTHS, activation, generator=generator)

    def upward_pass(self, top: Topology, q, feats, cells: CellState, u) -> list[torch.Tensor]:
        """Cell embeddings v'_c = v_c (+) sum over children of messages."""
        n_levels = len(top.levels)
        emb: list = [None] * n_levels
        fine = top.levels[-1]
        member = top.particle_cell
        x = torch.cat(
            [
                cells.raw[-1][member],
                feats,
                relative(cells.com[-1][member], q, fine.box[member]),
                broadcast_globals(u, q.shape[0]),
            ],
            dim=1,
        )
        emb[-1] = torch.cat([cells.raw[-1], scatter_sum(self.p2c(x), member, fine.n_cells)], dim=1)
        for li in range(n_levels - 2, -1, -1):
            child = top.levels[li + 1]
            parent = child.parent
            x = torch.cat(
                [
                    cells.raw[li][parent],
                    emb[li + 1],
                    relative(cells.com[li][parent], cells.com[li + 1], child.box),
                    broadcast_globals(u, child.n_cells),
                ],
                dim=1,
            )
            emb[li] = torch.cat([cells.raw[li], scatter_sum(self.up(x), parent, top.levels[li].n_cells)], dim=1)
        return emb

    def downward_pass(self, top: Topology, q, feats, cells: CellState, emb, u) -> torch.Tensor:
        """Cell-cell interactions, pushed down to one cell->particle edge per particle."""
        updated: list = [None] * len(top.levels)
        for li, lv in enumerate(top.levels):
            s, r = lv.near_senders, lv.near_receivers
            x = torch.cat(
                [emb[li][r], emb[li][s], relative(cells.com[li][r], cells.com[li][s], lv.box[r]), broadcast_globals(u, r.shape[0])],
                dim=1,
            )
            incoming = scatter_sum(self.c2c(x), r, lv.n_cells)
            if li == 0:
                # the coarsest kept level has no parent
                from_parent = incoming.new_zeros(incoming.shape)
            else:
                p = lv.parent
                x = torch.cat(
                    [emb[li], updated[li - 1][p], relative(cells.com[li], cells.com[li - 1][p], lv.box), broadcast_globals(u, lv.n_cells)],
                    dim=1,
                )
                from_parent = self.down(x)
            total = from_parent + incoming
            x = torch.cat([emb[li], total, broadcast_globals(u, lv.n_cells)], dim=1)
            updated[li] = torch.cat([cells.raw[li], self.cell(x)], dim=1)
        fine = top.levels[-1]
        member = top.particle_cell
        x = torch.cat(
            [feats, updated[-1][member], relative(q, cells.com[-1][member], fine.box[member]), broadcast_globals(u, q.shape[0])],
            dim=1,
        )
        return self.c2p(x)

    def forward(self, top: Topology, q, vel, feats, u) -> torch.Tensor:
        cells = cell_summaries(top, q, vel)
        emb = self.upward_pass(top, q, feats, cells, u)
        return self.downward_pass(top, q, feats, cells, emb, u)


# --------------------------------------------------------------------------
# models


def rk4_step(state, dt: float, f: Callable):
    """Classic fourth-order Runge-Kutta step on a tuple of arrays/tensors."""
    single = not isinstance(state, (tuple, list))
    y = (state,) if single else tuple(state)
    fn = (lambda s: (f(s[0]),)) if single else (lambda s: tuple(f(s)))

    def shifted(k, h):
        return tuple(a + h * b for a, b in zip(y, k))

    k1 = fn(y)
    k2 = fn(shifted(k1, 0.5 * dt))
    k3 = fn(shifted(k2, 0.5 * dt))
    k4 = fn(shifted(k3, dt))
    out = tuple(a + (dt / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))
    for t in out:
        finite = torch.isfinite(t).all() if isinstance(t, torch.Tensor) else np.all(np.isfinite(t))
        if not finite:
            raise FloatingPointError("non-finite RK4 stage")
    return out[0] if single else out


class NBodyGN(nn.Module):
    """DeltaGN (``kind="delta"``) or HOGN (``kind="hogn"``), optionally hierarchical."""

    def __init__(
        self,
        kind: str = "delta",
        hierarchical: bool = False,
        charged: bool = False,
        activation: Optional[str] = None,
        seed: int = 0,
    ):
        super().__init__()
        if kind not in ("delta", "hogn"):
            raise InvalidInputError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.hierarchical = hierarchical
        self.charged = charged
        self.activation = activation or ("relu" if kind == "delta" else "softplus")
        gen = torch.Generator().manual_seed(seed)
        node_dim = 3 + int(charged)
        u_dim = 1 if kind == "delta" else 0
        self.node_dim, self.u_dim = node_dim, u_dim
        act = self.activation
        self.phi_e = Mlp(REL_DIM + 2 * node_dim + u_dim, EDGE_WIDTHS, act, generator=gen)
        self.phi_v = Mlp(EDGE_WIDTHS[-1] + node_dim + u_dim, NODE_WIDTHS, act, generator=gen)
        if kind == "delta":
            self.phi_u = None
            self.decoder = Mlp(NODE_WIDTHS[-1], (4,), act, activate_last=False, generator=gen)
        else:
            self.phi_u = Mlp(EDGE_WIDTHS[-1] + NODE_WIDTHS[-1], GLOBAL_WIDTHS, act, generator=gen)
            self.decoder = Mlp(GLOBAL_WIDTHS[-1], (1,), act, activate_last=False, generator=gen)
        self.hierarchy = HierarchyNet(node_dim, 3 + int(charged), u_dim, act, gen) if hierarchical else None
        # per-output scale of (dq, dv) for DeltaGN, fitted from data
        self.register_buffer("output_scale", torch.ones(4, dtype=DTYPE))
        # inference-only: evaluate the edge block this many edges at a time
        self.edge_chunk: Optional[int] = None

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "hierarchical": self.hierarchical,
            "charged": self.charged,
            "activation": self.activation,
        }

    def _check(self, top: Topology) -> None:
        if (top.charges is not None) != self.charged:
            raise InvalidInputError("charge features do not match the model")
        if top.hierarchical != self.hierarchical:
            raise InvalidInputError("hierarchical model needs a hierarchical topology (and vice versa)")

    # DeltaGN ---------------------------------------------------------------

    def delta(self, top: Topology, q, v, dt: float):
        """Predicted (dq, dv) per particle."""
        self._check(top)
        u = torch.tensor([dt], dtype=DTYPE)
        feats = node_features(top, v)
        extra = self.hierarchy(top, q, v, feats, u) if self.hierarchy is not None else None
        if self.edge_chunk and not torch.is_grad_enabled():
            g = particle_graph(top, q, feats, u, with_edges=False)
            agg = chunked_incoming(g, self.phi_e, lambda lo, hi: _edge_slice(top, q, lo, hi), self.edge_chunk)
            nodes = node_update(g, agg if extra is None else agg + extra, self.phi_v)
        else:
            g = particle_graph(top, q, feats, u)
            edges = edge_block(g, self.phi_e)
            nodes = node_block(g, edges, self.phi_v, extra)
        out = self.decoder(nodes) * self.output_scale
        return out[:, :2], out[:, 2:]

    # HOGN ------------------------------------------------------------------

    def hamiltonian(self, top: Topology, q, p) -> torch.Tensor:
        """Learned energy, one value per sample in the batch."""
        self._check(top)
        u = torch.zeros(0, dtype=DTYPE)
        feats = node_features(top, p)
        g = particle_graph(top, q, feats, u)
        edges = edge_block(g, self.phi_e)
        extra = None
        if self.hierarchy is not None:
            extra = self.hierarchy(top, q, p / top.masses[:, None], feats, u)
        nodes = node_block(g, edges, self.phi_v, extra)
        glob = global_block(g, edges, nodes, self.phi_u, extra_edges=extra)
        return self.decoder(glob)[:, 0]

    def derivs(self, top: Topology, q, p, create_graph: bool = False):
        """Hamilton's equations: (dq/dt, dp/dt) = (dH/dp, -dH/dq)."""
        with torch.enable_grad():
            if not q.requires_grad:
                q = q.detach().requires_grad_(True)
            if not p.requires_grad:
                p = p.detach().requires_grad_(True)
            H = self.hamiltonian(top, q, p)
            dH_dq, dH_dp = gradients(H.sum(), [q, p], create_graph=create_graph)
        return dH_dp, -dH_dq

    # common ----------------------------------------------------------------

    def step(self, top: Topology, q, v, dt: float, create_graph: bool = False):
        """Advance (q, v) by one step of `dt`; positions are not wrapped."""
        if self.kind == "delta":
            dq, dv = self.delta(top, q, v, dt)
            return q + dq, v + dv
        m = top.masses[:, None]
        q1, p1 = rk4_step((q, m * v), dt, lambda s: self.derivs(top, s[0], s[1], create_graph))
        return q1, p1 / m


def deltagn_forward(model: NBodyGN, top: Topology, q, v, dt: float):
    return model.delta(top, q, v, dt)


def hogn_derivs(model: NBodyGN, top: Topology, q, p, create_graph: bool = False):
    return model.derivs(top, q, p, create_graph)


def hierarchical_forward(model: NBodyGN, top: Topology, q, v, dt: float):
    """Delta variant -> (dq, dv); HOGN variant -> (dq/dt, dp/dt)."""
    if not model.hierarchical:
        raise InvalidInputError("model is not hierarchical")
    if model.kind == "delta":
        return model.delta(top, q, v, dt)
    return model.derivs(top, q, top.masses[:, None] * v)


def _pass_inputs(model: NBodyGN, top: Topology, v, dt: float):
    motion = v if model.kind == "delta" else top.masses[:, None] * v
    u = torch.tensor([dt], dtype=DTYPE) if model.u_dim else torch.zeros(0, dtype=DTYPE)
    return node_features(top, motion), u


def upward_pass(model: NBodyGN, top: Topology, q, v, dt: float = 0.0):
    feats, u = _pass_inputs(model, top, v, dt)
    return model.hierarchy.upward_pass(top, q, feats, cell_summaries(top, q, v), u)


def downward_pass(model: NBodyGN, top: Topology, q, v, emb, dt: float = 0.0):
    feats, u = _pass_inputs(model, top, v, dt)
    return model.hierarchy.downward_pass(top, q, feats, cell_summaries(top, q, v), emb, u)
