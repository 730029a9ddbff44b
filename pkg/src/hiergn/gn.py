"""Graph-network building blocks: MLPs, edge/node/global blocks, gradients.

Everything runs in float64. Aggregations are plain sums. Graphs may hold
several disjoint samples; `node_graph`/`edge_graph` map nodes and edges to
their sample so that global blocks aggregate per sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

DTYPE = torch.float64

EDGE_WIDTHS = (150, 150)
NODE_WIDTHS = (100, 100, 100)
GLOBAL_WIDTHS = (100, 100)

_ACTIVATIONS = {"relu": torch.relu, "softplus": nn.functional.softplus}


class Mlp(nn.Module):
    """Stack of affine layers, each followed by the activation.

    With ``activate_last=False`` the final layer stays linear (decoders).
    """

    def __init__(
        self,
        in_dim: int,
        widths: Sequence[int],
        activation: str = "relu",
        activate_last: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.activate_last = activate_last
        self.in_dim = in_dim
        self.widths = tuple(widths)
        dims = [in_dim, *widths]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))
        self.reset_parameters(generator)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        # U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
        for layer in self.layers:
            bound = 1.0 / max(layer.in_features, 1) ** 0.5
            for p in (layer.weight, layer.bias):
                p.copy_(torch.rand(p.shape, generator=generator, dtype=DTYPE) * 2 * bound - bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        act = _ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                x = act(x)
        return x


def mlp_forward(params: Mlp, x: torch.Tensor) -> torch.Tensor:
    return params(x)


@dataclass
class GraphData:
    node_features: torch.Tensor  # (Nv, dv)
    senders: torch.Tensor  # (Ne,) long
    receivers: torch.Tensor  # (Ne,) long
    edge_features: torch.Tensor  # (Ne, de)
    global_features: torch.Tensor  # (du,), may be empty
    node_graph: Optional[torch.Tensor] = None  # (Nv,) sample index
    edge_graph: Optional[torch.Tensor] = None  # (Ne,) sample index
    n_graphs: int = 1

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    def validate(self) -> None:
        if self.senders.shape != self.receivers.shape or self.edge_features.shape[0] != self.n_edges:
            raise ValueError("edge arrays disagree in length")
        if self.n_edges and (
            int(self.senders.min()) < 0
            or int(self.receivers.min()) < 0
            or int(self.senders.max()) >= self.n_nodes
            or int(self.receivers.max()) >= self.n_nodes
        ):
            raise ValueError("edge endpoint out of range")
        for t in (self.node_features, self.edge_features, self.global_features):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite graph features")

    def _node_graph(self) -> torch.Tensor:
        if self.node_graph is None:
            return torch.zeros(self.n_nodes, dtype=torch.long)
        return self.node_graph

    def _edge_graph(self) -> torch.Tensor:
        if self.edge_graph is None:
            return torch.zeros(self.n_edges, dtype=torch.long)
        return self.edge_graph


def broadcast_globals(u: torch.Tensor, rows: int) -> torch.Tensor:
    return u.reshape(1, -1).expand(rows, u.numel())


def scatter_sum(values: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    out = values.new_zeros((size, values.shape[1]))
    return out.index_add(0, index, values)


def edge_block(g: GraphData, phi_e: Mlp) -> torch.Tensor:
    """e'_k = phi_e(e_k, v_receiver, v_sender, u)."""
    v = g.node_features
    x = torch.cat(
        [g.edge_features, v[g.receivers], v[g.senders], broadcast_globals(g.global_features, g.n_edges)],
        dim=1,
    )
    return phi_e(x)


def aggregate_incoming(g: GraphData, edges: torch.Tensor, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sum of updated edges per receiving node, plus optional per-node extras."""
    agg = scatter_sum(edges, g.receivers, g.n_nodes)
    if extra is not None:
        agg = agg + extra
    return agg


def node_block(g: GraphData, edges: torch.Tensor, phi_v: Mlp, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
    """v'_i = phi_v(sum of incoming e'_k, v_i, u)."""
    return node_update(g, aggregate_incoming(g, edges, extra), phi_v)


def node_update(g: GraphData, aggregated: torch.Tensor, phi_v: Mlp) -> torch.Tensor:
    x = torch.cat([aggregated, g.node_features, broadcast_globals(g.global_features, g.n_nodes)], dim=1)
    return phi_v(x)


def chunked_incoming(g: GraphData, phi_e: Mlp, edge_features, chunk: int) -> torch.Tensor:
    """Edge block and receiver sums evaluated `chunk` edges at a time.

    Same result as ``aggregate_incoming(g, edge_block(g, phi_e))`` but with
    memory bounded by the chunk; `edge_features(lo, hi)` builds the edge
    features of one slice.
    """
    v = g.node_features
    out = None
    for lo in range(0, g.n_edges, chunk):
        hi = min(lo + chunk, g.n_edges)
        s, r = g.senders[lo:hi], g.receivers[lo:hi]
        x = torch.cat([edge_features(lo, hi), v[r], v[s], broadcast_globals(g.global_features, hi - lo)], dim=1)
        part = scatter_sum(phi_e(x), r, g.n_nodes)
        out = part if out is None else out + part
    if out is None:
        out = v.new_zeros((g.n_nodes, phi_e.out_dim))
    return out


def global_block(
    g: GraphData,
    edges: torch.Tensor,
    nodes: torch.Tensor,
    phi_u: Mlp,
    extra_edges: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """u' = phi_u(sum e', sum v', u), one row per sample."""
    edge_sum = scatter_sum(edges, g._edge_graph(), g.n_graphs)
    if extra_edges is not None:
        edge_sum = edge_sum + scatter_sum(extra_edges, g._node_graph(), g.n_graphs)
    node_sum = scatter_sum(nodes, g._node_graph(), g.n_graphs)
    x = torch.cat([edge_sum, node_sum, broadcast_globals(g.global_features, g.n_graphs)], dim=1)
    return phi_u(x)


def gradients(
    output: torch.Tensor,
    wrt: Sequence[torch.Tensor],
    create_graph: bool = False,
    allow_unused: bool = True,
) -> list[torch.Tensor]:
    """Reverse-mode derivatives of a scalar `output` w.r.t. `wrt` leaves.

    Unused leaves get zero gradients. With ``create_graph=True`` the result
    is itself differentiable, which is what training through Hamilton's
    equations needs.
    """
    if output.numel() != 1:
        raise ValueError("gradients() needs a scalar output")
    grads = torch.autograd.grad(
        output.reshape(()), list(wrt), create_graph=create_graph, allow_unused=allow_unused
    )
    return [torch.zeros_like(w) if gr is None else gr for w, gr in zip(wrt, grads)]
