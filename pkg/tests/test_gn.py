import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hiergn import gn
from hiergn.gn import DTYPE, GraphData, Mlp


def np_mlp(mlp, x):
    """Plain numpy evaluation of an Mlp from its raw weights."""
    x = np.asarray(x, float)
    layers = list(mlp.layers)
    for i, layer in enumerate(layers):
        W = layer.weight.detach().numpy()
        b = layer.bias.detach().numpy()
        x = x @ W.T + b
        if i < len(layers) - 1 or mlp.activate_last:
            x = np.maximum(x, 0) if mlp.activation == "relu" else np.logaddexp(0, x)
    return x


def random_graph(rng, n_nodes=5, n_edges=9, dv=3, de=2, du=1):
    return GraphData(
        node_features=torch.tensor(rng.normal(size=(n_nodes, dv)), dtype=DTYPE),
        senders=torch.tensor(rng.integers(0, n_nodes, n_edges)),
        receivers=torch.tensor(rng.integers(0, n_nodes, n_edges)),
        edge_features=torch.tensor(rng.normal(size=(n_edges, de)), dtype=DTYPE),
        global_features=torch.tensor(rng.normal(size=du), dtype=DTYPE),
    )


def blocks(seed=0, dv=3, de=2, du=1, act="softplus"):
    g = torch.Generator().manual_seed(seed)
    phi_e = Mlp(de + 2 * dv + du, (7, 6), act, generator=g)
    phi_v = Mlp(6 + dv + du, (5, 4), act, generator=g)
    phi_u = Mlp(6 + 4 + du, (3, 2), act, generator=g)
    return phi_e, phi_v, phi_u


class TestMlp:
    def test_widths(self):
        m = Mlp(10, gn.EDGE_WIDTHS)
        assert [l.out_features for l in m.layers] == [150, 150]
        assert Mlp(4, gn.NODE_WIDTHS).out_dim == 100

    def test_zero_weights(self):
        m = Mlp(3, (4, 2))
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        assert torch.equal(m(torch.ones(2, 3, dtype=DTYPE)), torch.zeros(2, 2, dtype=DTYPE))

    def test_identity_layer(self):
        m = Mlp(3, (3,))
        with torch.no_grad():
            m.layers[0].weight.copy_(torch.eye(3))
            m.layers[0].bias.zero_()
        x = torch.tensor([[0.0, 1.5, 2.0]], dtype=DTYPE)
        assert torch.equal(gn.mlp_forward(m, x), x)

    @pytest.mark.parametrize("act", ["relu", "softplus"])
    @pytest.mark.parametrize("last", [True, False])
    def test_independent_evaluator(self, act, last):
        m = Mlp(6, (8, 5, 3), act, activate_last=last, generator=torch.Generator().manual_seed(1))
        x = np.random.default_rng(0).normal(size=(4, 6))
        out = m(torch.tensor(x)).detach().numpy()
        assert np.allclose(out, np_mlp(m, x), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Mlp(3, (2,))(torch.zeros(1, 4, dtype=DTYPE))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            Mlp(3, (2,), "tanh")

    def test_seeded_init(self):
        a = Mlp(4, (5,), generator=torch.Generator().manual_seed(3))
        b = Mlp(4, (5,), generator=torch.Generator().manual_seed(3))
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
        bound = 1 / 2.0
        assert all(p.abs().max() <= bound for p in a.parameters())


class TestBlocks:
    def test_edge_block_hand_computed(self):
        # one edge 0 -> 1, single linear unit with weight vector w
        g = GraphData(
            node_features=torch.tensor([[1.0], [2.0]], dtype=DTYPE),
            senders=torch.tensor([0]),
            receivers=torch.tensor([1]),
            edge_features=torch.tensor([[0.5]], dtype=DTYPE),
            global_features=torch.tensor([3.0], dtype=DTYPE),
        )
        phi = Mlp(4, (1,), "relu")
        with torch.no_grad():
            phi.layers[0].weight.copy_(torch.tensor([[1.0, 10.0, 100.0, 1000.0]]))
            phi.layers[0].bias.fill_(0.25)
        # e, v_receiver, v_sender, u = 0.5, 2, 1, 3
        assert gn.edge_block(g, phi).item() == 0.5 + 20 + 100 + 3000 + 0.25

    def test_edge_block_zero_weights(self):
        g = random_graph(np.random.default_rng(0))
        phi_e, _, _ = blocks()
        with torch.no_grad():
            for p in phi_e.parameters():
                p.zero_()
        out = gn.edge_block(g, phi_e)
        assert torch.allclose(out, torch.full_like(out, float(np.log(2.0))))

    def test_against_independent_evaluator(self):
        rng = np.random.default_rng(4)
        g = random_graph(rng)
        phi_e, phi_v, phi_u = blocks(2)
        e = gn.edge_block(g, phi_e)
        v = gn.node_block(g, e, phi_v)
        u = gn.global_block(g, e, v, phi_u)
        V, E = g.node_features.numpy(), g.edge_features.numpy()
        s, r, U = g.senders.numpy(), g.receivers.numpy(), g.global_features.numpy()
        e_ref = np.stack([np_mlp(phi_e, np.concatenate([E[k], V[r[k]], V[s[k]], U])) for k in range(len(s))])
        agg = np.zeros((V.shape[0], e_ref.shape[1]))
        for k in range(len(s)):
            agg[r[k]] += e_ref[k]
        v_ref = np.stack([np_mlp(phi_v, np.concatenate([agg[i], V[i], U])) for i in range(V.shape[0])])
        u_ref = np_mlp(phi_u, np.concatenate([e_ref.sum(0), v_ref.sum(0), U]))
        assert np.allclose(e.detach().numpy(), e_ref, atol=1e-12)
        assert np.allclose(v.detach().numpy(), v_ref, atol=1e-12)
        assert np.allclose(u.detach().numpy()[0], u_ref, atol=1e-12)

    def test_isolated_node_gets_zero_sum(self):
        g = random_graph(np.random.default_rng(1))
        g.receivers = torch.where(g.receivers == 2, torch.tensor(0), g.receivers)
        e = gn.edge_block(g, blocks()[0])
        assert torch.equal(gn.aggregate_incoming(g, e)[2], torch.zeros(6, dtype=DTYPE))

    def test_duplicate_edge_doubles(self):
        g = random_graph(np.random.default_rng(2), n_edges=1)
        e = gn.edge_block(g, blocks()[0])
        once = gn.aggregate_incoming(g, e)
        g2 = GraphData(g.node_features, g.senders.repeat(2), g.receivers.repeat(2), g.edge_features.repeat(2, 1), g.global_features)
        twice = gn.aggregate_incoming(g2, torch.cat([e, e]))
        assert torch.allclose(twice, 2 * once)

    def test_half_edges_twice(self):
        g = random_graph(np.random.default_rng(3), n_edges=4)
        e = torch.rand(4, 6, dtype=DTYPE)
        g2 = GraphData(g.node_features, g.senders.repeat(2), g.receivers.repeat(2), g.edge_features.repeat(2, 1), g.global_features)
        assert torch.allclose(gn.aggregate_incoming(g, e), gn.aggregate_incoming(g2, torch.cat([e / 2, e / 2])))

    def test_empty_graph(self):
        g = GraphData(
            torch.zeros(0, 3, dtype=DTYPE),
            torch.zeros(0, dtype=torch.long),
            torch.zeros(0, dtype=torch.long),
            torch.zeros(0, 2, dtype=DTYPE),
            torch.tensor([0.5], dtype=DTYPE),
        )
        phi_e, phi_v, phi_u = blocks()
        e = gn.edge_block(g, phi_e)
        v = gn.node_block(g, e, phi_v)
        u = gn.global_block(g, e, v, phi_u)
        ref = phi_u(torch.cat([torch.zeros(10, dtype=DTYPE), g.global_features])[None])
        assert torch.allclose(u, ref)

    def test_chunked_matches_plain(self):
        g = random_graph(np.random.default_rng(5), n_nodes=7, n_edges=23)
        phi_e = blocks()[0]
        ref = gn.aggregate_incoming(g, gn.edge_block(g, phi_e))
        out = gn.chunked_incoming(g, phi_e, lambda lo, hi: g.edge_features[lo:hi], chunk=5)
        assert torch.allclose(out, ref, atol=1e-13)

    def test_validate(self):
        g = random_graph(np.random.default_rng(0))
        g.validate()
        g.senders = g.senders.clone()
        g.senders[0] = 99
        with pytest.raises(ValueError):
            g.validate()
        g = random_graph(np.random.default_rng(0))
        g.edge_features[0, 0] = float("nan")
        with pytest.raises(ValueError):
            g.validate()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, n_nodes=6, n_edges=11)
        phi_e, phi_v, phi_u = blocks(seed % 7)
        e = gn.edge_block(g, phi_e)
        v = gn.node_block(g, e, phi_v)
        u = gn.global_block(g, e, v, phi_u)
        perm = torch.tensor(rng.permutation(6))
        inv = torch.argsort(perm)
        eperm = torch.tensor(rng.permutation(11))
        gp = GraphData(
            g.node_features[perm], inv[g.senders][eperm], inv[g.receivers][eperm], g.edge_features[eperm], g.global_features
        )
        ep = gn.edge_block(gp, phi_e)
        vp = gn.node_block(gp, ep, phi_v)
        up = gn.global_block(gp, ep, vp, phi_u)
        assert torch.allclose(ep, e[eperm], atol=1e-12)
        assert torch.allclose(vp, v[perm], atol=1e-12)
        assert torch.allclose(up, u, atol=1e-12)

    def test_batched_globals(self):
        rng = np.random.default_rng(6)
        a, b = random_graph(rng, 4, 5), random_graph(rng, 3, 4)
        b.global_features = a.global_features
        phi_e, phi_v, phi_u = blocks()
        merged = GraphData(
            torch.cat([a.node_features, b.node_features]),
            torch.cat([a.senders, b.senders + 4]),
            torch.cat([a.receivers, b.receivers + 4]),
            torch.cat([a.edge_features, b.edge_features]),
            a.global_features,
            node_graph=torch.tensor([0] * 4 + [1] * 3),
            edge_graph=torch.tensor([0] * 5 + [1] * 4),
            n_graphs=2,
        )

        def run(g):
            e = gn.edge_block(g, phi_e)
            return gn.global_block(g, e, gn.node_block(g, e, phi_v), phi_u)

        assert torch.allclose(run(merged), torch.cat([run(a), run(b)]), atol=1e-12)


def central_difference(f, x, h=1e-5):
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        dn = f(x).item()
        flat[i] = old
        gflat[i] = (up - dn) / (2 * h)
    return grad


def rel_err(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


class TestGradients:
    def test_identity(self):
        x = torch.tensor([2.0], dtype=DTYPE, requires_grad=True)
        (g,) = gn.gradients(x, [x])
        assert g.item() == 1.0

    def test_non_scalar(self):
        x = torch.ones(2, dtype=DTYPE, requires_grad=True)
        with pytest.raises(ValueError):
            gn.gradients(x * 2, [x])

    def test_unused_is_zero(self):
        x = torch.ones(2, dtype=DTYPE, requires_grad=True)
        y = torch.ones(3, dtype=DTYPE, requires_grad=True)
        gx, gy = gn.gradients((x**2).sum(), [x, y])
        assert torch.equal(gy, torch.zeros(3, dtype=DTYPE))
        assert torch.equal(gx, 2 * x)

    def test_relu_product_of_weights(self):
        m = Mlp(3, (4, 2), "relu", activate_last=False, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            for layer in m.layers:
                layer.bias.fill_(10.0)  # keep every preactivation positive
        x = torch.tensor([0.1, -0.2, 0.3], dtype=DTYPE, requires_grad=True)
        (g,) = gn.gradients(m(x[None])[0, 0], [x])
        W = m.layers[1].weight[0:1] @ m.layers[0].weight
        assert torch.allclose(g, W[0].detach(), atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_input_and_parameter_gradients(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng)
        phi_e, phi_v, phi_u = blocks(seed)

        def scalar(nodes=None, edges=None):
            gg = GraphData(
                g.node_features if nodes is None else nodes,
                g.senders,
                g.receivers,
                g.edge_features if edges is None else edges,
                g.global_features,
            )
            e = gn.edge_block(gg, phi_e)
            return gn.global_block(gg, e, gn.node_block(gg, e, phi_v), phi_u).sum()

        nodes = g.node_features.clone().requires_grad_(True)
        edges = g.edge_features.clone().requires_grad_(True)
        params = list(phi_e.parameters()) + list(phi_u.parameters())
        grads = gn.gradients(scalar(nodes, edges), [nodes, edges, *params])
        assert rel_err(grads[0], central_difference(lambda x: scalar(nodes=x), g.node_features)) < 1e-4
        assert rel_err(grads[1], central_difference(lambda x: scalar(edges=x), g.edge_features)) < 1e-4
        for p, gp in zip(params, grads[2:]):
            def with_param(val, p=p):
                old = p.detach().clone()
                with torch.no_grad():
                    p.copy_(val)
                    out = scalar()
                    p.copy_(old)
                return out

            assert rel_err(gp, central_difference(with_param, p.detach())) < 1e-4

    def test_second_order(self):
        # d/dw of (d/dx sum(mlp(x))) via create_graph, against finite differences
        m = Mlp(2, (5, 1), "softplus", activate_last=False, generator=torch.Generator().manual_seed(2))
        x = torch.tensor([[0.3, -0.4]], dtype=DTYPE, requires_grad=True)
        w = m.layers[0].weight

        def dfdx_norm():
            (gx,) = gn.gradients(m(x).sum(), [x], create_graph=True)
            return (gx**2).sum()

        (gw,) = gn.gradients(dfdx_norm(), [w])

        def at(val):
            old = w.detach().clone()
            with torch.no_grad():
                w.copy_(val)
            out = dfdx_norm().detach()
            with torch.no_grad():
                w.copy_(old)
            return out

        assert rel_err(gw, central_difference(at, w.detach())) < 1e-4
