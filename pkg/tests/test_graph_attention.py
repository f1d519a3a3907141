import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnforge import tensor as T
from attnforge.errors import DegenerateRowError
from attnforge.graph_attention import (QuasiAttentionParams, TokenGraph, adjacency_to_mask,
                                       assemble_multimodal_mask, quasi_attention, read_graph,
                                       scaled_dot_product_attention, write_graph)
from attnforge.tensor import Tensor

NEG = -np.inf


def qkv(rng, n=4, d=3):
    return tuple(Tensor(rng.standard_normal((n, d))) for _ in range(3))


@st.composite
def graphs(draw, max_n=7):
    n = draw(st.integers(1, max_n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    edges = draw(st.sets(st.sampled_from(pairs))) if pairs else set()
    return TokenGraph(n, edges=edges)


class TestMasks:
    def test_complete_graph(self):
        g = TokenGraph(4, edges={(i, j) for i in range(4) for j in range(i + 1, 4)})
        assert np.array_equal(adjacency_to_mask(g), np.zeros((4, 4)))

    def test_empty_graph(self):
        m = adjacency_to_mask(TokenGraph(3))
        expected = np.full((3, 3), NEG)
        np.fill_diagonal(expected, 0.0)
        assert np.array_equal(m, expected)

    def test_path_graph(self):
        m = adjacency_to_mask(TokenGraph(3, edges={(0, 1), (1, 2)}))
        blocked = {(i, j) for i in range(3) for j in range(3) if m[i, j] == NEG}
        assert blocked == {(0, 2), (2, 0)}

    def test_bad_edge(self):
        with pytest.raises(ValueError):
            TokenGraph(2, edges={(0, 2)})

    def test_duplicate_edges_collapse(self):
        assert TokenGraph(3, edges={(0, 1), (1, 0)}).edges == {(0, 1)}

    @settings(max_examples=100, deadline=None)
    @given(graphs())
    def test_mask_invariants(self, g):
        m = adjacency_to_mask(g)
        assert np.all(np.diag(m) == 0)
        assert np.array_equal(m, m.T)
        assert np.all((m == 0) | (m == NEG))

    @settings(max_examples=100, deadline=None)
    @given(graphs(), st.data())
    def test_adding_edge_is_monotone(self, g, data):
        if g.n < 2:
            return
        i = data.draw(st.integers(0, g.n - 1))
        j = data.draw(st.integers(0, g.n - 1))
        before, after = adjacency_to_mask(g), adjacency_to_mask(g.add_edge(i, j))
        assert not np.any((before == 0) & (after == NEG))
        assert np.sum(after == NEG) <= np.sum(before == NEG)

    def test_multimodal_zero(self):
        assert np.array_equal(assemble_multimodal_mask(np.zeros((2, 2)), np.zeros((3, 3))), np.zeros((5, 5)))

    def test_multimodal_by_hand(self):
        v = np.array([[0.0, NEG], [NEG, 0.0]])
        out = assemble_multimodal_mask(v, np.zeros((1, 1)))
        expected = np.array([[0.0, NEG, 0.0], [NEG, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert np.array_equal(out, expected)

    @settings(max_examples=50, deadline=None)
    @given(graphs(), graphs())
    def test_cross_block_zero(self, gv, gt):
        out = assemble_multimodal_mask(adjacency_to_mask(gv), adjacency_to_mask(gt))
        assert out.shape == (gv.n + gt.n,) * 2
        assert np.all(out[:gv.n, gv.n:] == 0) and np.all(out[gv.n:, :gv.n] == 0)

    def test_graph_file_roundtrip(self, tmp_path):
        g = TokenGraph(4, ["vision", "vision", "text", "text"], {(0, 1), (2, 3), (1, 2)})
        write_graph(g, tmp_path / "g.txt")
        back = read_graph(tmp_path / "g.txt")
        assert back.n == 4 and back.edges == g.edges and back.modalities == g.modalities
        assert back.subgraph("text").edges == {(0, 1)}

    def test_graph_file_compact_modalities(self, tmp_path):
        (tmp_path / "g.txt").write_text("# demo\nN 3\nM vvt\n0 1\n")
        g = read_graph(tmp_path / "g.txt")
        assert g.modalities == ["vision", "vision", "text"] and g.edges == {(0, 1)}

    def test_graph_file_missing_header(self, tmp_path):
        (tmp_path / "g.txt").write_text("0 1\n")
        with pytest.raises(ValueError):
            read_graph(tmp_path / "g.txt")


class TestQuasiAttention:
    def test_zero_params_equals_vanilla(self, rng):
        Q, K, V = qkv(rng)
        for lam in (0.0, 1.0, 3.7):
            p = QuasiAttentionParams.from_mask(np.zeros((4, 4)), lam)
            assert np.array_equal(quasi_attention(Q, K, V, p).data, scaled_dot_product_attention(Q, K, V).data)

    def test_masked_weight_exactly_zero(self, rng):
        Q, K, _ = qkv(rng)
        G = np.zeros((4, 4))
        G[1, 2] = NEG
        # V = identity exposes the attention weights themselves
        out = quasi_attention(Q, K, Tensor(np.eye(4)), QuasiAttentionParams.from_mask(G))
        assert out.data[1, 2] == 0.0
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_constant_bias_cancels(self, rng):
        Q, K, V = qkv(rng)
        p0 = QuasiAttentionParams.from_mask(np.zeros((4, 4)), 1.0)
        p1 = QuasiAttentionParams.from_mask(np.zeros((4, 4)), 1.0)
        p1.G_hat.data[...] = 2.5
        assert np.allclose(quasi_attention(Q, K, V, p0).data, quasi_attention(Q, K, V, p1).data, atol=1e-12)

    def test_row_shift_invariance(self, rng):
        Q, K, V = qkv(rng)
        G = adjacency_to_mask(TokenGraph(4, edges={(0, 1), (2, 3)}))
        p = QuasiAttentionParams.from_mask(G, 0.7)
        p.G_hat.data[...] = rng.standard_normal((4, 4))
        ref = quasi_attention(Q, K, V, p).data
        p.G_hat.data += rng.standard_normal((4, 1)) * np.ones((1, 4))
        assert np.max(np.abs(quasi_attention(Q, K, V, p).data - ref)) < 1e-12

    def test_gradient_isolation(self, rng):
        Q, K, V = qkv(rng)
        G = adjacency_to_mask(TokenGraph(4, edges={(0, 1), (1, 2)}))
        p = QuasiAttentionParams.from_mask(G, 1.0)
        T.backward(T.sum_(T.square(quasi_attention(Q, K, V, p))))
        assert np.any(p.G_hat.grad != 0)
        assert np.all(p.G_hat.grad[G == NEG] == 0)
        assert isinstance(p.G, np.ndarray)

    def test_per_head_bias(self, rng):
        Q, K, V = (Tensor(rng.standard_normal((2, 4, 3))) for _ in range(3))
        p = QuasiAttentionParams.from_mask(np.zeros((4, 4)), 1.0, heads=2)
        p.G_hat.data[1] = rng.standard_normal((4, 4))
        out = quasi_attention(Q, K, V, p)
        assert np.array_equal(out.data[0], scaled_dot_product_attention(Q[0], K[0], V[0]).data)
        assert not np.allclose(out.data[1], scaled_dot_product_attention(Q[1], K[1], V[1]).data)

    def test_bad_mask_values(self, rng):
        Q, K, V = qkv(rng)
        with pytest.raises(ValueError):
            quasi_attention(Q, K, V, QuasiAttentionParams.from_mask(np.ones((4, 4))))

    def test_fully_masked_row(self, rng):
        Q, K, V = qkv(rng, n=2)
        G = np.array([[NEG, NEG], [0.0, 0.0]])
        with pytest.raises(DegenerateRowError):
            quasi_attention(Q, K, V, QuasiAttentionParams.from_mask(G))

    @pytest.mark.parametrize("which", ["Q", "K", "V", "G_hat"])
    def test_grad_check(self, which, rng):
        Q, K, V = qkv(rng)
        G = adjacency_to_mask(TokenGraph(4, edges={(0, 1), (1, 3)}))
        p = QuasiAttentionParams.from_mask(G, 0.8)
        p.G_hat.data[...] = rng.standard_normal((4, 4))
        args = {"Q": Q, "K": K, "V": V}

        def f(x):
            a = dict(args)
            if which == "G_hat":
                return T.sum_(quasi_attention(a["Q"], a["K"], a["V"], QuasiAttentionParams(G, x, 0.8)))
            a[which] = x
            return T.sum_(quasi_attention(a["Q"], a["K"], a["V"], p))

        start = p.G_hat.data if which == "G_hat" else args[which].data
        assert T.grad_check(f, start) < 1e-5
