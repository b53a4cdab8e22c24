import numpy as np
import pytest
import torch

from semanticmac.interaction import (
    GBAConfig,
    GBALayer,
    GBAStack,
    SemanticInteraction,
    adaptive_avg_pool,
    add_modality_embedding,
    bridge_attention,
    bridge_scores,
    fuse,
    multi_query_project,
    shared_pathway,
    specific_pathway,
    split_fused,
)
from semanticmac.perceiver import zero_attention_weights

from oracles import FD_TOL, fd_gradcheck, module_gradcheck, np_bridge_attention, np_gba_layer, np_pool_rows, state_numpy

D = torch.float64


def _layer(d=8, heads=2, m=2, **kw):
    torch.manual_seed(0)
    layer = GBALayer(GBAConfig(common_dim=d, heads=heads, bridge_tokens=m, ffn_mult=2, **kw)).double()
    with torch.no_grad():
        for p in layer.parameters():
            p.copy_(torch.randn_like(p) * 0.4)
    return layer


class TestModalityEmbedding:
    def test_zero_row_is_identity(self):
        x = torch.randn(3, 4)
        assert torch.equal(add_modality_embedding(x, "audio", torch.zeros(3, 4)), x)

    def test_distinct_rows(self):
        table = torch.randn(3, 4)
        x = torch.randn(2, 4)
        assert not torch.equal(add_modality_embedding(x, "text", table), add_modality_embedding(x, "vision", table))

    def test_substitution(self):
        table = torch.tensor([[2.0, -1.0], [0.0, 0.0], [0.0, 0.0]])
        assert add_modality_embedding(torch.tensor([[1.0, 1.0]]), "text", table).tolist() == [[3.0, 0.0]]

    def test_unknown_modality(self):
        with pytest.raises(ValueError):
            add_modality_embedding(torch.zeros(1, 2), "smell", torch.zeros(3, 2))


class TestMultiQuery:
    def test_shapes(self):
        wq, wkv = torch.nn.Linear(8, 8), torch.nn.Linear(8, 4)
        q, k, v = multi_query_project(torch.randn(4, 8), torch.randn(6, 8), torch.randn(6, 8), wq, wkv, 2)
        assert q.shape == (4, 8) and k.shape == (6, 8) and v.shape == (6, 8)

    def test_single_head_is_plain_projection(self):
        wq, wkv = torch.nn.Linear(4, 4), torch.nn.Linear(4, 4)
        x = torch.randn(3, 4)
        q, k, _ = multi_query_project(x, x, x, wq, wkv, 1)
        torch.testing.assert_close(q, wq(x))
        torch.testing.assert_close(k, wkv(x))

    def test_keys_tiled_across_heads(self):
        wq, wkv = torch.nn.Linear(8, 8), torch.nn.Linear(8, 2)
        k_in = torch.randn(5, 8)
        _, k, v = multi_query_project(torch.randn(3, 8), k_in, k_in, wq, wkv, 4)
        for h in range(4):
            torch.testing.assert_close(k[:, 2 * h: 2 * h + 2], wkv(k_in))
        assert torch.equal(k, v)

    def test_constant_columns_give_constant_rows(self):
        wkv = torch.nn.Linear(4, 2, bias=False)
        with torch.no_grad():
            wkv.weight.copy_(torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
        k_in = torch.full((5, 4), 0.7)
        _, k, _ = multi_query_project(torch.randn(3, 4), k_in, k_in, torch.nn.Linear(4, 4), wkv, 2)
        assert torch.all(k == 0.7)


class TestBridgeAttention:
    def test_pool_bins(self):
        x = torch.arange(5, dtype=D)[:, None]
        np.testing.assert_allclose(adaptive_avg_pool(x, 3).numpy(), np_pool_rows(x.numpy(), 3))
        np.testing.assert_allclose(adaptive_avg_pool(x, 3)[:, 0].numpy(), [0.5, 2.0, 3.5])

    def test_equal_values_pass_through(self):
        v = torch.randn(8, dtype=D)
        out = bridge_attention(torch.randn(5, 8, dtype=D), torch.randn(4, 8, dtype=D), v.expand(4, 8), 2)
        torch.testing.assert_close(out, v.expand(5, 8))

    def test_single_bridge_token(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.standard_normal(s) for s in ((3, 4), (5, 4), (5, 4)))
        got = bridge_attention(*(torch.from_numpy(a) for a in (q, k, v)), 1).numpy()
        np.testing.assert_allclose(got, np_bridge_attention(q, k, v, 1), rtol=1e-12)
        scores = bridge_scores(torch.from_numpy(q), torch.from_numpy(k), 1)
        assert torch.linalg.matrix_rank(scores) <= 1
        same = torch.from_numpy(np.tile(q[:1], (3, 1)))
        out = bridge_attention(same, torch.from_numpy(k), torch.from_numpy(v), 1)
        torch.testing.assert_close(out, out[:1].expand(3, 4))

    @pytest.mark.parametrize("n,nk,m", [(6, 6, 2), (5, 4, 3), (6, 3, 1)])
    def test_score_rank_bounded_by_bridge(self, n, nk, m):
        torch.manual_seed(n * 10 + m)
        scores = bridge_scores(torch.randn(n, 8, dtype=D), torch.randn(nk, 8, dtype=D), m)
        sv = torch.linalg.svdvals(scores)
        assert int((sv > 1e-9 * sv[0]).sum()) <= m

    def test_rows_are_stochastic(self):
        torch.manual_seed(0)
        q, k = torch.randn(6, 8, dtype=D), torch.randn(4, 8, dtype=D)
        attn = torch.softmax(bridge_scores(q, k, 2) / 8 ** 0.5, -1)
        torch.testing.assert_close(attn.sum(-1), torch.ones(6, dtype=D), atol=1e-6, rtol=0)

    def test_must_bottleneck(self):
        with pytest.raises(ValueError, match="bridge must bottleneck"):
            bridge_attention(torch.randn(3, 4), torch.randn(3, 4), torch.randn(3, 4), 3)

    def test_gradcheck(self):
        torch.manual_seed(5)
        q = torch.randn(3, 4, dtype=D, requires_grad=True)
        k = torch.randn(4, 4, dtype=D, requires_grad=True)
        v = torch.randn(4, 4, dtype=D, requires_grad=True)
        w = torch.randn(3, 4, dtype=D)
        assert fd_gradcheck(lambda: (bridge_attention(q, k, v, 2) * w).sum(), [q, k, v]) <= FD_TOL

    def test_no_bridge_is_plain_attention(self):
        torch.manual_seed(1)
        q, k, v = torch.randn(5, 8, dtype=D), torch.randn(4, 8, dtype=D), torch.randn(4, 8, dtype=D)
        want = torch.softmax(q @ k.T / 8 ** 0.5, -1) @ v
        torch.testing.assert_close(bridge_attention(q, k, v, 2, use_bridge=False), want)

    def test_two_stage_differs(self):
        torch.manual_seed(1)
        q, k, v = torch.randn(5, 8, dtype=D), torch.randn(4, 8, dtype=D), torch.randn(4, 8, dtype=D)
        assert not torch.allclose(bridge_attention(q, k, v, 2), bridge_attention(q, k, v, 2, two_stage=True))


class TestGBALayer:
    def test_zero_weights_identity(self):
        layer = _layer()
        zero_attention_weights(layer)
        fq = torch.randn(4, 8, dtype=D)
        assert torch.equal(layer(fq, torch.randn(5, 8, dtype=D)), fq)

    def test_relu_increments_nonnegative(self):
        layer = _layer()
        fq = torch.randn(4, 8, dtype=D)
        q_in, k_in, v_in = layer.project(fq, torch.randn(5, 8, dtype=D))
        step1 = torch.relu(bridge_attention(q_in, k_in, v_in, 2))
        assert torch.all(step1 >= 0)
        out = layer(fq, torch.randn(5, 8, dtype=D))
        assert out.shape == fq.shape

    def test_matches_literal_oracle(self):
        layer = _layer(d=8, heads=2, m=2)
        rng = np.random.default_rng(0)
        fq, fkv = rng.standard_normal((4, 8)), rng.standard_normal((6, 8))
        got = layer(torch.from_numpy(fq), torch.from_numpy(fkv)).detach().numpy()
        want = np_gba_layer(fq, fkv, state_numpy(layer), heads=2, m=2)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_gate_changes_output(self):
        relu, plain = _layer(gate="relu"), _layer(gate="none")
        plain.load_state_dict(relu.state_dict())
        fq, fkv = torch.randn(4, 8, dtype=D), torch.randn(5, 8, dtype=D)
        assert not torch.allclose(relu(fq, fkv), plain(fq, fkv))
        np.testing.assert_allclose(
            plain(fq, fkv).detach().numpy(),
            np_gba_layer(fq.numpy(), fkv.numpy(), state_numpy(plain), 2, 2, gate="none"), rtol=1e-10, atol=1e-12)

    def test_gradcheck(self):
        layer = _layer(d=4, heads=2, m=2)
        torch.manual_seed(7)
        fq = torch.randn(3, 4, dtype=D, requires_grad=True)
        fkv = torch.randn(4, 4, dtype=D, requires_grad=True)
        w = torch.randn(3, 4, dtype=D)
        assert module_gradcheck(layer, lambda: (layer(fq, fkv) * w).sum(), [fq, fkv]) <= FD_TOL

    def test_without_multi_query_uses_full_projections(self):
        layer = _layer(multi_query=False)
        assert layer.w_key.out_features == 8 and layer.w_value.out_features == 8

    def test_nan_names_layer(self):
        layer = GBALayer(GBAConfig(common_dim=4, heads=2, bridge_tokens=1), index=2)
        with pytest.raises(FloatingPointError, match="layer 2"):
            layer(torch.full((3, 4), float("nan")), torch.randn(3, 4))


class TestPathways:
    def _stack(self, depth=1):
        torch.manual_seed(0)
        stack = GBAStack(GBAConfig(common_dim=8, heads=2, bridge_tokens=2, depth=depth, ffn_mult=2)).double()
        with torch.no_grad():
            for p in stack.parameters():
                p.copy_(torch.randn_like(p) * 0.4)
        return stack

    def test_depth_zero_is_mean(self):
        x = torch.randn(5, 8, dtype=D)
        torch.testing.assert_close(specific_pathway(x, self._stack(0)), x.mean(0))

    def test_constant_rows_after_zero_layers(self):
        stack = self._stack()
        zero_attention_weights(stack)
        c = torch.randn(8, dtype=D)
        torch.testing.assert_close(specific_pathway(c.expand(5, 8), stack), c)

    def test_specific_matches_oracle(self):
        stack = self._stack(depth=2)
        x = np.random.default_rng(1).standard_normal((5, 8))
        want = x
        for i, layer in enumerate(stack.layers):
            want = np_gba_layer(want, want, state_numpy(layer), 2, 2)
        got = specific_pathway(torch.from_numpy(x), stack).detach().numpy()
        np.testing.assert_allclose(got, want.mean(0), rtol=1e-10, atol=1e-12)

    def test_shared_matches_oracle(self):
        stacks = {u: self._stack() for u in ("text", "audio", "vision")}
        rng = np.random.default_rng(2)
        toks = {u: rng.standard_normal((4, 8)) for u in stacks}
        sh_t, sh_a, sh_v, concat = shared_pathway({u: torch.from_numpy(t) for u, t in toks.items()}, stacks)
        for u, got in zip(("text", "audio", "vision"), (sh_t, sh_a, sh_v)):
            others = np.concatenate([toks[o] for o in ("text", "audio", "vision") if o != u])
            want = np_gba_layer(toks[u], others, state_numpy(stacks[u].layers[0]), 2, 2).mean(0)
            np.testing.assert_allclose(got.detach().numpy(), want, rtol=1e-10, atol=1e-12)
        assert concat.shape == (24,)

    def test_symmetric_inputs_shared_params(self):
        stack = self._stack()
        x = torch.randn(4, 8, dtype=D)
        sh_t, sh_a, sh_v, _ = shared_pathway({u: x for u in ("text", "audio", "vision")},
                                             {u: stack for u in ("text", "audio", "vision")})
        torch.testing.assert_close(sh_t, sh_a)
        torch.testing.assert_close(sh_a, sh_v)

    def test_missing_modality(self):
        with pytest.raises(ValueError, match="missing"):
            shared_pathway({"text": torch.zeros(4, 8)}, {})


class TestFuse:
    def test_order_and_round_trip(self):
        sp = [torch.randn(4) for _ in range(3)]
        sh = [torch.randn(4) for _ in range(3)]
        fused = fuse(sp, sh)
        assert fused.shape == (24,)
        for i, part in enumerate(sp + sh):
            assert torch.equal(fused[4 * i: 4 * i + 4], part)
        a, b = split_fused(fused, 4)
        assert all(torch.equal(x, y) for x, y in zip(a + b, sp + sh))

    @pytest.mark.parametrize("d_c,heads,m,depth", [(8, 2, 2, 1), (16, 4, 3, 2), (12, 3, 1, 0)])
    def test_fused_width_is_six_dc(self, d_c, heads, m, depth):
        sgfi = SemanticInteraction({"text": 5, "audio": 3, "vision": 7},
                                   GBAConfig(common_dim=d_c, heads=heads, bridge_tokens=m, depth=depth))
        feats = {"text": torch.randn(2, 6, 5), "audio": torch.randn(2, 4, 3), "vision": torch.randn(2, 4, 7)}
        assert sgfi(feats).fused.shape == (2, 6 * d_c)

    def test_ablation_switches_change_outputs(self):
        feats = {"text": torch.randn(2, 6, 5), "audio": torch.randn(2, 4, 3), "vision": torch.randn(2, 4, 7)}
        dims = {"text": 5, "audio": 3, "vision": 7}
        torch.manual_seed(0)
        base_cfg = GBAConfig(common_dim=8, heads=2, bridge_tokens=2, init_std=0.5)
        base = SemanticInteraction(dims, base_cfg)
        ref = base(feats).fused
        for flag in ({"use_modality_embedding": False}, {"use_bridge": False}, {"gate": "none"}):
            other = SemanticInteraction(dims, GBAConfig(**{**base_cfg.__dict__, **flag}))
            other.load_state_dict(base.state_dict())
            assert not torch.allclose(other(feats).fused, ref), flag
        torch.manual_seed(0)
        no_mq = SemanticInteraction(dims, GBAConfig(**{**base_cfg.__dict__, "multi_query": False}))
        assert not torch.allclose(no_mq(feats).fused, ref)

    def test_dropped_modality_is_zeroed_before_embedding(self):
        sgfi = SemanticInteraction({"text": 5, "audio": 3, "vision": 7}, GBAConfig(common_dim=8, heads=2, bridge_tokens=2))
        feats = {"text": torch.randn(1, 6, 5), "audio": torch.randn(1, 4, 3), "vision": torch.randn(1, 4, 7)}
        toks = sgfi.embed(feats, drop=("audio",))
        torch.testing.assert_close(toks["audio"], sgfi.modality_embedding[1].expand(1, 4, 8))
