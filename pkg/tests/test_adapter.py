"""Sliding-window attention oracle equivalence and adapter accumulation rules."""

import numpy as np
import pytest

from faultgen import autodiff as ad
from faultgen.adapter import (
    AdapterConfig,
    AdapterStack,
    adapter_forward,
    attach,
    sliding_window_attention,
)
from faultgen.autodiff import Tensor
from faultgen.denoiser import Backbone, DenoiserConfig
from faultgen.errors import ContractError

from helpers import full_attention_oracle

TOY = DenoiserConfig(tau=6, d=2, T=10, model_dim=8, enc_layers=1, dec_layers=2,
                     heads=2, ff_dim=16, fourier_terms=1)


def _swa_params(dim, seed, zero_out=False):
    rng = np.random.default_rng(seed)
    p = {}
    for tag in ("q", "k", "v", "o"):
        w = np.zeros((dim, dim)) if (zero_out and tag == "o") else rng.normal(0, 0.3, (dim, dim))
        p[f"w{tag}"] = Tensor(w.astype(np.float32), requires_grad=True)
        p[f"b{tag}"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
    return p


class TestSlidingWindowAttention:
    def test_even_window_rejected(self):
        p = _swa_params(8, 0)
        with pytest.raises(ContractError):
            sliding_window_attention(Tensor(np.zeros((1, 4, 8), dtype=np.float32)), 2, 2, p)

    def test_w1_is_value_then_output_projection(self):
        p = _swa_params(8, 1)
        x = np.random.default_rng(0).standard_normal((2, 5, 8)).astype(np.float32)
        out = sliding_window_attention(Tensor(x), 1, 2, p)
        expected = (x @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    @pytest.mark.parametrize("s", list(range(1, 17)))
    @pytest.mark.parametrize("w", [1, 3, 5])
    def test_equals_band_masked_full_attention(self, s, w):
        p = _swa_params(8, s * 10 + w)
        x = np.random.default_rng(s).standard_normal((2, s, 8)).astype(np.float32)
        out = sliding_window_attention(Tensor(x), w, 2, p)
        oracle = full_attention_oracle(
            x.astype(np.float64),
            *(p[k].data.astype(np.float64) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
            heads=2, band=w // 2,
        )
        assert np.max(np.abs(out.data - oracle)) < 1e-5

    @pytest.mark.parametrize("s", [2, 4, 8])
    def test_wide_window_equals_full_attention(self, s):
        w = 2 * s - 1
        p = _swa_params(8, s)
        x = np.random.default_rng(s).standard_normal((1, s, 8)).astype(np.float32)
        out = sliding_window_attention(Tensor(x), w, 2, p)
        oracle = full_attention_oracle(
            x.astype(np.float64),
            *(p[k].data.astype(np.float64) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
            heads=2, band=None,
        )
        assert np.max(np.abs(out.data - oracle)) < 1e-5

    def test_position_constant_input_constant_interior(self):
        p = _swa_params(8, 3)
        x = np.tile(np.random.default_rng(1).standard_normal((1, 1, 8)), (1, 9, 1)).astype(np.float32)
        out = sliding_window_attention(Tensor(x), 5, 2, p).data
        interior = out[0, 2:-2]
        assert np.max(np.abs(interior - interior[0])) < 1e-6

    def test_sequence_length_invariance(self):
        for s in (3, 7, 12):
            for w in (1, 3, 7):
                p = _swa_params(8, s + w)
                x = np.zeros((1, s, 8), dtype=np.float32)
                assert sliding_window_attention(Tensor(x), w, 2, p).shape == (1, s, 8)

    def test_gradients_flow(self):
        with ad.precision("float64"):
            p = _swa_params(8, 5)
            x = Tensor(np.random.default_rng(2).standard_normal((1, 6, 8)), requires_grad=True)
            loss = sliding_window_attention(x, 3, 2, p).sum()
            loss.backward()
            assert x.grad is not None and np.all(np.isfinite(x.grad))
            assert p["wq"].grad is not None


class TestAdapterForward:
    def _stack(self, n_blocks=2, alpha=1.0, window=3):
        cfg = AdapterConfig(window=window, heads=2, model_dim=8, alpha=alpha)
        return AdapterStack(cfg, n_blocks, seed=4)

    def test_zero_init_outputs_zero(self):
        stack = self._stack()
        taps = [Tensor(np.random.default_rng(i).standard_normal((1, 6, 8)).astype(np.float32))
                for i in range(2)]
        locals_, updated = adapter_forward(stack, taps)
        for loc, tap, upd in zip(locals_, taps, updated):
            np.testing.assert_array_equal(loc.data, np.zeros_like(loc.data))
            np.testing.assert_array_equal(upd.data, tap.data)

    def test_alpha_zero_keeps_taps(self):
        stack = self._stack(alpha=0.0)
        for blk in stack.blocks:  # make block outputs nonzero
            blk["wo"].data = np.full_like(blk["wo"].data, 0.3)
        taps = [Tensor(np.ones((1, 6, 8), dtype=np.float32)) for _ in range(2)]
        _, updated = adapter_forward(stack, taps)
        for tap, upd in zip(taps, updated):
            np.testing.assert_array_equal(upd.data, tap.data)

    def test_accumulation_hand_trace(self):
        # stub the blocks to constant outputs c1, c2 and check the wiring
        stack = self._stack(alpha=0.5)
        c1 = np.full((1, 4, 8), 0.25, dtype=np.float32)
        c2 = np.full((1, 4, 8), -0.5, dtype=np.float32)
        seen = []
        stack.block_forward = lambda k, x: (seen.append((k, x.data.copy())),
                                            Tensor([c1, c2][k]))[1]
        taps = [Tensor(np.random.default_rng(i).standard_normal((1, 4, 8)).astype(np.float32))
                for i in range(2)]
        locals_, updated = adapter_forward(stack, taps)
        np.testing.assert_array_equal(seen[0][1], taps[0].data)           # block 1 input = tap 1
        np.testing.assert_allclose(seen[1][1], taps[1].data + c1)         # block 2 input = tap 2 + c1
        np.testing.assert_allclose(updated[0].data, taps[0].data + 0.5 * c1)
        np.testing.assert_allclose(updated[1].data, taps[1].data + 0.5 * c2)

    def test_tap_count_mismatch(self):
        stack = self._stack()
        with pytest.raises(ContractError):
            adapter_forward(stack, [Tensor(np.zeros((1, 4, 8), dtype=np.float32))])


class TestAttach:
    def test_partition_and_identity(self):
        bb = Backbone(TOY, seed=1)
        stack = AdapterStack(AdapterConfig(window=3, heads=2, model_dim=8), TOY.dec_layers, seed=2)
        x = np.random.default_rng(0).standard_normal((6, 2)).astype(np.float32)
        before, _ = bb.forward(x, 3)
        comp = attach(bb, stack)
        # trainable set is exactly the adapter parameters
        trainables = {p.name for p in comp.parameters() if p.trainable}
        assert trainables == {p.name for p in stack.parameters()}
        # freshly initialized composed model reproduces the backbone exactly
        after, _ = comp.forward(x, 3)
        np.testing.assert_array_equal(before.data, after.data)

    def test_alpha_zero_equals_backbone(self):
        bb = Backbone(TOY, seed=1)
        stack = AdapterStack(AdapterConfig(window=3, heads=2, model_dim=8, alpha=0.0),
                             TOY.dec_layers, seed=2)
        rng = np.random.default_rng(5)
        for p in stack.parameters():  # non-trivial adapter weights
            p.data = rng.normal(0, 0.2, p.data.shape).astype(np.float32)
        x = rng.standard_normal((6, 2)).astype(np.float32)
        plain, _ = bb.forward(x, 2)
        comp = attach(bb, stack)
        fused, _ = comp.forward(x, 2)
        assert np.max(np.abs(plain.data - fused.data)) <= 1e-7

    def test_dim_mismatch_rejected(self):
        bb = Backbone(TOY, seed=1)
        with pytest.raises(ContractError):
            attach(bb, AdapterStack(AdapterConfig(window=3, heads=2, model_dim=16), TOY.dec_layers))
        with pytest.raises(ContractError):
            attach(bb, AdapterStack(AdapterConfig(window=3, heads=2, model_dim=8), 5))

    def test_finetune_step_never_touches_backbone(self):
        from faultgen.training import Adam, base_loss

        bb = Backbone(TOY, seed=1)
        rng0 = np.random.default_rng(9)
        for p in bb.parameters():  # pretrained proxy: heads must be nonzero for grads to flow
            if np.all(p.data == 0):
                p.data = rng0.normal(0, 0.1, p.data.shape).astype(np.float32)
        stack = AdapterStack(AdapterConfig(window=3, heads=2, model_dim=8), TOY.dec_layers, seed=2)
        comp = attach(bb, stack)
        before = {p.name: p.data.tobytes() for p in bb.parameters()}
        opt = Adam(comp.parameters(), 1e-2)
        rng = np.random.default_rng(0)
        for _ in range(3):
            x = Tensor(rng.standard_normal((2, 6, 2)).astype(np.float32))
            eps = Tensor(rng.standard_normal((2, 6, 2)).astype(np.float32))
            eps_hat, _ = comp.forward(x, 1)
            loss = base_loss(eps, eps_hat)
            opt.zero_grad()
            loss.backward()
            opt.step()
        after = {p.name: p.data.tobytes() for p in bb.parameters()}
        assert before == after
        # and the adapter did move
        assert any(np.any(p.grad != 0) for p in stack.parameters())
