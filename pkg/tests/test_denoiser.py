"""Denoiser architecture: embeddings, blocks, init, and gradient oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers_fd import gradcheck
from maskdiff.denoiser import (
    AttentionBlock,
    ConditionalUNet,
    DenoiserConfig,
    Downsample,
    ResidualBlock,
    TimeEmbedding,
    Upsample,
    build_denoiser,
    denoiser_forward,
    init_params,
    sinusoidal_embedding,
)

TINY = DenoiserConfig(
    in_channels=2, base_channels=8, channel_mults=(1, 2), attention_levels={1}
)


class TestSinusoidalEmbedding:
    def test_t_zero(self):
        emb = sinusoidal_embedding(0, 8)
        assert torch.equal(emb[:4], torch.zeros(4, dtype=torch.float64))
        assert torch.equal(emb[4:], torch.ones(4, dtype=torch.float64))

    def test_dim_two_unit_frequency(self):
        for t in (1, 7, 133):
            emb = sinusoidal_embedding(t, 2)
            assert emb[0] == pytest.approx(math.sin(t), abs=1e-12)
            assert emb[1] == pytest.approx(math.cos(t), abs=1e-12)

    def test_all_timesteps_distinct(self):
        embs = sinusoidal_embedding(torch.arange(1, 251), 256)
        # exhaustive pairwise comparison
        diffs = (embs[:, None, :] - embs[None, :, :]).abs().amax(dim=2)
        diffs.fill_diagonal_(1.0)
        assert float(diffs.min()) > 0.0

    def test_range(self):
        emb = sinusoidal_embedding(torch.arange(0, 500), 64)
        assert float(emb.abs().max()) <= 1.0

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_embedding(3, 7)

    def test_negative_t_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_embedding(-1, 8)


class TestConfig:
    def test_defaults(self):
        cfg = DenoiserConfig(in_channels=4)
        assert cfg.out_channels == 3
        assert cfg.time_embed_dim == 256
        assert cfg.level_channels == (64, 128, 256, 512)
        assert cfg.spatial_divisor == 8

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(in_channels=1),
            dict(in_channels=4, base_channels=12, groups=8),
            dict(in_channels=4, channel_mults=()),
            dict(in_channels=4, channel_mults=(1, 2), attention_levels={2}),
            dict(in_channels=4, time_embed_dim=9),
        ],
    )
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ValueError):
            DenoiserConfig(**kwargs)


class TestForward:
    def test_shape_contract(self):
        params = init_params(TINY, 0)
        out = denoiser_forward(params, TINY, torch.randn(2, 16, 16), 3)
        assert out.shape == (1, 16, 16)
        assert torch.isfinite(out).all()

    def test_batched_shape(self):
        params = init_params(TINY, 0, zero_head=False)
        out = denoiser_forward(params, TINY, torch.randn(5, 2, 16, 16), torch.tensor([1, 2, 3, 4, 5]))
        assert out.shape == (5, 1, 16, 16)

    def test_deterministic(self):
        params = init_params(TINY, 1, zero_head=False)
        x = torch.randn(1, 2, 16, 16)
        a = denoiser_forward(params, TINY, x, 7)
        b = denoiser_forward(params, TINY, x, 7)
        assert torch.equal(a, b)

    def test_wrong_channels_rejected(self):
        params = init_params(TINY, 0)
        with pytest.raises(ValueError):
            denoiser_forward(params, TINY, torch.randn(3, 16, 16), 1)

    def test_indivisible_spatial_rejected(self):
        params = init_params(TINY, 0)
        with pytest.raises(ValueError):
            denoiser_forward(params, TINY, torch.randn(2, 15, 15), 1)

    def test_mask_channel_is_wired_in(self):
        # random (non-zero) head, so conditioning can reach the output
        params = init_params(TINY, 3, zero_head=False)
        model = build_denoiser(TINY, params)
        x = torch.randn(1, 2, 16, 16)
        y = x.clone()
        y[:, -1] = 1.0 - y[:, -1]
        with torch.no_grad():
            assert not torch.equal(model(x, 5), model(y, 5))

    @given(
        base=st.sampled_from([8, 16]),
        levels=st.integers(min_value=1, max_value=3),
        size_mult=st.integers(min_value=1, max_value=2),
        in_channels=st.integers(min_value=2, max_value=4),
    )
    @settings(max_examples=8, deadline=None)
    def test_shape_preservation_property(self, base, levels, size_mult, in_channels):
        cfg = DenoiserConfig(
            in_channels=in_channels,
            base_channels=base,
            channel_mults=tuple(2**l for l in range(levels)),
            attention_levels={levels - 1},
        )
        hw = cfg.spatial_divisor * 4 * size_mult
        params = init_params(cfg, 0)
        out = denoiser_forward(params, cfg, torch.randn(in_channels, hw, hw), 1)
        assert out.shape == (in_channels - 1, hw, hw)


class TestInitParams:
    def test_zero_head_forces_zero_output(self):
        params = init_params(TINY, 9)
        for t in (1, 5):
            out = denoiser_forward(params, TINY, torch.randn(2, 16, 16), t)
            assert torch.equal(out, torch.zeros_like(out))

    def test_same_seed_identical(self):
        a, b = init_params(TINY, 4), init_params(TINY, 4)
        assert a.keys() == b.keys()
        for k in a:
            assert torch.equal(a[k], b[k])

    def test_different_seeds_differ(self):
        a, b = init_params(TINY, 4), init_params(TINY, 5)
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_fan_in_bounds(self):
        params = init_params(TINY, 0)
        w = params["stem.weight"]  # fan_in = 2 * 3 * 3
        bound = 1 / math.sqrt(18)
        assert float(w.abs().max()) <= bound
        assert float(w.abs().max()) > 0.5 * bound  # not degenerate


class TestNormalizationAndAttention:
    def test_groupnorm_statistics(self):
        torch.manual_seed(0)
        norm = torch.nn.GroupNorm(4, 16).double()
        x = torch.randn(3, 16, 12, 12, dtype=torch.float64)
        with torch.no_grad():
            out = norm(x).reshape(3, 4, 4 * 12 * 12)  # (batch, group, elems)
        mean = out.mean(dim=2)
        var = out.var(dim=2, unbiased=False)
        assert float(mean.abs().max()) < 1e-5
        assert float((var - 1).abs().max()) < 1e-4

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(1)
        attn = AttentionBlock(16, 8).double()
        with torch.no_grad():
            probs = attn.attention_probs(torch.randn(2, 16, 6, 6, dtype=torch.float64))
        sums = probs.sum(dim=-1)
        assert float((sums - 1).abs().max()) < 1e-6


class TestBlockGradients:
    """Finite-difference oracle on each block type in isolation (float64)."""

    def _weighted(self, shape, seed):
        g = torch.Generator().manual_seed(seed)
        return torch.randn(shape, generator=g, dtype=torch.float64)

    def test_residual_block(self):
        torch.manual_seed(10)
        blk = ResidualBlock(8, 16, 32, 8).double()
        x = torch.randn(2, 8, 8, 8, dtype=torch.float64)
        temb = torch.randn(2, 32, dtype=torch.float64)
        w = self._weighted((2, 16, 8, 8), 0)
        gradcheck(blk, (x, temb), lambda out: (out * w).mean())

    def test_attention_block(self):
        torch.manual_seed(11)
        blk = AttentionBlock(16, 8).double()
        x = torch.randn(2, 16, 4, 4, dtype=torch.float64)
        w = self._weighted((2, 16, 4, 4), 1)
        gradcheck(blk, (x,), lambda out: (out * w).mean())

    def test_time_embedding(self):
        torch.manual_seed(12)
        blk = TimeEmbedding(8, 32).double()
        w = self._weighted((3, 32), 2)
        gradcheck(blk, (torch.tensor([1, 5, 9]),), lambda out: (out * w).mean())

    def test_downsample(self):
        torch.manual_seed(13)
        blk = Downsample(8).double()
        x = torch.randn(2, 8, 8, 8, dtype=torch.float64)
        w = self._weighted((2, 8, 4, 4), 3)
        gradcheck(blk, (x,), lambda out: (out * w).mean())

    def test_upsample(self):
        torch.manual_seed(14)
        blk = Upsample(8, 4).double()
        x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        w = self._weighted((2, 4, 8, 8), 4)
        gradcheck(blk, (x,), lambda out: (out * w).mean())
