import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hflic.entropy import (
    ANCHOR,
    NON_ANCHOR,
    PROB_FLOOR,
    SIGMA_MIN,
    ContextModel,
    FactorizedPrior,
    checkerboard_masks,
    default_partition,
    estimate_rate,
    partition_channels,
    quantize,
)
from hflic.errors import ConfigurationError


class TestQuantize:
    def test_round_plain(self):
        assert float(quantize(torch.tensor(2.4), torch.tensor(0.0), "round")) == 2.0

    def test_round_around_mean(self):
        out = quantize(torch.tensor(2.4), torch.tensor(0.6), "round")
        assert float(out) == pytest.approx(2.6)

    def test_noise_bounded(self):
        y = torch.zeros(100_000)
        out = quantize(y, mode="additive_noise")
        assert float((out - y).abs().max()) <= 0.5

    def test_ste_round_identity_gradient(self):
        y = torch.tensor([0.2, 1.7, -2.3], requires_grad=True)
        mu = torch.zeros(3)
        out = quantize(y, mu, "ste_round")
        assert torch.equal(out.detach(), torch.tensor([0.0, 2.0, -2.0]))
        out.sum().backward()
        assert torch.equal(y.grad, torch.ones(3))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            quantize(torch.zeros(1), mode="floor")


class TestPartition:
    def test_desk_default(self):
        part = default_partition(48)
        assert part.sizes == (4, 4, 8, 12, 20)
        assert part.total == 48

    def test_full_scale_default(self):
        part = default_partition(320)
        assert part.sizes == (16, 16, 32, 64, 192)
        assert part.total == 320

    def test_bad_sizes_rejected(self):
        with pytest.raises(ConfigurationError):
            partition_channels(48, (10, 10))

    @pytest.mark.parametrize("groups", [1, 2, 5, 10])
    def test_generic_partitions_cover_m(self, groups):
        part = default_partition(48, groups)
        assert part.total == 48
        assert part.num_groups == groups
        assert all(s >= 1 for s in part.sizes)

    def test_offsets(self):
        part = default_partition(48)
        assert [part.offset(g) for g in range(5)] == [0, 4, 8, 16, 28]


class TestCheckerboard:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 64))
    def test_masks_partition_grid(self, h, w):
        anchor, non_anchor = checkerboard_masks(h, w)
        assert torch.equal(anchor + non_anchor, torch.ones(1, 1, h, w))
        assert float((anchor * non_anchor).sum()) == 0.0

    def test_anchor_positions_even(self):
        anchor, _ = checkerboard_masks(4, 4)
        for i in range(4):
            for j in range(4):
                assert anchor[0, 0, i, j] == (1.0 if (i + j) % 2 == 0 else 0.0)


@pytest.fixture(scope="module")
def ctx_setup():
    torch.manual_seed(0)
    part = default_partition(48)
    ctx = ContextModel(hyper_channels=96, partition=part)
    hyper = torch.randn(1, 96, 8, 8)
    y_full = torch.randn(1, 48, 8, 8)
    return ctx, hyper, y_full, part


class TestContextModel:
    def test_sigma_floor(self, ctx_setup):
        ctx, hyper, y, part = ctx_setup
        for g in range(part.num_groups):
            cur = torch.randn(1, part.sizes[g], 8, 8)
            for phase, cur_in in ((ANCHOR, None), (NON_ANCHOR, cur)):
                _, sigma = ctx.context_params(hyper, y, cur_in, g, phase)
                assert float(sigma.detach().min()) >= SIGMA_MIN

    def test_group0_anchor_ignores_all_latents(self, ctx_setup):
        ctx, hyper, y, _ = ctx_setup
        mu1, s1 = ctx.context_params(hyper, y, None, 0, ANCHOR)
        mu2, s2 = ctx.context_params(hyper, torch.randn_like(y) * 50, None, 0, ANCHOR)
        assert torch.equal(mu1, mu2) and torch.equal(s1, s2)

    def test_future_groups_have_no_effect(self, ctx_setup):
        ctx, hyper, y, part = ctx_setup
        for g in range(part.num_groups):
            start = part.offset(g)
            perturbed = y.clone()
            perturbed[:, start:] += torch.randn_like(perturbed[:, start:]) * 10
            mu1, s1 = ctx.context_params(hyper, y, None, g, ANCHOR)
            mu2, s2 = ctx.context_params(hyper, perturbed, None, g, ANCHOR)
            assert torch.equal(mu1, mu2) and torch.equal(s1, s2)

    def test_non_anchor_ignores_non_anchor_positions(self, ctx_setup):
        ctx, hyper, y, part = ctx_setup
        g = 2
        anchor_mask, non_anchor_mask = checkerboard_masks(8, 8)
        cur = torch.randn(1, part.sizes[g], 8, 8)
        mu1, s1 = ctx.context_params(hyper, y, cur, g, NON_ANCHOR)
        poked = cur + torch.randn_like(cur) * non_anchor_mask * 25
        mu2, s2 = ctx.context_params(hyper, y, poked, g, NON_ANCHOR)
        assert torch.equal(mu1, mu2) and torch.equal(s1, s2)

    def test_non_anchor_does_react_to_anchors(self, ctx_setup):
        ctx, hyper, y, part = ctx_setup
        g = 2
        anchor_mask, _ = checkerboard_masks(8, 8)
        cur = torch.randn(1, part.sizes[g], 8, 8)
        mu1, _ = ctx.context_params(hyper, y, cur, g, NON_ANCHOR)
        poked = cur + torch.randn_like(cur) * anchor_mask * 25
        mu2, _ = ctx.context_params(hyper, y, poked, g, NON_ANCHOR)
        assert not torch.equal(mu1, mu2)

    def test_pass_counter_counts_phases(self, ctx_setup):
        ctx, hyper, y, part = ctx_setup
        ctx.reset_pass_count()
        for g in range(part.num_groups):
            ctx.context_params(hyper, y, None, g, ANCHOR)
            ctx.context_params(hyper, y, torch.zeros(1, part.sizes[g], 8, 8), g, NON_ANCHOR)
        assert ctx.pass_count == 2 * part.num_groups


def scalar_rate_oracle(y_hat, mu, sigma):
    """Independent per-symbol discretized-Gaussian bits, plain math.erf."""
    total = 0.0
    for v, m, s in zip(y_hat, mu, sigma):
        upper = 0.5 * (1 + math.erf((v - m + 0.5) / (s * math.sqrt(2))))
        lower = 0.5 * (1 + math.erf((v - m - 0.5) / (s * math.sqrt(2))))
        total += -math.log2(max(upper - lower, PROB_FLOOR))
    return total


class TestEstimateRate:
    def test_single_standard_symbol(self):
        bits = estimate_rate(
            torch.zeros(1, dtype=torch.float64),
            torch.zeros(1, dtype=torch.float64),
            torch.ones(1, dtype=torch.float64),
        )
        expected = scalar_rate_oracle([0.0], [0.0], [1.0])
        assert float(bits) == pytest.approx(expected, rel=1e-12)
        assert float(bits) == pytest.approx(1.3849, abs=2e-4)

    def test_matches_bruteforce_oracle_float64(self, rng):
        y_hat = np.round(rng.normal(0, 3, size=100))
        mu = rng.normal(0, 1, size=100)
        sigma = rng.uniform(SIGMA_MIN, 5.0, size=100)
        bits = estimate_rate(
            torch.tensor(y_hat, dtype=torch.float64),
            torch.tensor(mu, dtype=torch.float64),
            torch.tensor(sigma, dtype=torch.float64),
        )
        expected = scalar_rate_oracle(y_hat, mu, sigma)
        assert abs(float(bits) - expected) <= 1e-9 * abs(expected)

    def test_positive_even_at_mean(self):
        bits = estimate_rate(
            torch.zeros(5), torch.zeros(5), torch.full((5,), SIGMA_MIN)
        )
        assert float(bits) > 0.0

    def test_bits_increase_with_sigma_at_mean(self):
        sigmas = [0.2, 0.5, 1.0, 2.0, 4.0, 8.0]
        values = [
            float(estimate_rate(torch.zeros(1), torch.zeros(1), torch.tensor([s])))
            for s in sigmas
        ]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            estimate_rate(torch.zeros(3), torch.zeros(2), torch.ones(2))


class TestFactorizedPrior:
    def test_cdf_monotone(self):
        torch.manual_seed(0)
        prior = FactorizedPrior(4)
        t = torch.sort(torch.randn(4, 1000) * 6, dim=1).values
        cdf = prior.cdf(t)
        assert (cdf[:, 1:] >= cdf[:, :-1] - 1e-7).all()
        assert (cdf >= 0).all() and (cdf <= 1).all()

    def test_bits_finite_for_wide_inputs(self):
        torch.manual_seed(1)
        prior = FactorizedPrior(8)
        z = torch.empty(1, 8, 16, 16).uniform_(-8, 8)
        bits = float(prior.bits(torch.round(z)).detach())
        assert math.isfinite(bits) and bits >= 0

    def test_training_concentrates_mass(self):
        torch.manual_seed(2)
        prior = FactorizedPrior(2)
        z = torch.round(torch.randn(1, 2, 8, 8) * 2.0)
        opt = torch.optim.Adam(prior.parameters(), lr=5e-2)
        with torch.no_grad():
            start = float(prior.bits(z))
        for _ in range(200):
            opt.zero_grad()
            loss = prior.bits(z)
            loss.backward()
            opt.step()
        with torch.no_grad():
            assert float(prior.bits(z)) < start
