import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emotts_lab.errors import DomainError, ShapeError
from emotts_lab.models import grad_check, init_uniform_
from emotts_lab.style import CrossAttention, StyleBundle, combine_multi_scale, cross_attention_align

D = 8


def make_attn(seed=0, d=D, heads=2, positional=False):
    return init_uniform_(CrossAttention(d, heads, positional), torch.Generator().manual_seed(seed))


def rand(shape, seed):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def attention_reference(attn, q_in, kv):
    """Per-head loops with numpy, no batching tricks."""
    W = {n: (getattr(attn, n).weight.detach().numpy(), getattr(attn, n).bias.detach().numpy()) for n in ("w_q", "w_k", "w_v", "w_o")}
    q = q_in.numpy() @ W["w_q"][0].T + W["w_q"][1]
    k = kv.numpy() @ W["w_k"][0].T + W["w_k"][1]
    v = kv.numpy() @ W["w_v"][0].T + W["w_v"][1]
    dh = attn.d_head
    heads = []
    for h in range(attn.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        w = np.exp(logits - logits.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        heads.append(w @ v[:, sl])
    return np.concatenate(heads, 1) @ W["w_o"][0].T + W["w_o"][1]


class TestCrossAttention:
    def test_matches_reference(self):
        attn = make_attn(1)
        zc, sf = rand((5, D), 2), rand((9, D), 3)
        np.testing.assert_allclose(attn(zc, sf).detach().numpy(), attention_reference(attn, zc, sf), atol=1e-12)

    def test_single_frame(self):
        attn = make_attn(4)
        zc, sf = rand((6, D), 5), rand((1, D), 6)
        out = cross_attention_align(zc, sf, attn)
        value = attn.w_o(attn.w_v(sf))[0]
        torch.testing.assert_close(out, value.expand(6, D), rtol=0, atol=1e-13)

    def test_identical_keys_uniform_average(self):
        attn = make_attn(7)
        # keys come from the same rows as values, so hold the key projection constant
        with torch.no_grad():
            attn.w_k.weight.zero_()
        zc, sf = rand((3, D), 8), rand((5, D), 9)
        out = attn(zc, sf)
        expected = attn.w_o(attn.w_v(sf).mean(0, keepdim=True)).expand(3, D)
        torch.testing.assert_close(out, expected, rtol=0, atol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_weights_are_distributions(self, seed):
        attn = make_attn(seed % 17)
        zc, sf = rand((4, D), seed), rand((7, D), seed + 1) * 3
        _, w = attn(zc, sf, return_weights=True)
        assert w.shape == (2, 4, 7)
        assert bool((w >= 0).all())
        torch.testing.assert_close(w.sum(-1), torch.ones(2, 4, dtype=torch.float64), rtol=0, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_key_value_permutation_invariance(self, seed):
        attn = make_attn(seed % 13)
        zc, sf = rand((4, D), seed), rand((8, D), seed + 1)
        perm = torch.randperm(8, generator=torch.Generator().manual_seed(seed))
        torch.testing.assert_close(attn(zc, sf[perm]), attn(zc, sf), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("n_frames", [1, 2, 13, 50])
    def test_output_length_follows_content(self, n_frames):
        attn = make_attn(0)
        assert attn(rand((6, D), 0), rand((n_frames, D), 1)).shape == (6, D)

    def test_batched_with_mask_matches_unbatched(self):
        attn = make_attn(3, positional=True)
        zc = rand((2, 4, D), 10)
        sf = rand((2, 9, D), 11)
        mask = torch.tensor([[True] * 9, [True] * 5 + [False] * 4])
        out = attn(zc, sf, key_mask=mask, key_pos=torch.stack([(torch.arange(9, dtype=torch.float64) + 0.5) / 9, (torch.arange(9, dtype=torch.float64) + 0.5) / 5]))
        torch.testing.assert_close(out[0], attn(zc[0], sf[0]), rtol=0, atol=1e-12)
        torch.testing.assert_close(out[1], attn(zc[1], sf[1, :5]), rtol=0, atol=1e-12)

    def test_positional_flag_breaks_permutation_invariance(self):
        attn = make_attn(5, positional=True)
        zc, sf = rand((4, D), 12), rand((8, D), 13)
        perm = torch.arange(7, -1, -1)
        assert not torch.allclose(attn(zc, sf[perm]), attn(zc, sf))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            make_attn(0)(rand((3, D), 0), rand((3, D + 1), 1))

    def test_heads_must_divide_width(self):
        with pytest.raises(DomainError):
            CrossAttention(10, 3)

    def test_empty_style(self):
        with pytest.raises(DomainError):
            make_attn(0)(rand((3, D), 0), torch.zeros(0, D, dtype=torch.float64))

    def test_gradient_check(self):
        attn = make_attn(21, positional=True)
        zc, sf = rand((5, D), 22), rand((7, D), 23)
        target = rand((5, D), 24)
        err = grad_check(attn, lambda: ((attn(zc, sf) - target) ** 2).mean(), fraction=1.0)
        assert err < 1e-4


class TestCombine:
    def bundle(self, u, s, n=4):
        return StyleBundle(u, rand((n, D), 99), s)

    def test_zero_globals(self):
        a = rand((5, D), 0)
        z = torch.zeros(D, dtype=torch.float64)
        torch.testing.assert_close(combine_multi_scale(a, self.bundle(z, z)), a, rtol=0, atol=0)

    def test_zero_aligned(self):
        u, s = rand((D,), 1), rand((D,), 2)
        out = combine_multi_scale(torch.zeros(3, D, dtype=torch.float64), self.bundle(u, s))
        torch.testing.assert_close(out, (u + s).expand(3, D), rtol=0, atol=0)

    def test_additivity(self):
        a, u1, u2 = rand((3, D), 3), rand((D,), 4), rand((D,), 5)
        z = torch.zeros(D, dtype=torch.float64)
        lhs = combine_multi_scale(a, self.bundle(u1 + u2, z))
        rhs = combine_multi_scale(combine_multi_scale(a, self.bundle(u1, z)), self.bundle(u2, z))
        torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-14)

    def test_batched(self):
        a = rand((2, 3, D), 6)
        u, s = rand((2, D), 7), rand((2, D), 8)
        out = combine_multi_scale(a, StyleBundle(u, rand((2, 4, D), 9), s))
        torch.testing.assert_close(out[1], a[1] + u[1] + s[1])

    def test_width_checks(self):
        with pytest.raises(ShapeError):
            StyleBundle(rand((D,), 0), rand((3, D + 1), 1), rand((D,), 2))
        with pytest.raises(ShapeError):
            combine_multi_scale(rand((3, D + 2), 0), self.bundle(rand((D,), 1), rand((D,), 2)))

    def test_non_finite_rejected(self):
        with pytest.raises(DomainError):
            StyleBundle(torch.full((D,), float("nan"), dtype=torch.float64), rand((3, D), 1), rand((D,), 2))
