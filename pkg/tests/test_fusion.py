import numpy as np
import pytest
import torch
import torch.nn.functional as F

from stnmamba import ShapeError
from stnmamba.fusion import STFB, STIM, ConcatFuse

from gradutil import fd_check


def tiny_stfb():
    torch.manual_seed(0)
    return STFB(4, expand=2, d_state=2).double()


def maps(rng, *shape):
    return torch.tensor(rng.standard_normal(shape))


def test_stfb_mixture_is_product_plus_sum(rng):
    m = tiny_stfb()
    Fs, Ft = maps(rng, 1, 3, 3, 4), maps(rng, 1, 3, 3, 4)
    Hmix, ns, nt = m.mix(Fs, Ft)
    Ds = m.dw_s(m.proj_s(F.layer_norm(Fs, (4,), m.norm_s.weight, m.norm_s.bias)))
    Dt = m.dw_t(m.proj_t(F.layer_norm(Ft, (4,), m.norm_t.weight, m.norm_t.bias)))
    torch.testing.assert_close(Hmix, Ds * Dt + Ds + Dt)


def test_stfb_output_composition(rng):
    m = tiny_stfb()
    Fs, Ft = maps(rng, 2, 3, 4, 4), maps(rng, 2, 3, 4, 4)
    Hmix, ns, nt = m.mix(Fs, Ft)
    s = m.scan_norm(m.ss2d(Hmix))
    mixed = m.out_proj(s * F.silu(m.gate_s(ns)) + s * F.silu(m.gate_t(nt))) + Fs + Ft
    torch.testing.assert_close(m(Fs, Ft), m.eca(mixed))


def test_stfb_with_zero_output_projection_reduces_to_eca_of_sum(rng):
    m = tiny_stfb()
    torch.nn.init.zeros_(m.out_proj.weight)
    torch.nn.init.zeros_(m.out_proj.bias)
    Fs, Ft = maps(rng, 1, 2, 2, 4), maps(rng, 1, 2, 2, 4)
    torch.testing.assert_close(m(Fs, Ft), m.eca(Fs + Ft))


def test_stfb_rejects_mismatched_streams(rng):
    with pytest.raises(ShapeError):
        tiny_stfb()(maps(rng, 1, 2, 2, 4), maps(rng, 1, 2, 3, 4))


def test_stfb_gradients(rng):
    m = tiny_stfb()
    Fs = maps(rng, 1, 3, 3, 4).requires_grad_()
    Ft = maps(rng, 1, 3, 3, 4).requires_grad_()
    w = maps(rng, 1, 3, 3, 4)
    err = fd_check(lambda: (m(Fs, Ft) * w).sum(), [Fs, Ft] + list(m.parameters()), n_probe=300)
    assert err < 1e-3


def test_concat_fuse(rng):
    m = ConcatFuse(4).double()
    Fs, Ft = maps(rng, 1, 2, 2, 4), maps(rng, 1, 2, 2, 4)
    torch.testing.assert_close(m(Fs, Ft), m.proj(torch.cat([Fs, Ft], -1)))


def stim(**kw):
    torch.manual_seed(0)
    return STIM((4, 8, 16, 32), (6, 5, 4, 3), expand=1, d_state=2, **kw).double()


def pyramid(rng):
    return [maps(rng, 1, 8 >> i, 8 >> i, 4 << i) for i in range(4)]


def test_stim_levels_and_banks(rng):
    m = stim()
    levels = m(pyramid(rng), pyramid(rng))
    assert [l.fused.shape[-1] for l in levels] == [4, 8, 16, 32]
    assert [l.bank.n_items for l in levels] == [6, 5, 4, 3]
    assert levels[2].queries.shape == (1, 4, 16)


def test_stim_bottleneck_only_passes_sum_through(rng):
    m = stim(fused_levels=(3,))
    S, T = pyramid(rng), pyramid(rng)
    levels = m(S, T)
    for i in range(3):
        assert torch.equal(levels[i].fused, S[i] + T[i]) and levels[i].bank is None
    assert levels[3].bank is not None and list(m.banks) == ["3"]


def test_stim_without_memory_has_no_banks(rng):
    m = stim(memory_levels=())
    levels = m(pyramid(rng), pyramid(rng))
    assert len(m.banks) == 0 and all(l.queries is None for l in levels)
    assert all(torch.equal(l.fused, l.raw) for l in levels)


def test_stim_write_after_forward(rng):
    m = stim().train()
    levels = m(pyramid(rng), pyramid(rng))
    before = {k: b.items.detach().clone() for k, b in m.banks.items()}
    m.write(levels)
    for k, b in m.banks.items():
        assert not torch.equal(b.items.detach(), before[k])
        torch.testing.assert_close(b.items.norm(dim=-1), torch.ones(b.n_items, dtype=torch.float64))


def test_stim_level_count_checked(rng):
    with pytest.raises(ShapeError):
        stim()(pyramid(rng)[:3], pyramid(rng)[:3])
