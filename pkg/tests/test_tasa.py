import numpy as np
import pytest
import torch

from postad.assoc import sinusoidal_table, sym_kl
from postad.errors import NumericalError
from postad.tasa import (SIGMA_MIN, TemporalAnomalyAttention, apply_dpe, assdis_t, check_finite,
                         gaussian_prior, sample_partners, triplet_reg)


@pytest.fixture
def attn():
    torch.manual_seed(0)
    return TemporalAnomalyAttention(8, 2, 10).double()


def test_forward_shapes_and_rows(attn):
    x = torch.randn(3, 10, 8, dtype=torch.float64)
    out, assoc = attn(x, sinusoidal_table(10, 8))
    assert out.shape == (3, 10, 8)
    assert assoc.series.shape == assoc.prior.shape == (3, 2, 10, 10)
    assert assoc.sigma.shape == (3, 2, 10)
    for dist in (assoc.series, assoc.prior):
        torch.testing.assert_close(dist.sum(-1), torch.ones(3, 2, 10, dtype=torch.float64))
    assert torch.all(assoc.sigma >= SIGMA_MIN) and torch.all(assoc.sigma <= 5.0)


def test_value_branch_is_position_free(attn):
    """With the table on, shifting the table changes attention but values are
    computed from the raw input: identical attention gives identical output."""
    x = torch.randn(1, 10, 8, dtype=torch.float64)
    table = sinusoidal_table(10, 8)
    with torch.no_grad():
        attn.query.weight.zero_()
        attn.query.bias.zero_()
        attn.bandwidth.weight.zero_()
    out_a, a = attn(x, table)
    out_b, b = attn(x, 3.0 * table)
    # zero query -> uniform attention whatever the table; values ignore the table
    torch.testing.assert_close(a.series, b.series)
    torch.testing.assert_close(out_a, out_b)


def test_dpe_changes_query_key_path(attn):
    x = torch.randn(1, 10, 8, dtype=torch.float64)
    _, a = attn(x, sinusoidal_table(10, 8))
    _, b = attn(x, None)
    assert not torch.allclose(a.series, b.series)


def test_apply_dpe_shape_check():
    with pytest.raises(ValueError):
        apply_dpe(torch.zeros(2, 5, 4), torch.zeros(6, 4))


def test_gaussian_prior_peaks_on_diagonal():
    p = gaussian_prior(torch.full((6,), 1.0, dtype=torch.float64), 6)
    assert torch.all(p.argmax(-1) == torch.arange(6))
    torch.testing.assert_close(p.sum(-1), torch.ones(6, dtype=torch.float64))
    with pytest.raises(ValueError):
        gaussian_prior(torch.zeros(6), 6)


def test_assdis_t_is_head_then_layer_mean():
    torch.manual_seed(1)
    mk = lambda: torch.softmax(torch.randn(2, 3, 4, 4, dtype=torch.float64), -1)
    priors, series = [mk(), mk()], [mk(), mk()]
    got = assdis_t(priors, series)
    want = sum(sym_kl(p, s).mean(1) for p, s in zip(priors, series)) / 2
    assert got.shape == (2, 4)
    torch.testing.assert_close(got, want)
    assert torch.all(assdis_t(priors, priors) == 0)
    with pytest.raises(ValueError):
        assdis_t(priors, series[:1])


def test_sample_partners_never_self():
    gen = torch.Generator().manual_seed(0)
    for b in (2, 3, 17):
        for _ in range(50):
            p = sample_partners(b, gen)
            assert torch.all(p != torch.arange(b))
            assert torch.all((p >= 0) & (p < b))
    with pytest.raises(ValueError):
        sample_partners(1)


def test_triplet_reg_matches_hand_computation():
    torch.manual_seed(2)
    s = torch.softmax(torch.randn(3, 2, 4, 4, dtype=torch.float64), -1)
    partners = torch.tensor([1, 2, 0])
    agg = s.mean(-2)
    total = 0.0
    for b in range(3):
        for h in range(2):
            intra = sym_kl(agg[b, h], agg[b, 1 - h])
            inter = sym_kl(agg[b, h], agg[partners[b], h])
            total += max(0.0, 0.1 + intra.item() - inter.item())
    assert triplet_reg([s], 0.1, partners).item() == pytest.approx(total / 6, rel=1e-12)


def test_triplet_reg_guards():
    s = torch.softmax(torch.randn(2, 2, 3, 3), -1)
    with pytest.raises(ValueError):
        triplet_reg([s], partners=torch.tensor([0, 0]))
    with pytest.raises(ValueError):
        triplet_reg([s[:1]])
    with pytest.raises(ValueError):
        triplet_reg([s[:, :1]])


def test_check_finite_raises_numerical():
    with pytest.raises(NumericalError):
        check_finite("x", torch.tensor([1.0, float("inf")]))
    assert np.isfinite(check_finite("x", torch.ones(2)).numpy()).all()
