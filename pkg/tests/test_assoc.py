import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from postad.assoc import (EPS_FLOOR, gaussian_kernel_rows, rescale_rows, row_softmax,
                          sinusoidal_table, sym_kl)

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def test_sinusoidal_table_matches_closed_form():
    table = sinusoidal_table(6, 4).numpy()
    for i in range(6):
        for k in range(2):
            w = 1.0 / 10000 ** (2 * k / 4)
            assert table[i, 2 * k] == pytest.approx(math.sin(i * w), abs=1e-15)
            assert table[i, 2 * k + 1] == pytest.approx(math.cos(i * w), abs=1e-15)


def test_sinusoidal_table_first_row():
    table = sinusoidal_table(3, 6).numpy()
    np.testing.assert_array_equal(table[0, 0::2], 0.0)
    np.testing.assert_array_equal(table[0, 1::2], 1.0)


@pytest.mark.parametrize("n,d", [(0, 4), (4, 3), (4, 0)])
def test_sinusoidal_table_rejects_bad_shapes(n, d):
    with pytest.raises(ValueError):
        sinusoidal_table(n, d)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 7), elements=finite))
def test_row_softmax_rows_sum_to_one(logits):
    p = row_softmax(logits)
    assert torch.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1).numpy(), 1.0, atol=1e-12)


def test_row_softmax_example_values():
    p = row_softmax([[0.0, math.log(3.0)]])
    np.testing.assert_allclose(p.numpy(), [[0.25, 0.75]], atol=1e-15)


def test_row_softmax_per_row_temperature_sharpens():
    logits = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    p = row_softmax(logits, torch.tensor([1.0, 0.1], dtype=torch.float64))
    assert p[1, 0] > p[0, 0]
    assert p[0, 0].item() == pytest.approx(1 / (1 + math.exp(-1)))


def test_row_softmax_rejects_nonfinite_and_bad_temperature():
    with pytest.raises(ValueError):
        row_softmax([[0.0, float("nan")]])
    with pytest.raises(ValueError):
        row_softmax([[0.0, 1.0]], temperature=0.0)


def test_rescale_rows():
    out = rescale_rows([[1.0, 3.0], [2.0, 2.0]])
    np.testing.assert_allclose(out.numpy(), [[0.25, 0.75], [0.5, 0.5]])
    with pytest.raises(ValueError):
        rescale_rows([[0.0, 0.0]])
    with pytest.raises(ValueError):
        rescale_rows([[-1.0, 2.0]])


def _simplex(rng, shape):
    x = rng.gamma(1.0, size=shape)
    return torch.as_tensor(x / x.sum(-1, keepdims=True))


def test_sym_kl_matches_two_kl_terms():
    rng = np.random.default_rng(1)
    p, q = _simplex(rng, (5, 6)), _simplex(rng, (5, 6))
    kl = lambda a, b: (a * (a.log() - b.log())).sum(-1)
    torch.testing.assert_close(sym_kl(p, q), kl(p, q) + kl(q, p))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_sym_kl_nonnegative_symmetric_and_zero_on_equal(seed):
    rng = np.random.default_rng(seed)
    p, q = _simplex(rng, (4, 5)), _simplex(rng, (4, 5))
    d = sym_kl(p, q)
    assert torch.all(d >= 0)
    torch.testing.assert_close(d, sym_kl(q, p))
    assert torch.all(sym_kl(p, p) == 0)


def test_sym_kl_clamps_zero_probabilities():
    d = sym_kl([1.0, 0.0], [0.0, 1.0])
    assert torch.isfinite(d)
    assert d.item() == pytest.approx(2 * (1 - EPS_FLOOR) * (math.log(1) - math.log(EPS_FLOOR)), rel=1e-6)


def test_gaussian_kernel_rows_values():
    sigma = torch.tensor([1.0, 2.0, 0.5], dtype=torch.float64)
    k = gaussian_kernel_rows(sigma, 3).numpy()
    for i in range(3):
        for j in range(3):
            s = sigma[i].item()
            want = math.exp(-((i - j) ** 2) / (2 * s * s)) / (math.sqrt(2 * math.pi) * s)
            assert k[i, j] == pytest.approx(want, rel=1e-14)
