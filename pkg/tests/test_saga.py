import numpy as np
import pytest
import torch
import torch.nn.functional as F

from postad.assoc import sym_kl
from postad.errors import NumericalError
from postad.saga import (SpatialAnomalyGraphAttention, assdis_s, channel_similarity, identity_init,
                         knn_init, posterior)


def test_channel_similarity_abs_pearson():
    t = np.linspace(0, 6, 100)
    x = np.stack([np.sin(t), -2 * np.sin(t), np.cos(t), np.ones_like(t)], axis=1)
    sim = channel_similarity(x)
    assert sim[0, 1] == pytest.approx(1.0)
    assert sim[0, 2] == pytest.approx(abs(np.corrcoef(x[:, 0], x[:, 2])[0, 1]))
    np.testing.assert_array_equal(sim[3], 0.0)


def test_knn_init_picks_most_correlated():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(500, 2))
    x = np.column_stack([base[:, 0], base[:, 0] + 0.1 * rng.normal(size=500),
                         base[:, 1], base[:, 1] + 0.1 * rng.normal(size=500)])
    g = knn_init(x, k=1, c0=2.0)
    want = np.full((4, 4), -2.0)
    for i, j in [(0, 1), (1, 0), (2, 3), (3, 2)]:
        want[i, j] = 2.0
    np.fill_diagonal(want, 2.0)
    np.testing.assert_array_equal(g, want)
    with pytest.raises(ValueError):
        knn_init(x, k=4)


def test_identity_init():
    g = identity_init(3, 1.5)
    np.testing.assert_array_equal(g, np.where(np.eye(3), 1.5, -1.5))


def test_posterior_reweights_and_normalizes():
    g = torch.tensor([[1.0, 0.5], [0.2, 0.2]], dtype=torch.float64)
    a = torch.tensor([[0.5, 0.5], [0.25, 0.75]], dtype=torch.float64)
    post = posterior(g, a)
    torch.testing.assert_close(post, torch.tensor([[2 / 3, 1 / 3], [0.25, 0.75]], dtype=torch.float64))
    with pytest.raises(NumericalError):
        posterior(torch.zeros(2, 2), a)


@pytest.fixture
def layer():
    torch.manual_seed(0)
    m = SpatialAnomalyGraphAttention(8, 4, 6).double()
    m.set_graph(np.where(np.eye(4), 2.0, -1.0))
    return m


def test_forward_matches_reference_computation(layer):
    x = torch.randn(2, 6, 8, dtype=torch.float64)
    out, sp = layer(x)
    h = (x @ layer.to_channels.weight.T).transpose(1, 2)
    theta = layer.attn_vector
    e = torch.empty(2, 4, 4, dtype=torch.float64)
    for i in range(4):
        for j in range(4):
            e[:, i, j] = F.leaky_relu(h[:, i] @ theta[:6] + h[:, j] @ theta[6:], 0.2)
    a = torch.softmax(e, -1)
    torch.testing.assert_close(sp.observation, a)
    g = torch.sigmoid(layer.graph_logits)
    post = g * a / (g * a).sum(-1, keepdim=True)
    torch.testing.assert_close(sp.posterior, post)
    torch.testing.assert_close(out, (post @ h).transpose(1, 2) @ layer.from_channels.weight.T)
    tau = torch.sigmoid(layer.temperature(h)).squeeze(-1)
    torch.testing.assert_close(sp.tau, tau)
    torch.testing.assert_close(sp.prior, torch.softmax(layer.graph_logits / tau.unsqueeze(-1), -1))


def test_rows_are_distributions(layer):
    _, sp = layer(torch.randn(3, 6, 8, dtype=torch.float64) * 4)
    for dist in (sp.observation, sp.posterior, sp.prior):
        torch.testing.assert_close(dist.sum(-1), torch.ones(3, 4, dtype=torch.float64))
    assert torch.all(sp.tau > 0) and torch.all(sp.tau < 1)


def test_assdis_s_layer_mean_and_zero():
    torch.manual_seed(3)
    mk = lambda: torch.softmax(torch.randn(2, 3, 3, dtype=torch.float64), -1)
    g, a = [mk(), mk()], [mk(), mk()]
    torch.testing.assert_close(assdis_s(g, a), (sym_kl(g[0], a[0]) + sym_kl(g[1], a[1])) / 2)
    assert torch.all(assdis_s(g, g) == 0)
    with pytest.raises(ValueError):
        assdis_s(g, a[:1])
