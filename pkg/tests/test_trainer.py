import copy

import pytest
import torch

from conftest import tiny_config
from gradcheck_utils import relative_error, term_functions
from postad.errors import DataError
from postad.trainer import (GRAPH, MAXIMIZE, MINIMIZE, PHASES, fit, init_state,
                            loss_reconstruction, parameter_roles, phase_loss, phase_terms,
                            phase_update_set, trainable_only, training_step)

PARTNERS = torch.tensor([1, 2, 3, 0])


def test_loss_reconstruction_is_squared_frobenius():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert loss_reconstruction(x, x + 0.5).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        loss_reconstruction(x, x[:1])
    assert loss_reconstruction(x, x).item() == 0
    assert loss_reconstruction(torch.zeros(2, 2), x).item() == 30
    assert loss_reconstruction(torch.zeros(2, 2), 3 * x).item() == pytest.approx(9 * 30)


def test_step_without_adversarial_weights_reduces_reconstruction(tiny_series, tiny_batch):
    cfg = tiny_config(alpha=0.0, beta=0.0, gamma=0.0, xi=0.0, lr=1e-5, inner_iters=1)
    state = init_state(4, cfg, tiny_series)

    def rec():
        with torch.no_grad():
            return float(((state.model(tiny_batch).reconstruction - tiny_batch) ** 2).sum())

    before = rec()
    training_step(state, tiny_batch, graph_phase=False)
    assert rec() < before


@pytest.mark.parametrize("term", ["rec", "alpha_assdis_t", "beta_assdis_s", "gamma_smooth", "xi_triplet"])
def test_term_gradients_match_finite_differences(tiny_model, tiny_batch, tiny_cfg, term):
    fn = term_functions(tiny_cfg, PARTNERS)[term]
    err, scale = relative_error(tiny_model, fn, tiny_batch)
    assert scale > 0
    assert err < 1e-4


def test_parameter_roles(tiny_model):
    roles = parameter_roles(tiny_model)
    assert roles["layers.0.saga.graph_logits"] == "graph"
    assert roles["layers.0.tasa.bandwidth.weight"] == "prior"
    assert roles["layers.0.saga.temperature.bias"] == "prior"
    assert roles["layers.0.tasa.query.weight"] == "network"
    assert set(roles.values()) == {"graph", "prior", "network"}
    assert phase_update_set(tiny_model, GRAPH) == {"layers.0.saga.graph_logits"}
    assert "layers.0.tasa.bandwidth.weight" not in phase_update_set(tiny_model, MINIMIZE)
    assert "layers.0.tasa.bandwidth.weight" in phase_update_set(tiny_model, MAXIMIZE)


@pytest.mark.parametrize("phase", PHASES)
def test_parameters_outside_update_set_get_no_gradient(tiny_model, tiny_batch, tiny_cfg, phase):
    names = phase_update_set(tiny_model, phase)
    tiny_model.zero_grad(set_to_none=True)
    with trainable_only(tiny_model, names):
        phase_loss(tiny_model, tiny_batch, tiny_cfg, phase, PARTNERS).backward()
    for name, p in tiny_model.named_parameters():
        if name in names:
            assert p.grad is not None and torch.any(p.grad != 0), name
        else:
            assert p.grad is None or torch.all(p.grad == 0), name
    # requires_grad flags are restored afterwards
    assert all(p.requires_grad for p in tiny_model.parameters())


def _term_grads(model, batch, cfg, phase, term):
    terms = phase_terms(model, batch, cfg, phase, PARTNERS)
    named = dict(model.named_parameters())
    grads = torch.autograd.grad(terms[term], list(named.values()), allow_unused=True)
    return {n: g for n, g in zip(named, grads)}


def test_minimize_alpha_term_stops_prior_path(tiny_model, tiny_batch, tiny_cfg):
    grads = _term_grads(tiny_model, tiny_batch, tiny_cfg, MINIMIZE, "assdis_t")
    for name in ("layers.0.tasa.bandwidth.weight", "layers.0.tasa.bandwidth.bias"):
        assert grads[name] is None or torch.all(grads[name] == 0)
    assert torch.any(grads["layers.0.tasa.query.weight"] != 0)


def test_maximize_alpha_term_stops_series_path(tiny_model, tiny_batch, tiny_cfg):
    grads = _term_grads(tiny_model, tiny_batch, tiny_cfg, MAXIMIZE, "assdis_t")
    for name in ("layers.0.tasa.query.weight", "layers.0.tasa.key.weight", "layers.0.tasa.value.weight"):
        assert grads[name] is None or torch.all(grads[name] == 0), name
    assert torch.any(grads["layers.0.tasa.bandwidth.weight"] != 0)


def test_phase_signs(tiny_model, tiny_batch, tiny_cfg):
    mini = phase_terms(tiny_model, tiny_batch, tiny_cfg, MINIMIZE, PARTNERS)
    maxi = phase_terms(tiny_model, tiny_batch, tiny_cfg, MAXIMIZE)
    assert mini["assdis_t"] < 0 < maxi["assdis_t"]
    assert mini["assdis_s"] < 0 < maxi["assdis_s"]
    torch.testing.assert_close(-mini["assdis_t"], maxi["assdis_t"])
    graph = phase_terms(tiny_model, tiny_batch, tiny_cfg, GRAPH)
    assert set(graph) == {"rec", "assdis_s", "smooth", "total"}
    with pytest.raises(ValueError):
        phase_terms(tiny_model, tiny_batch, tiny_cfg, "other")


def test_ablations_drop_spatial_terms(tiny_batch, tiny_series):
    for ablation in ("no-assdis-s", "no-saga"):
        cfg = tiny_config().with_ablation(ablation)
        state = init_state(4, cfg, tiny_series)
        terms = phase_terms(state.model, tiny_batch, cfg, MINIMIZE, PARTNERS)
        assert "assdis_s" not in terms
    plain = tiny_config(sparsity="plain")
    state = init_state(4, plain, tiny_series)
    assert "l1" in phase_terms(state.model, tiny_batch, plain, GRAPH)


def test_training_step_runs_all_phases(tiny_series):
    state = init_state(4, tiny_config(), tiny_series)
    before = state.model.layers[0].saga.graph_logits.detach().clone()
    metrics = training_step(state, tiny_series[:32].reshape(4, 8, 4))
    assert set(metrics) == set(PHASES)
    assert not torch.equal(before, state.model.layers[0].saga.graph_logits)
    with pytest.raises(DataError):
        training_step(state, tiny_series[:8].reshape(1, 8, 4))


def test_frozen_graph_is_untouched(tiny_series):
    state = init_state(4, tiny_config(freeze_graph=True), tiny_series)
    before = state.model.layers[0].saga.graph_logits.detach().clone()
    training_step(state, tiny_series[:32].reshape(4, 8, 4))
    assert torch.equal(before, state.model.layers[0].saga.graph_logits)


def test_zero_epochs_leaves_state_unchanged(tiny_series):
    state = init_state(4, tiny_config(epochs=0), tiny_series)
    weights = copy.deepcopy(state.model.state_dict())
    fit(state, tiny_series[:160].reshape(-1, 8, 4))
    assert state.epoch == 0 and state.log == []
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, weights[k])


def test_fit_logs_epoch_records(tiny_series):
    seen = []
    state = init_state(4, tiny_config(epochs=2), tiny_series)
    fit(state, tiny_series[:160].reshape(-1, 8, 4), tiny_series[160:].reshape(-1, 8, 4), callback=seen.append)
    epochs = [r for r in seen if r["phase"] == "epoch"]
    assert [r["epoch"] for r in epochs] == [1, 2]
    for key in ("rec", "val_rec", "assdis_t", "assdis_s", "graph_l1", "clip_events"):
        assert key in epochs[0]
    assert seen == state.log
    assert all(r["graph_l1"] > 0 for r in epochs)


def test_fit_rejects_wrong_shapes(tiny_series):
    state = init_state(4, tiny_config(), tiny_series)
    with pytest.raises(DataError):
        fit(state, tiny_series[:160, :3].reshape(-1, 8, 3))


def test_fit_is_deterministic(tiny_series):
    runs = []
    for _ in range(2):
        state = init_state(4, tiny_config(epochs=2), tiny_series)
        fit(state, tiny_series[:160].reshape(-1, 8, 4))
        runs.append(torch.cat([p.detach().reshape(-1) for p in state.model.parameters()]))
    assert torch.equal(runs[0], runs[1])


@pytest.mark.slow
def test_adversarial_enlargement_of_temporal_discrepancy():
    """Mean AssDis_t on normal training windows is non-decreasing over 3 epochs (toy data, desk scale)."""
    from postad.benchgen import BenchConfig, generate
    from postad.config import desk_config
    from postad.datastore import fit_norm_stats, normalize

    failures = []
    for seed in range(3):
        bench = generate(BenchConfig(seed=seed))
        x = normalize(bench.train, fit_norm_stats(bench.train))
        state = init_state(5, desk_config(epochs=3, seed=seed), x)
        fit(state, x[: len(x) // 50 * 50].reshape(-1, 50, 5))
        values = [r["assdis_t"] for r in state.log if r["phase"] == "epoch"]
        if not all(b >= a for a, b in zip(values, values[1:])):
            failures.append((seed, [round(v, 3) for v in values]))
    assert not failures, failures


def test_early_stopping_restores_best(tiny_series):
    cfg = tiny_config(epochs=6, patience=1, lr=0.05)
    state = init_state(4, cfg, tiny_series)
    val = tiny_series[160:].reshape(-1, 8, 4)
    fit(state, tiny_series[:160].reshape(-1, 8, 4), val)
    records = [r for r in state.log if r["phase"] == "epoch"]
    best = min(r["val_rec"] for r in records)
    model = state.model
    model.eval()
    with torch.no_grad():
        v = torch.as_tensor(val)
        rec = float(((model(v).reconstruction - v) ** 2).sum()) / len(v)
    assert rec == pytest.approx(best, rel=1e-9)
