import numpy as np
import pytest

from flowcast import autodiff as ad
from flowcast import dsf as D
from flowcast import flow as F

from oracles import central_diff, grad_close
from test_flow import random_flow


def ends(*pts, T=3):
    """A set whose k-th trajectory sits at pts[k] for every step."""
    return np.stack([np.tile(np.asarray(p, dtype=float), (T, 1)) for p in pts])


def test_diversity_examples():
    assert D.diversity_loss(ends((0, 0), (3, 4)), (0, 40)) == 25
    assert D.diversity_loss(ends((0, 0), (1, 0), (5, 0)), (0, 40)) == 1
    assert D.diversity_loss(ends((0, 0), (9, 0)), (0, 40)) == 40
    with pytest.raises(ValueError):
        D.diversity_loss(ends((0, 0)), 40)


def test_mean_diversity_example():
    assert D.diversity_loss(ends((0, 0), (1, 0), (5, 0)), 40, agg="mean") == 14


def test_diversity_gradient_vanishes_above_clip():
    S = ends((0, 0), (9, 0))[None]
    g = ad.gradient(lambda L: D.diversity_graph(L["S"], 40.0).sum(), {"S": S})["S"]
    assert not g.any()
    g = ad.gradient(lambda L: D.diversity_graph(L["S"], 100.0).sum(), {"S": S})["S"]
    assert g[0, 1, -1, 0] == pytest.approx(18.0)


def identity_set(K=2, T=8):
    z = np.zeros((K, T, 2))
    return F.PredictionSet(np.zeros((K, T, 2)), z, np.zeros((2, 2)))


def test_nll_set_examples():
    p = F.zero_flow_params()
    obs = np.zeros((2, 2))
    assert D.nll_set_loss(identity_set(2), obs, p) == pytest.approx(2 * 16 * 0.5 * np.log(2 * np.pi))
    one = identity_set(1)
    assert D.nll_set_loss(one, obs, p) == pytest.approx(-F.log_likelihood(one.trajectories[0], obs, p))
    rng = np.random.default_rng(0)
    S = rng.normal(size=(2, 8, 2))
    s1 = F.PredictionSet(S, S, obs)
    s2 = F.PredictionSet(np.concatenate([S, S]), np.concatenate([S, S]), obs)
    assert D.nll_set_loss(s2, obs, p) == pytest.approx(2 * D.nll_set_loss(s1, obs, p))


def test_objective_examples(monkeypatch):
    cfg = D.DsfConfig(lambda_d=1.0, clip=40.0)
    monkeypatch.setattr(D, "nll_set_loss", lambda *a: 10.0)
    s = F.PredictionSet(ends((0, 0), (3, 4)), ends((0, 0), (3, 4)), None)
    assert D.dsf_objective(s, None, None, cfg) == -15
    assert D.dsf_objective(s, None, None, D.DsfConfig(lambda_d=1.0, use_likelihood=False)) == -25
    s3 = F.PredictionSet(ends((0, 0), (1, 0), (5, 0)), ends((0, 0), (1, 0), (5, 0)), None)
    assert D.dsf_objective(s3, None, None, D.DsfConfig(K=3, diversity_agg="mean", use_likelihood=False)) == -14


def test_config_rejects_invalid_variants():
    for bad in ({"lambda_d": -1}, {"clip": 0}, {"diversity_agg": "max"}, {"likelihood_term": "elbo"}):
        with pytest.raises(ValueError):
            D.DsfConfig(**bad)


def test_reconstruction_variant_needs_futures():
    cfg = D.DsfConfig(likelihood_term="dlow_rec")
    with pytest.raises(ValueError):
        D.dsf_objective(identity_set(), np.zeros((2, 2)), F.zero_flow_params(), cfg)


def test_zero_trunk_gives_identical_heads():
    flow = random_flow(2)
    params = D.init_dsf_params(16 + flow.hidden, 3, 8)
    params = D.DsfParams({k: np.zeros_like(v) for k, v in params.weights.items()}, 3, 8)
    s = D.dsf_heads(np.ones((8, 2)), np.zeros((2, 2)), params, flow)
    assert len(s) == 3 and not s.latents.any()
    assert np.array_equal(s.trajectories[0], s.trajectories[2])


def test_heads_decode_through_the_flow_and_are_deterministic():
    flow = random_flow(4)
    params = D.init_dsf_params(16 + flow.hidden, 2, 8, seed=1)
    obs = np.array([[0.0, -3.5], [0.0, 0.0]])
    eps = np.random.default_rng(0).normal(size=(8, 2))
    a, b = D.dsf_heads(eps, obs, params, flow), D.dsf_heads(eps, obs, params, flow)
    assert a.trajectories.tobytes() == b.trajectories.tobytes()
    for k in range(2):
        np.testing.assert_allclose(a.trajectories[k], F.flow_forward(a.latents[k], obs, flow), atol=1e-12)
    assert len(D.predict(params, flow, obs, seed=3)) == 2


def test_graph_nll_matches_flow_likelihood():
    flow = random_flow(5)
    params = D.init_dsf_params(16 + flow.hidden, 2, 8, seed=2)
    hist = np.random.default_rng(1).normal(size=(3, 2, 2))
    eps = np.random.default_rng(2).normal(size=(3, 8, 2))
    g = D.heads_graph(D.as_tensors_dsf(params), params, flow, eps, hist)
    nll = D.nll_graph(g.latents, g.logdet).numpy()
    S = g.trajectories.numpy()
    for b in range(3):
        ref = -sum(F.log_likelihood(S[b, k], hist[b], flow) for k in range(2))
        assert nll[b] == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("variant", [{}, {"diversity_agg": "mean"}, {"use_likelihood": False},
                                     {"likelihood_term": "dlow_rec"}])
def test_objective_gradient_matches_finite_differences(variant):
    flow = random_flow(6, hidden=4, horizon=2)
    params = D.init_dsf_params(4 + flow.hidden, 2, 2, seed=3)
    cfg = D.DsfConfig(K=2, lambda_d=1.0, clip=1e6, **variant)
    rng = np.random.default_rng(7)
    hist, eps, gt = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))

    def graph(L):
        return D.objective_graph(D.heads_graph(L, params, flow, eps, hist), cfg, gt).objective

    g = ad.gradient(graph, params.weights)
    num = central_diff(lambda w: ad.evaluate(graph, w)["out"].item(), params.weights, sample=12)
    for k in params.weights:
        assert grad_close(g[k], num[k]), k


def test_batch_training_freezes_flow_and_is_deterministic():
    flow = random_flow(7, hidden=8)
    before = flow.digest()
    obs = np.random.default_rng(0).normal(size=(16, 2, 2))
    cfg = D.DsfConfig(K=2, epochs=2, batch_size=8)
    a, trace = D.train_dsf_batch(flow, obs, cfg, seed=4)
    b, _ = D.train_dsf_batch(flow, obs, cfg, seed=4)
    assert flow.digest() == before
    assert a.digest() == b.digest()
    assert len(trace) == 4 and {"iteration", "objective", "nll_term", "diversity_term"} <= set(trace[0])


def test_batch_training_calls_monitor():
    flow = random_flow(7, hidden=8)
    obs = np.random.default_rng(0).normal(size=(8, 2, 2))
    seen = []
    _, trace = D.train_dsf_batch(flow, obs, D.DsfConfig(epochs=2, batch_size=4), seed=0,
                                 monitor=lambda it, p: seen.append(it) or {"probe": it}, monitor_every=2)
    assert seen == [0, 2, 4] and trace[0] == {"iteration": 0, "probe": 0}


def test_transductive_defaults_and_set_size():
    assert D.DsfConfig().iterations == 400
    flow = random_flow(8, hidden=8)
    obs = np.array([[0.0, -3.5], [0.0, 0.0]])
    s, trace = D.train_dsf_transductive(flow, obs, D.DsfConfig(K=3, iterations=5), seed=1, return_trace=True)
    assert len(s) == 3 and len(trace) == 5
    many = D.train_dsf_transductive(flow, np.stack([obs, obs + 1]), D.DsfConfig(K=2, iterations=3), seed=1)
    assert len(many) == 2 and all(len(x) == 2 for x in many)


def test_transductive_sums_over_observations():
    flow = random_flow(9, hidden=4, horizon=2)
    params = D.init_dsf_params(4 + flow.hidden, 2, 2, seed=0)
    hist = np.random.default_rng(0).normal(size=(3, 2, 2))
    eps = np.random.default_rng(1).normal(size=(3, 2, 2))
    g = D.heads_graph(D.as_tensors_dsf(params), params, flow, eps, hist)
    cfg = D.DsfConfig()
    total = D.objective_graph(g, cfg, reduce="sum").objective.item()
    assert total == pytest.approx(3 * D.objective_graph(g, cfg).objective.item())
