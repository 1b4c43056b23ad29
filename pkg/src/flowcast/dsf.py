"""Diversity sampling on top of a frozen flow.

A small MLP maps one Gaussian noise draw (plus the flow's observation
encoding) to K latents at once.  Decoding them through the flow gives a set of
K trajectories, and the network is trained so that every trajectory is
likely under the flow while the closest pair of endpoints stays far apart.

Gradients reach the sampler through the flow's forward pass; the flow
weights enter the graph as constants and are never updated.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flow import (FlowParams, PredictionSet, TrainingDiverged, as_tensors, encode_graph, forward_graph,
                   gaussian_logpdf_sum)

VARIANT_TERMS = ("nll", "dlow_rec")


@dataclass
class DsfConfig:
    K: int = 2
    lambda_d: float = 1.0
    clip: float = 40.0
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 8
    iterations: int = 400          # transductive adaptation steps
    use_likelihood: bool = True
    diversity_agg: str = "min"     # "min" | "mean"
    likelihood_term: str = "nll"   # "nll" | "dlow_rec"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.lambda_d < 0:
            raise ValueError("lambda_d must be non-negative")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.diversity_agg not in ("min", "mean"):
            raise ValueError(f"unknown diversity aggregation {self.diversity_agg!r}")
        if self.likelihood_term not in VARIANT_TERMS:
            raise ValueError(f"unknown likelihood term {self.likelihood_term!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DsfParams:
    weights: dict[str, np.ndarray]
    K: int
    horizon: int

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


def init_dsf_params(in_dim: int, K: int, horizon: int, seed: int = 0, out_per_head: int | None = None) -> DsfParams:
    rng = np.random.default_rng(seed)
    out = (out_per_head or 2 * horizon) * K
    sizes = [(in_dim, 64), (64, 32), (32, out)]
    w = {}
    for i, (a, b) in enumerate(sizes, start=1):
        bound = 1.0 / math.sqrt(a)
        w[f"w{i}"] = rng.uniform(-bound, bound, (a, b))
        w[f"b{i}"] = rng.uniform(-bound, bound, (b,))
    return DsfParams(w, K, horizon)


def trunk_graph(W, x: Tensor) -> Tensor:
    h = (x @ W["w1"] + W["b1"]).relu()
    h = (h @ W["w2"] + W["b2"]).relu()
    return h @ W["w3"] + W["b3"]


def _batch(obs, eps=None):
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
        if eps is not None:
            eps = np.asarray(eps, dtype=float)[None]
    return obs, eps, single


@dataclass
class SetGraph:
    """Tensor-level outputs of the sampler for a batch of B observations."""

    latents: Tensor       # (B, K, T, 2)
    trajectories: Tensor  # (B, K, T, 2)
    logdet: Tensor        # (B, K)


def heads_graph(W, params: DsfParams, flow: FlowParams, eps: np.ndarray, hist: np.ndarray,
                flow_W=None) -> SetGraph:
    B, K, T = len(hist), params.K, params.horizon
    flow_W = flow_W if flow_W is not None else as_tensors(flow)
    feat = encode_graph(flow_W, flow.norm, hist)
    x = ad.concat([Tensor(eps.reshape(B, -1)), feat], axis=1)
    Z = trunk_graph(W, x).reshape(B, K, T, 2)
    return decode_set(flow_W, flow, Z, hist, feat)


def decode_set(flow_W, flow: FlowParams, Z: Tensor, hist: np.ndarray, feat: Tensor) -> SetGraph:
    """Push (B, K, T, 2) latents through the flow, reusing the per-observation encodings."""
    B, K, T = Z.shape[:3]
    rep = np.repeat(np.arange(B), K)
    S, logdet = forward_graph(flow_W, flow, Z.reshape(B * K, T, 2), hist[rep], h0=feat[rep])
    return SetGraph(Z, S.reshape(B, K, T, 2), logdet.reshape(B, K))


def dsf_heads(eps, obs, params: DsfParams, flow: FlowParams) -> PredictionSet | list[PredictionSet]:
    """Map one noise draw per observation to a set of K latents and trajectories."""
    obs, eps, single = _batch(obs, eps)
    g = heads_graph(as_tensors_dsf(params), params, flow, eps, obs)
    Z, S = g.latents.numpy(), g.trajectories.numpy()
    sets = [PredictionSet(S[b], Z[b], obs[b]) for b in range(len(obs))]
    return sets[0] if single else sets


def as_tensors_dsf(params: DsfParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.weights.items()}


# -- losses --------------------------------------------------------------------------------

def pair_index(K: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(combinations(range(K), 2))
    return np.array([p[0] for p in pairs], dtype=int), np.array([p[1] for p in pairs], dtype=int)


def diversity_graph(S: Tensor, clip: float, agg: str = "min") -> Tensor:
    """Clipped min (or mean) squared endpoint distance over pairs, per set. S is (B, K, T, 2)."""
    K = S.shape[1]
    if K < 2:
        raise ValueError("diversity needs K >= 2")
    I, J = pair_index(K)
    end = S[:, :, -1]
    d = (end[:, I] - end[:, J]).sqnorm(axis=-1)          # (B, P)
    d = d.min(axis=1) if agg == "min" else d.mean(axis=1)
    return d.clip(0.0, clip)


def nll_graph(Z: Tensor, logdet: Tensor) -> Tensor:
    """Negated sum of flow log-likelihoods of the K decoded trajectories, per set.

    The flow's inverse of a decoded trajectory returns the latent exactly, so
    log p(S_k) = log N(Z_k) - sum logsig along the forward pass.
    """
    B, K = logdet.shape
    T = Z.shape[2]
    ll = gaussian_logpdf_sum(Z.reshape(B * K, T, 2)).reshape(B, K) - logdet
    return -ll.sum(axis=1)


def rec_kl_graph(Z: Tensor, S: Tensor, gt: np.ndarray) -> Tensor:
    """Reconstruction (best head) plus unit-variance KL of each head latent, per set."""
    B, K = S.shape[:2]
    err = (S - Tensor(gt[:, None])).reshape(B, K, -1).sqnorm(axis=-1)   # (B, K)
    kl = Z.reshape(B, K, -1).sqnorm(axis=-1).sum(axis=1) * 0.5
    return err.min(axis=1) + kl


@dataclass
class ObjectiveTerms:
    objective: Tensor        # scalar, mean (or sum) over the batch
    likelihood: Tensor       # (B,)
    diversity: Tensor        # (B,)


def objective_graph(g: SetGraph, config: DsfConfig, gt: np.ndarray | None = None,
                    reduce: str = "mean") -> ObjectiveTerms:
    B = g.logdet.shape[0]
    zero = Tensor(np.zeros(B))
    if config.use_likelihood:
        if config.likelihood_term == "nll":
            like = nll_graph(g.latents, g.logdet)
        else:
            if gt is None:
                raise ValueError("the reconstruction variant needs ground-truth futures")
            like = rec_kl_graph(g.latents, g.trajectories, gt)
    else:
        like = zero
    div = diversity_graph(g.trajectories, config.clip, config.diversity_agg) if config.K >= 2 else zero
    per_obs = like - div * config.lambda_d
    obj = per_obs.mean() if reduce == "mean" else per_obs.sum()
    return ObjectiveTerms(obj, like, div)


# numpy-level loss helpers

def diversity_loss(pred: PredictionSet | np.ndarray, clip: tuple[float, float] | float = 40.0,
                   agg: str = "min") -> float:
    S = pred.trajectories if isinstance(pred, PredictionSet) else np.asarray(pred, dtype=float)
    if S.shape[0] < 2:
        raise ValueError("diversity needs K >= 2")
    lo, hi = (0.0, clip) if np.isscalar(clip) else clip
    end = S[:, -1]
    I, J = pair_index(len(S))
    d = ((end[I] - end[J]) ** 2).sum(-1)
    v = d.min() if agg == "min" else d.mean()
    return float(np.clip(v, lo, hi))


def nll_set_loss(pred: PredictionSet, obs, flow: FlowParams) -> float:
    from .flow import log_likelihood
    obs = np.asarray(obs, dtype=float)
    S = pred.trajectories
    if len(S) == 0:
        raise ValueError("empty prediction set")
    return float(-np.sum(log_likelihood(S, np.broadcast_to(obs, (len(S),) + obs.shape), flow)))


def dsf_objective(pred: PredictionSet, obs, flow: FlowParams, config: DsfConfig,
                  gt: np.ndarray | None = None) -> float:
    config.validate()
    if not config.use_likelihood:
        like = 0.0
    elif config.likelihood_term == "nll":
        like = nll_set_loss(pred, obs, flow)
    else:
        if gt is None:
            raise ValueError("the reconstruction variant needs ground-truth futures")
        err = ((pred.trajectories - gt[None]) ** 2).reshape(len(pred), -1).sum(-1)
        like = float(err.min() + 0.5 * np.sum(pred.latents ** 2))
    div = diversity_loss(pred, config.clip, config.diversity_agg) if len(pred) >= 2 else 0.0
    return like - config.lambda_d * div


# -- training ----------------------------------------------------------------------------------

Monitor = Callable[[int, DsfParams], dict]


def _step(params: DsfParams, flow: FlowParams, flow_W, config: DsfConfig, state, eps, hist, gt=None,
          reduce: str = "mean"):
    W = as_tensors_dsf(params, requires_grad=True)
    g = heads_graph(W, params, flow, eps, hist, flow_W)
    terms = objective_graph(g, config, gt, reduce)
    value = terms.objective.item()
    if not np.isfinite(value):
        raise TrainingDiverged("non-finite DSF objective", params)
    terms.objective.backward()
    new_w, state = ad.adam_step(params.weights, {k: W[k].grad for k in W}, state)
    row = {"objective": value, "nll_term": float(terms.likelihood.numpy().mean()),
           "diversity_term": float(terms.diversity.numpy().mean())}
    return DsfParams(new_w, params.K, params.horizon), state, row


def train_dsf_batch(flow: FlowParams, observations: np.ndarray, config: DsfConfig = DsfConfig(),
                    seed: int | None = None, futures: np.ndarray | None = None,
                    monitor: Monitor | None = None, monitor_every: int = 1) -> tuple[DsfParams, list[dict]]:
    """Train the sampler over a set of observations.

    One noise draw per observation per pass; Adam updates once per minibatch.
    Returns the trained parameters and a per-iteration trace of the objective
    and its two terms (plus whatever ``monitor`` reports).
    """
    config.validate()
    seed = config.seed if seed is None else seed
    observations = np.asarray(observations, dtype=float)
    T = flow.horizon
    params = init_dsf_params(2 * T + flow.hidden, config.K, T, seed)
    state = ad.adam_init(params.weights, lr=config.lr)
    flow_W = as_tensors(flow)
    rng = np.random.default_rng(seed + 7919)
    trace: list[dict] = []
    it = 0
    if monitor is not None:
        trace.append({"iteration": 0, **monitor(0, params)})
    n = len(observations)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            eps = rng.standard_normal((len(idx), T, 2))
            gt = futures[idx] if futures is not None else None
            params, state, row = _step(params, flow, flow_W, config, state, eps, observations[idx], gt)
            it += 1
            row["iteration"] = it
            if monitor is not None and it % monitor_every == 0:
                row.update(monitor(it, params))
            trace.append(row)
    return params, trace


def train_dsf_transductive(flow: FlowParams, obs, config: DsfConfig = DsfConfig(), seed: int | None = None,
                           return_trace: bool = False):
    """Fit a fresh sampler to the given observation(s) only and return its final prediction set(s).

    Losses over a minibatch of observations are summed under one shared
    sampler; a new noise draw is taken at every iteration.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    obs, _, single = _batch(obs)
    T = flow.horizon
    params = init_dsf_params(2 * T + flow.hidden, config.K, T, seed)
    state = ad.adam_init(params.weights, lr=config.lr)
    flow_W = as_tensors(flow)
    rng = np.random.default_rng(seed + 104729)
    trace = []
    for it in range(config.iterations):
        eps = rng.standard_normal((len(obs), T, 2))
        params, state, row = _step(params, flow, flow_W, config, state, eps, obs, reduce="sum")
        row["iteration"] = it + 1
        trace.append(row)
    eps = rng.standard_normal((len(obs), T, 2))
    sets = dsf_heads(eps, obs, params, flow)
    sets = [sets] if isinstance(sets, PredictionSet) else sets
    out = sets[0] if single else sets
    return (out, trace) if return_trace else out


def predict(params: DsfParams, flow: FlowParams, obs, seed: int = 0) -> PredictionSet | list[PredictionSet]:
    """One-shot set prediction from a single noise draw per observation."""
    obs_b, _, single = _batch(obs)
    eps = np.random.default_rng(seed).standard_normal((len(obs_b), params.horizon, 2))
    return dsf_heads(eps[0] if single else eps, obs, params, flow)
