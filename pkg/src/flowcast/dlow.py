"""DLow-style diverse sampling baseline on the same frozen flow.

The sampler has the DSF trunk, but each head emits an affine map of the
shared noise draw, ``z_k = exp(loga_k) * eps + b_k``, so every head defines a
diagonal Gaussian over latents.  Training minimises

    lambda_r * E_r + lambda_d * E_d + lambda_kl * KL

where ``E_r`` is the best head's squared trajectory error against the
recorded future, ``E_d`` the mean RBF similarity over ordered head pairs and
``KL`` the closed-form divergence of each head's Gaussian from N(0, I).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsf import DsfParams, SetGraph, _batch, as_tensors_dsf, decode_set, init_dsf_params, trunk_graph
from .flow import FlowParams, PredictionSet, TrainingDiverged, as_tensors, encode_graph


@dataclass
class DLowConfig:
    K: int = 2
    lambda_r: float = 1.0
    lambda_d: float = 0.5
    lambda_kl: float = 1.0
    sigma_d: float = 1.0
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.K < 2:
            raise ValueError("DLow needs K >= 2")
        if min(self.lambda_r, self.lambda_d, self.lambda_kl) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be positive")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# DLow parameters share the DSF container; only the output width differs.
DLowParams = DsfParams


def init_dlow_params(flow: FlowParams, K: int, seed: int = 0) -> DLowParams:
    T = flow.horizon
    return init_dsf_params(2 * T + flow.hidden, K, T, seed, out_per_head=4 * T)


@dataclass
class AffineSetGraph:
    set: SetGraph
    loga: Tensor   # (B, K, T, 2)
    b: Tensor      # (B, K, T, 2)


def affine_heads_graph(W, params: DLowParams, flow: FlowParams, eps: np.ndarray, hist: np.ndarray,
                       flow_W=None) -> AffineSetGraph:
    B, K, T = len(hist), params.K, params.horizon
    flow_W = flow_W if flow_W is not None else as_tensors(flow)
    feat = encode_graph(flow_W, flow.norm, hist)
    x = ad.concat([Tensor(eps.reshape(B, -1)), feat], axis=1)
    out = trunk_graph(W, x).reshape(B, K, 2, T, 2)
    loga, b = out[:, :, 0], out[:, :, 1]
    Z = loga.exp() * Tensor(eps[:, None]) + b
    return AffineSetGraph(decode_set(flow_W, flow, Z, hist, feat), loga, b)


def losses_graph(g: AffineSetGraph, gt: np.ndarray, sigma_d: float) -> tuple[Tensor, Tensor, Tensor]:
    """Per-observation (E_r, E_d, KL), each of shape (B,)."""
    S = g.set.trajectories
    B, K = S.shape[:2]
    flat = S.reshape(B, K, -1)
    e_r = (flat - Tensor(gt.reshape(B, 1, -1))).sqnorm(axis=-1).min(axis=1)
    I, J = np.nonzero(~np.eye(K, dtype=bool))
    e_d = ((flat[:, I] - flat[:, J]).sqnorm(axis=-1) * (-1.0 / sigma_d)).exp().sum(axis=1) * (1.0 / (K * (K - 1)))
    a2 = (g.loga * 2.0).exp()
    kl = ((a2 + g.b.square() - 1.0 - g.loga * 2.0) * 0.5).reshape(B, -1).sum(axis=1)
    return e_r, e_d, kl


def dlow_losses(pred: PredictionSet | np.ndarray, gt: np.ndarray, heads, config: DLowConfig = DLowConfig()):
    """E_r, E_d and KL of one prediction set.

    ``heads`` is a pair ``(a, b)`` of (K, T, 2) arrays holding each head's
    scale (positive, not log) and shift.
    """
    S = pred.trajectories if isinstance(pred, PredictionSet) else np.asarray(pred, dtype=float)
    K = len(S)
    if K < 2:
        raise ValueError("E_d needs K >= 2")
    gt = np.asarray(gt, dtype=float)
    flat = S.reshape(K, -1)
    e_r = float(((flat - gt.reshape(1, -1)) ** 2).sum(-1).min())
    total = 0.0
    for i in range(K):
        for j in range(K):
            if i != j:
                total += math.exp(-((flat[i] - flat[j]) ** 2).sum() / config.sigma_d)
    e_d = total / (K * (K - 1))
    a, b = (np.asarray(x, dtype=float) for x in heads)
    if np.any(a <= 0):
        raise ValueError("head scales must be positive")
    kl = float(0.5 * np.sum(a ** 2 + b ** 2 - 1.0 - 2.0 * np.log(a)))
    return e_r, e_d, kl


def train_dlow(flow: FlowParams, history: np.ndarray, future: np.ndarray, config: DLowConfig = DLowConfig(),
               seed: int | None = None) -> tuple[DLowParams, list[dict]]:
    """Fit the affine heads on labelled data with Adam; the flow stays frozen."""
    config.validate()
    seed = config.seed if seed is None else seed
    history = np.asarray(history, dtype=float)
    future = np.asarray(future, dtype=float)
    if len(history) == 0 or len(history) != len(future):
        raise ValueError("history and future must be non-empty and aligned")
    T = flow.horizon
    params = init_dlow_params(flow, config.K, seed)
    state = ad.adam_init(params.weights, lr=config.lr)
    flow_W = as_tensors(flow)
    rng = np.random.default_rng(seed + 7919)
    trace: list[dict] = []
    n = len(history)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            eps = rng.standard_normal((len(idx), T, 2))
            W = as_tensors_dsf(params, requires_grad=True)
            g = affine_heads_graph(W, params, flow, eps, history[idx], flow_W)
            e_r, e_d, kl = losses_graph(g, future[idx], config.sigma_d)
            loss = (e_r * config.lambda_r + e_d * config.lambda_d + kl * config.lambda_kl).mean()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged("non-finite DLow loss", params)
            loss.backward()
            new_w, state = ad.adam_step(params.weights, {k: W[k].grad for k in W}, state)
            params = DsfParams(new_w, params.K, params.horizon)
            trace.append({"iteration": len(trace) + 1, "loss": value, "e_r": float(e_r.numpy().mean()),
                          "e_d": float(e_d.numpy().mean()), "kl": float(kl.numpy().mean())})
    return params, trace


def predict_dlow(params: DLowParams, flow: FlowParams, obs, seed: int = 0) -> PredictionSet | list[PredictionSet]:
    """K trajectories per observation from one shared noise draw."""
    obs_b, _, single = _batch(obs)
    eps = np.random.default_rng(seed).standard_normal((len(obs_b), params.horizon, 2))
    g = affine_heads_graph(as_tensors_dsf(params), params, flow, eps, obs_b)
    Z, S = g.set.latents.numpy(), g.set.trajectories.numpy()
    sets = [PredictionSet(S[b], Z[b], obs_b[b]) for b in range(len(obs_b))]
    return sets[0] if single else sets


def head_affines(params: DLowParams, flow: FlowParams, obs, eps) -> tuple[np.ndarray, np.ndarray]:
    """The (scale, shift) pair of every head for one observation and noise draw."""
    obs = np.asarray(obs, dtype=float)[None]
    eps = np.asarray(eps, dtype=float)[None]
    g = affine_heads_graph(as_tensors_dsf(params), params, flow, eps, obs)
    return np.exp(g.loga.numpy()[0]), g.b.numpy()[0]
