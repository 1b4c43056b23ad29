"""Autoregressive affine normalizing flow over planar trajectories.

The flow maps a latent ``z`` of shape (T, 2) to a trajectory one step at a
time.  An MLP encodes the observed history into the initial GRU state; at
step ``t`` the GRU consumes the previous position and a small head predicts a
shift ``mu_t`` and log-scale ``logsig_t`` for the step offset::

    s_t = s_{t-1} + alpha * (s_{t-1} - s_{t-2}) + mu_t + exp(logsig_t) * z_t

Because ``mu_t`` and ``logsig_t`` only depend on earlier positions, the
Jacobian is triangular and the exact log-density of a trajectory is
``sum log N(z; 0, 1) - sum logsig``.

All batch functions take ``obs`` with shape (B, T_hist, 2) and latents or
trajectories with shape (B, T, 2); single instances without the leading
batch axis are accepted too.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)
LOGSIG_BOUND = 7.0


class TrainingDiverged(FloatingPointError):
    """Training produced a non-finite loss; ``params`` is the last finite state."""

    def __init__(self, message: str, params):
        super().__init__(message)
        self.params = params


@dataclass
class FlowParams:
    weights: dict[str, np.ndarray]
    norm: dict[str, np.ndarray]
    alpha: float = 0.0
    hidden: int = 64
    history: int = 2
    horizon: int = 8

    def copy(self) -> FlowParams:
        return self.replace({k: v.copy() for k, v in self.weights.items()})

    def replace(self, weights: dict[str, np.ndarray]) -> FlowParams:
        return FlowParams(weights, self.norm, self.alpha, self.hidden, self.history, self.horizon)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        for name in sorted(self.norm):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.norm[name]).tobytes())
        h.update(repr(self.alpha).encode())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


@dataclass
class FlowTrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    alpha: float = 0.0
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, batch size and epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionSet:
    """K trajectories with the latents that produced them."""

    trajectories: np.ndarray          # (K, T, 2)
    latents: np.ndarray               # (K, T, 2)
    observation: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, -1]


# -- parameters --------------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_flow_params(seed: int = 0, hidden: int = 64, history: int = 2, alpha: float = 0.0,
                     norm: dict | None = None, horizon: int = 8) -> FlowParams:
    rng = np.random.default_rng(seed)
    d_in = 2 * history
    H = hidden
    w = {
        "enc_w1": _uniform(rng, d_in, (d_in, H)), "enc_b1": _uniform(rng, d_in, (H,)),
        "enc_w2": _uniform(rng, H, (H, H)), "enc_b2": _uniform(rng, H, (H,)),
        "gru_wi": _uniform(rng, H, (2, 3 * H)), "gru_bi": _uniform(rng, H, (3 * H,)),
        "gru_wh": _uniform(rng, H, (H, 3 * H)), "gru_bh": _uniform(rng, H, (3 * H,)),
        "head_w1": _uniform(rng, H, (H, 32)), "head_b1": _uniform(rng, H, (32,)),
        "head_w2": _uniform(rng, 32, (32, 4)), "head_b2": _uniform(rng, 32, (4,)),
    }
    if norm is None:
        norm = identity_norm(history)
    return FlowParams(w, norm, alpha, hidden, history, horizon)


def zero_flow_params(hidden: int = 64, history: int = 2, alpha: float = 0.0, horizon: int = 8) -> FlowParams:
    """All-zero weights: mu = 0 and logsig = 0, i.e. s_t = s_{t-1} + z_t when alpha = 0."""
    p = init_flow_params(0, hidden, history, alpha, horizon=horizon)
    return p.replace({k: np.zeros_like(v) for k, v in p.weights.items()})


def identity_norm(history: int = 2) -> dict[str, np.ndarray]:
    return {"hist_mean": np.zeros(2 * history), "hist_std": np.ones(2 * history),
            "pos_mean": np.zeros(2), "pos_std": np.ones(2)}


def fit_norm(history: np.ndarray, future: np.ndarray) -> dict[str, np.ndarray]:
    """Normalization constants from a training set (history and positions)."""
    flat = history.reshape(len(history), -1)
    pos = np.concatenate([history, future], axis=1).reshape(-1, 2)
    return {"hist_mean": flat.mean(0), "hist_std": np.maximum(flat.std(0), 1e-3),
            "pos_mean": pos.mean(0), "pos_std": np.maximum(pos.std(0), 1e-3)}


def as_tensors(params: FlowParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.weights.items()}


# -- graph builders (Tensor level) ----------------------------------------------------

def encode_graph(W, norm, hist: np.ndarray) -> Tensor:
    x = (hist.reshape(len(hist), -1) - norm["hist_mean"]) / norm["hist_std"]
    h = (Tensor(x) @ W["enc_w1"] + W["enc_b1"]).tanh()
    return (h @ W["enc_w2"] + W["enc_b2"]).tanh()


def gru_cell(W, x, h: Tensor) -> Tensor:
    """Standard GRU update (reset, update, candidate gate ordering)."""
    H = h.shape[-1]
    gi = x @ W["gru_wi"] + W["gru_bi"]
    gh = h @ W["gru_wh"] + W["gru_bh"]
    r = (gi[:, :H] + gh[:, :H]).sigmoid()
    u = (gi[:, H:2 * H] + gh[:, H:2 * H]).sigmoid()
    n = (gi[:, 2 * H:] + r * gh[:, 2 * H:]).tanh()
    return n + u * (h - n)


def head_graph(W, h: Tensor) -> tuple[Tensor, Tensor]:
    out = (h @ W["head_w1"] + W["head_b1"]).relu() @ W["head_w2"] + W["head_b2"]
    return out[:, :2], out[:, 2:].clip(-LOGSIG_BOUND, LOGSIG_BOUND)


def _norm_pos(s, norm):
    return (s - norm["pos_mean"]) * (1.0 / norm["pos_std"])


def forward_graph(W, params: FlowParams, z: Tensor, hist: np.ndarray, h0: Tensor | None = None):
    """Push latents (B, T, 2) through the flow; returns (trajectories, sum of logsig per row)."""
    norm, alpha = params.norm, params.alpha
    h = encode_graph(W, norm, hist) if h0 is None else h0
    s_prev = Tensor(hist[:, -1])
    s_prev2 = Tensor(hist[:, -2])
    steps, logdet = [], None
    for t in range(z.shape[1]):
        h = gru_cell(W, _norm_pos(s_prev, norm), h)
        mu, logsig = head_graph(W, h)
        offset = mu + logsig.exp() * z[:, t]
        if alpha:
            offset = offset + (s_prev - s_prev2) * alpha
        s = s_prev + offset
        steps.append(s)
        ls = logsig.sum(axis=1)
        logdet = ls if logdet is None else logdet + ls
        s_prev2, s_prev = s_prev, s
    return ad.stack(steps, axis=1), logdet


def inverse_graph(W, params: FlowParams, S, hist: np.ndarray):
    """Recover latents from trajectories; returns (z, sum of logsig per row)."""
    norm, alpha = params.norm, params.alpha
    S = ad.as_tensor(S)
    h = encode_graph(W, norm, hist)
    prev = [Tensor(hist[:, -2]), Tensor(hist[:, -1])]
    zs, logdet = [], None
    for t in range(S.shape[1]):
        s_prev2, s_prev = prev[-2], prev[-1]
        h = gru_cell(W, _norm_pos(s_prev, norm), h)
        mu, logsig = head_graph(W, h)
        s = S[:, t]
        resid = s - s_prev - mu
        if alpha:
            resid = resid - (s_prev - s_prev2) * alpha
        zs.append(resid * (-logsig).exp())
        ls = logsig.sum(axis=1)
        logdet = ls if logdet is None else logdet + ls
        prev.append(s)
    return ad.stack(zs, axis=1), logdet


def gaussian_logpdf_sum(z: Tensor) -> Tensor:
    """Sum of standard-normal log-densities over all but the batch axis."""
    d = int(np.prod(z.shape[1:]))
    return z.reshape(z.shape[0], d).square().sum(axis=1) * -0.5 - 0.5 * d * LOG_2PI


def loglik_graph(W, params: FlowParams, S, hist: np.ndarray) -> Tensor:
    z, logdet = inverse_graph(W, params, S, hist)
    return gaussian_logpdf_sum(z) - logdet


# -- numpy-level API -------------------------------------------------------------------

def _batched(obs, x=None):
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
        if x is not None:
            x = np.asarray(x, dtype=float)[None]
    if not np.all(np.isfinite(obs)):
        raise ValueError("observation contains non-finite values")
    return obs, x, single


def encode_observation(obs, params: FlowParams) -> np.ndarray:
    obs, _, single = _batched(obs)
    h = encode_graph(as_tensors(params), params.norm, obs).numpy()
    return h[0] if single else h


def conditioner_step(h_prev, s_prev, params: FlowParams):
    """One conditioner update: returns (h_next, mu, logsig) for the next step."""
    h_prev = np.atleast_2d(np.asarray(h_prev, dtype=float))
    s_prev = np.atleast_2d(np.asarray(s_prev, dtype=float))
    W = as_tensors(params)
    h = gru_cell(W, _norm_pos(Tensor(s_prev), params.norm), Tensor(h_prev))
    mu, logsig = head_graph(W, h)
    squeeze = np.ndim(h_prev) == 2 and h_prev.shape[0] == 1
    out = h.numpy(), mu.numpy(), logsig.numpy()
    return tuple(o[0] for o in out) if squeeze else out


def flow_forward(z, obs, params: FlowParams) -> np.ndarray:
    obs, z, single = _batched(obs, z)
    if z.ndim != 3 or z.shape[2] != 2:
        raise ValueError(f"latent must be (T, 2) per instance, got {z.shape[1:]}")
    S, _ = forward_graph(as_tensors(params), params, Tensor(z), obs)
    S = S.numpy()
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("flow_forward produced non-finite output")
    return S[0] if single else S


def flow_inverse(S, obs, params: FlowParams) -> np.ndarray:
    obs, S, single = _batched(obs, S)
    z, _ = inverse_graph(as_tensors(params), params, S, obs)
    z = z.numpy()
    return z[0] if single else z


def log_likelihood(S, obs, params: FlowParams):
    """Exact log-density (nats) of trajectories under the flow."""
    obs, S, single = _batched(obs, S)
    ll = loglik_graph(as_tensors(params), params, S, obs).numpy()
    if not np.all(np.isfinite(ll)):
        raise FloatingPointError("non-finite log-likelihood")
    return float(ll[0]) if single else ll


def sample_iid(obs, params: FlowParams, K: int, seed: int = 0, z: np.ndarray | None = None) -> PredictionSet:
    """K independent flow samples for one observation."""
    if K < 1:
        raise ValueError("K must be at least 1")
    obs = np.asarray(obs, dtype=float)
    if z is None:
        z = np.random.default_rng(seed).standard_normal((K, params.horizon, 2))
    S = flow_forward(z, np.broadcast_to(obs, (K,) + obs.shape), params)
    return PredictionSet(S, z, obs)


# -- training ----------------------------------------------------------------------------

def nll_loss(W, params: FlowParams, future: np.ndarray, history: np.ndarray) -> Tensor:
    return -loglik_graph(W, params, future, history).mean()


def train_flow(history: np.ndarray, future: np.ndarray, config: FlowTrainConfig = FlowTrainConfig(),
               seed: int | None = None, log=None) -> tuple[FlowParams, list[float]]:
    """Maximum-likelihood training with Adam over shuffled minibatches.

    Returns the parameters from the epoch with the lowest mean NLL and the
    per-epoch mean NLL series.
    """
    history = np.asarray(history, dtype=float)
    future = np.asarray(future, dtype=float)
    if len(history) == 0:
        raise ValueError("empty dataset")
    seed = config.seed if seed is None else seed
    norm = fit_norm(history, future)
    params = init_flow_params(seed, config.hidden, history.shape[1], config.alpha, norm, future.shape[1])
    state = ad.adam_init(params.weights, lr=config.lr)
    rng = np.random.default_rng(seed + 1)
    curve: list[float] = []
    best, best_nll = params.copy(), math.inf
    n = len(history)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            W = as_tensors(params, requires_grad=True)
            loss = nll_loss(W, params, future[idx], history[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite NLL at epoch {epoch + 1}", best)
            loss.backward()
            grads = {k: W[k].grad for k in W}
            new_w, state = ad.adam_step(params.weights, grads, state)
            params = params.replace(new_w)
            total += loss.item() * len(idx)
        curve.append(total / n)
        if curve[-1] < best_nll:
            best_nll, best = curve[-1], params
        if log is not None:
            log(epoch + 1, curve[-1])
    return best, curve
