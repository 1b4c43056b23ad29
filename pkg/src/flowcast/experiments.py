"""End-to-end experiment drivers shared by the CLI, the demos and the tests.

A :class:`RunConfig` bundles every stage's settings.  The helpers here build
the data, train the backbone and the samplers, wrap each method as a
predictor for :func:`flowcast.metrics.evaluate`, and run the ablation matrix.
Run seeds fan out as ``master_seed + run index``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dlow import DLowConfig, predict_dlow, train_dlow
from .dsf import DsfConfig, DsfParams, predict, train_dsf_batch, train_dsf_transductive
from .flow import FlowParams, FlowTrainConfig, log_likelihood, sample_iid, train_flow
from .metrics import MetricsReport, evaluate, min_ade, self_distance
from .sim import (MODES, Dataset, EvalInstance, SimConfig, build_multifuture_eval, canonical_observation,
                  generate_dataset)

VARIANTS = ("full", "no_diversity", "no_likelihood", "with_rec", "mean_div", "weak_backbone")

VARIANT_OVERRIDES: dict[str, dict] = {
    "full": {},
    "no_diversity": {"lambda_d": 0.0},
    "no_likelihood": {"use_likelihood": False},
    "with_rec": {"likelihood_term": "dlow_rec"},
    "mean_div": {"diversity_agg": "mean"},
    "weak_backbone": {},
}


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    flow: FlowTrainConfig = field(default_factory=lambda: FlowTrainConfig(epochs=400))
    dsf: DsfConfig = field(default_factory=lambda: DsfConfig(K=2, lambda_d=15.0, clip=200.0, epochs=10))
    dlow: DLowConfig = field(default_factory=DLowConfig)
    eval_instances: int = 20
    distance_mode: str = "squared"
    n_seeds: int = 5
    master_seed: int = 0
    k_values: list[int] = field(default_factory=lambda: [2])
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    mode_radius: float = 3.0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be at least 1")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown ablation variants: {sorted(unknown)}")
        if len(set(self.variants)) != len(self.variants):
            raise ValueError("ablation variant ids must be unique")

    @property
    def seeds(self) -> list[int]:
        return [self.master_seed + i for i in range(self.n_seeds)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        sections = {"sim": (SimConfig, base.sim), "flow": (FlowTrainConfig, base.flow),
                    "dsf": (DsfConfig, base.dsf), "dlow": (DLowConfig, base.dlow)}
        for key, (kind, default) in sections.items():
            if key in d:
                merged = {**(default.to_dict() if kind is SimConfig else asdict(default)), **d[key]}
                d[key] = kind.from_dict(merged) if kind is SimConfig else kind(**merged)
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- data and backbone -----------------------------------------------------------------

@dataclass
class Bundle:
    """Everything the evaluation stages share: data, eval set and trained backbones."""

    config: RunConfig
    dataset: Dataset
    instances: list[EvalInstance]
    flow: FlowParams
    curve: list[float]
    weak_flow: FlowParams | None = None


def build_data(config: RunConfig, seed: int | None = None) -> tuple[Dataset, list[EvalInstance]]:
    seed = config.master_seed if seed is None else seed
    dataset = generate_dataset(config.sim, seed)
    return dataset, build_multifuture_eval(dataset, config.eval_instances, seed)


def train_backbone(config: RunConfig, dataset: Dataset, epochs: int | None = None,
                   seed: int | None = None) -> tuple[FlowParams, list[float]]:
    fc = config.flow if epochs is None else replace(config.flow, epochs=epochs)
    return train_flow(dataset.history, dataset.future, fc, seed=config.master_seed if seed is None else seed)


def prepare(config: RunConfig, weak: bool = False) -> Bundle:
    dataset, instances = build_data(config)
    flow, curve = train_backbone(config, dataset)
    weak_flow = train_backbone(config, dataset, epochs=max(1, config.flow.epochs // 2))[0] if weak else None
    return Bundle(config, dataset, instances, flow, curve, weak_flow)


# -- predictors ------------------------------------------------------------------------

Predictor = Callable[[np.ndarray, int, int], np.ndarray]


def iid_predictor(flow: FlowParams) -> Predictor:
    def run(history, K, seed):
        return sample_iid(history, flow, K, seed=seed).trajectories
    return run


class SamplerCache:
    """Trains one sampler per (K, seed) on first use and keeps it."""

    def __init__(self, train: Callable[[int, int], DsfParams]):
        self._train = train
        self.params: dict[tuple[int, int], DsfParams] = {}

    def get(self, K: int, seed: int) -> DsfParams:
        if (K, seed) not in self.params:
            self.params[(K, seed)] = self._train(K, seed)
        return self.params[(K, seed)]


def dsf_predictor(flow: FlowParams, dataset: Dataset, config: DsfConfig) -> tuple[Predictor, SamplerCache]:
    cache = SamplerCache(lambda K, seed: train_dsf_batch(flow, dataset.history, replace(config, K=K), seed=seed,
                                                         futures=dataset.future)[0])

    def run(history, K, seed):
        return predict(cache.get(K, seed), flow, history, seed=seed).trajectories
    return run, cache


def dlow_predictor(flow: FlowParams, dataset: Dataset, config: DLowConfig) -> tuple[Predictor, SamplerCache]:
    cache = SamplerCache(lambda K, seed: train_dlow(flow, dataset.history, dataset.future,
                                                    replace(config, K=K), seed=seed)[0])

    def run(history, K, seed):
        return predict_dlow(cache.get(K, seed), flow, history, seed=seed).trajectories
    return run, cache


def transductive_predictor(flow: FlowParams, instances: list[EvalInstance], config: DsfConfig) -> Predictor:
    """Adapts a fresh sampler to the whole eval set (one minibatch) per (K, seed)."""
    obs = np.stack([inst.history for inst in instances])
    cache: dict[tuple[int, int], list] = {}

    def run(history, K, seed):
        if (K, seed) not in cache:
            cache[(K, seed)] = train_dsf_transductive(flow, obs, replace(config, K=K), seed=seed)
        for inst, pred in zip(instances, cache[(K, seed)]):
            if np.array_equal(inst.history, history):
                return pred.trajectories
        return train_dsf_transductive(flow, history, replace(config, K=K), seed=seed).trajectories
    return run


def mean_flow_loglik(predictor: Predictor, flow: FlowParams, instances: list[EvalInstance], K: int,
                     seeds: list[int]) -> float:
    """Average log-likelihood of predicted trajectories under ``flow``."""
    vals = []
    for seed in seeds:
        for inst in instances:
            S = np.asarray(predictor(inst.history, K, seed))
            vals.append(np.mean(log_likelihood(S, np.broadcast_to(inst.history, (len(S),) + inst.history.shape),
                                               flow)))
    return float(np.mean(vals))


# -- ablations -------------------------------------------------------------------------

@dataclass
class VariantResult:
    variant: str
    report: MetricsReport
    mean_loglik: float


def variant_config(base: DsfConfig, variant: str) -> DsfConfig:
    if variant not in VARIANT_OVERRIDES:
        raise ValueError(f"unknown variant {variant!r}")
    return replace(base, **VARIANT_OVERRIDES[variant])


def run_ablation(bundle: Bundle, K: int = 2, variants=None, log: Callable[[str], None] | None = None
                 ) -> dict[str, VariantResult]:
    cfg = bundle.config
    variants = list(variants or cfg.variants)
    if "weak_backbone" in variants and bundle.weak_flow is None:
        bundle.weak_flow = train_backbone(cfg, bundle.dataset, epochs=max(1, cfg.flow.epochs // 2))[0]
    out = {}
    for v in variants:
        flow = bundle.weak_flow if v == "weak_backbone" else bundle.flow
        pred, _ = dsf_predictor(flow, bundle.dataset, variant_config(cfg.dsf, v))
        report = evaluate(pred, bundle.instances, K, cfg.seeds, cfg.distance_mode)
        ll = mean_flow_loglik(pred, bundle.flow, bundle.instances, K, cfg.seeds)
        out[v] = VariantResult(v, report, ll)
        if log:
            log(f"{v}: minADE={report.mean['minADE']:.3f} minASD={report.mean['minASD']:.3f} loglik={ll:.2f}")
    return out


def ablation_rows(results: dict[str, VariantResult]) -> list[dict]:
    rows = []
    for v, r in results.items():
        for m in r.report.mean:
            rows.append({"variant": v, "metric": m, "K": r.report.K, "mean": r.report.mean[m],
                         "std": r.report.std[m]})
        rows.append({"variant": v, "metric": "mean_loglik", "K": r.report.K, "mean": r.mean_loglik, "std": 0.0})
    return rows


# -- toy-intersection checks -----------------------------------------------------------

def mode_distances(endpoints: np.ndarray, sim: SimConfig) -> np.ndarray:
    """(N, 2) distances from each endpoint to the straight and right exits."""
    goals = sim.goals()
    endpoints = np.asarray(endpoints, dtype=float).reshape(-1, 2)
    return np.stack([np.linalg.norm(endpoints - goals[m], axis=1) for m in MODES], axis=1)


def covers_both(endpoints: np.ndarray, sim: SimConfig, radius: float = 3.0) -> bool:
    d = mode_distances(endpoints, sim)
    return bool((d < radius).any(axis=0).all())


@dataclass
class CoverageReport:
    K: int
    per_mode: dict[str, int]
    averaged: int
    endpoints: list[list[float]]

    def summary(self) -> str:
        modes = ", ".join(f"{m}={n}" for m, n in self.per_mode.items())
        return f"K={self.K}: {modes}, mode-averaged={self.averaged}"


def coverage_report(endpoints: np.ndarray, sim: SimConfig, radius: float = 3.0) -> CoverageReport:
    """How many endpoints sit near each exit, and how many near neither."""
    d = mode_distances(endpoints, sim)
    near = d < radius
    per_mode = {m: int(near[:, i].sum()) for i, m in enumerate(MODES)}
    return CoverageReport(len(d), per_mode, int((~near.any(axis=1)).sum()), np.round(endpoints, 6).tolist())


def intersection_observation(sim: SimConfig) -> np.ndarray:
    return canonical_observation(sim)


def quality_diversity_monitor(flow: FlowParams, instances: list[EvalInstance], mode: str = "squared",
                              seed: int = 0):
    """Monitor callback for DSF training: eval-set minASD and minADE of the current sampler."""
    obs = np.stack([inst.history for inst in instances])

    def monitor(it, params):
        sets = predict(params, flow, obs, seed=seed)
        asd = np.mean([self_distance(s.trajectories, "min", "average", mode) for s in sets])
        ade = np.mean([min_ade(s.trajectories, inst.futures, mode) for s, inst in zip(sets, instances)])
        return {"minASD": float(asd), "minADE": float(ade)}
    return monitor
