"""JSON and CSV persistence for datasets, checkpoints, traces and reports.

Every JSON file starts with the same header: ``format_version``, a ``kind``
tag and ``config_hash``, the SHA-256 of the canonical JSON of the config that
produced it.  Readers refuse files written with another format version.
Floats are written with Python's shortest round-trip repr, so a save/load
cycle is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .dsf import DsfConfig, DsfParams
from .flow import FlowParams, FlowTrainConfig
from .metrics import MetricsReport
from .sim import Dataset, SimConfig

FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file is missing, malformed, of the wrong kind or of another format version."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)


def config_hash(config: Any) -> str:
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path: str | Path, kind: str, payload: dict, config: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = config.to_dict() if hasattr(config, "to_dict") else config
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "config_hash": config_hash(cfg), "config": cfg,
           **payload}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_default) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FormatError(f"{path}: missing format_version header")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version {doc['format_version']} is not supported "
                          f"(expected {FORMAT_VERSION})")
    if kind is not None and doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {doc.get('kind')!r}")
    return doc


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- datasets --------------------------------------------------------------------------

def save_dataset(path, dataset: Dataset) -> Path:
    payload = {"seed": dataset.seed, "digest": dataset.digest(), "records": dataset.records()}
    return write_json(path, "dataset", payload, dataset.config)


def load_dataset(path) -> Dataset:
    doc = read_json(path, "dataset")
    config = SimConfig.from_dict(doc["config"])
    records = doc["records"]
    if not records:
        raise FormatError(f"{path}: dataset has no records")
    ds = Dataset(np.array([r["history"] for r in records], dtype=float),
                 np.array([r["future"] for r in records], dtype=float),
                 [r["mode"] for r in records], config, doc["seed"])
    if ds.digest() != doc["digest"]:
        raise FormatError(f"{path}: dataset digest mismatch")
    return ds


# -- flow checkpoints ------------------------------------------------------------------

def _arrays(d: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": np.ravel(v).tolist()} for k, v in sorted(d.items())}


def _unarrays(d: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d.items()}


def save_flow(path, params: FlowParams, config: FlowTrainConfig, final_nll: float | None = None,
              extra: dict | None = None) -> Path:
    payload = {
        "architecture": {"type": "autoregressive-affine", "hidden": params.hidden, "history": params.history,
                         "horizon": params.horizon, "alpha": params.alpha},
        "norm": _arrays(params.norm),
        "weights": _arrays(params.weights),
        "final_nll": final_nll,
        "digest": params.digest(),
        **(extra or {}),
    }
    return write_json(path, "flow", payload, config)


def load_flow(path) -> tuple[FlowParams, dict]:
    doc = read_json(path, "flow")
    arch = doc["architecture"]
    params = FlowParams(_unarrays(doc["weights"]), _unarrays(doc["norm"]), arch["alpha"], arch["hidden"],
                        arch["history"], arch["horizon"])
    if params.digest() != doc["digest"]:
        raise FormatError(f"{path}: flow weight digest mismatch")
    return params, doc


# -- sampler checkpoints (DSF and DLow) -------------------------------------------------

def save_sampler(path, params: DsfParams, config, method: str = "dsf", extra: dict | None = None) -> Path:
    cfg = config.to_dict()
    payload = {"method": method, "K": params.K, "horizon": params.horizon, "weights": _arrays(params.weights),
               "digest": params.digest(), **(extra or {})}
    if isinstance(config, DsfConfig):
        payload.update({"lambda_d": config.lambda_d, "clip": config.clip, "use_likelihood": config.use_likelihood,
                        "diversity_agg": config.diversity_agg, "likelihood_term": config.likelihood_term})
    return write_json(path, "sampler", payload, cfg)


def load_sampler(path) -> tuple[DsfParams, dict]:
    doc = read_json(path, "sampler")
    params = DsfParams(_unarrays(doc["weights"]), doc["K"], doc["horizon"])
    if params.digest() != doc["digest"]:
        raise FormatError(f"{path}: sampler weight digest mismatch")
    return params, doc


# -- CSV -------------------------------------------------------------------------------

def write_csv(path, rows: Iterable[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def save_curve(path, curve: list[float]) -> Path:
    return write_csv(path, ({"epoch": i + 1, "mean_nll": v} for i, v in enumerate(curve)), ["epoch", "mean_nll"])


TRACE_COLUMNS = ["iteration", "objective", "nll_term", "diversity_term"]


def save_trace(path, trace: list[dict], columns: list[str] | None = None) -> Path:
    if columns is None:
        extra = sorted({k for row in trace for k in row} - set(TRACE_COLUMNS))
        columns = TRACE_COLUMNS + extra
    return write_csv(path, trace, columns)


# -- reports ---------------------------------------------------------------------------

def save_report(path, reports: dict[str, MetricsReport] | MetricsReport, config, extra: dict | None = None) -> Path:
    if isinstance(reports, MetricsReport):
        reports = {"model": reports}
    payload = {"reports": {name: _report_payload(r) for name, r in reports.items()}, **(extra or {})}
    return write_json(path, "report", payload, config)


def _report_payload(r: MetricsReport) -> dict:
    return {"metrics": {m: {"mean": r.mean[m], "std": r.std[m]} for m in r.mean}, "K": r.K, "J": r.J,
            "mode": r.mode, "n_instances": r.n_instances, "seeds": r.seeds, "per_seed": r.per_seed}


def load_report(path) -> dict:
    return read_json(path, "report")


def report_rows(reports: dict[str, MetricsReport]) -> list[dict]:
    rows = []
    for name, r in reports.items():
        for m in r.mean:
            rows.append({"model": name, "metric": m, "K": r.K, "mode": r.mode, "mean": r.mean[m], "std": r.std[m]})
    return rows
