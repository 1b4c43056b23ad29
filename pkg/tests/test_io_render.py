import json
import re

import numpy as np
import pytest

from flowcast import io
from flowcast.dsf import DsfConfig, init_dsf_params
from flowcast.flow import FlowTrainConfig, init_flow_params
from flowcast.metrics import evaluate
from flowcast.render import Layer, Scene, render_quality_diversity_trace, render_trajectories_svg
from flowcast.sim import SimConfig, build_multifuture_eval, generate_dataset


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SimConfig(n_straight=3, n_right=4), seed=2)


def test_dataset_round_trip_is_exact(tmp_path, small):
    path = io.save_dataset(tmp_path / "d.json", small)
    back = io.load_dataset(path)
    assert back.digest() == small.digest()
    assert np.array_equal(back.future, small.future)
    doc = json.loads(path.read_text())
    assert doc["format_version"] == io.FORMAT_VERSION
    assert doc["config_hash"] == io.config_hash(small.config)
    assert set(doc["records"][0]) == {"history", "future", "mode"}


def test_version_mismatch_and_missing_files_are_refused(tmp_path, small):
    path = io.save_dataset(tmp_path / "d.json", small)
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(io.FormatError, match="format_version"):
        io.load_dataset(path)
    with pytest.raises(io.FormatError):
        io.load_dataset(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(io.FormatError):
        io.read_json(tmp_path / "bad.json")


def test_wrong_kind_and_tampering_are_detected(tmp_path, small):
    path = io.save_dataset(tmp_path / "d.json", small)
    with pytest.raises(io.FormatError, match="flow"):
        io.load_flow(path)
    doc = json.loads(path.read_text())
    doc["records"][0]["future"][0][0] += 1.0
    path.write_text(json.dumps(doc))
    with pytest.raises(io.FormatError, match="digest"):
        io.load_dataset(path)


def test_flow_and_sampler_checkpoints_round_trip(tmp_path):
    flow = init_flow_params(3, hidden=8)
    path = io.save_flow(tmp_path / "f.json", flow, FlowTrainConfig(hidden=8), 1.25)
    back, doc = io.load_flow(path)
    assert back.digest() == flow.digest()
    assert doc["final_nll"] == 1.25 and doc["architecture"]["hidden"] == 8
    params = init_dsf_params(24, 2, 8, seed=1)
    cfg = DsfConfig(lambda_d=3.0)
    sp = io.save_sampler(tmp_path / "s.json", params, cfg, "dsf", {"seed": 4})
    back, doc = io.load_sampler(sp)
    assert back.digest() == params.digest()
    assert (doc["K"], doc["lambda_d"], doc["clip"], doc["method"], doc["seed"]) == (2, 3.0, 40.0, "dsf", 4)


def test_csv_helpers(tmp_path):
    io.save_curve(tmp_path / "c.csv", [3.0, 2.5])
    assert (tmp_path / "c.csv").read_text().splitlines() == ["epoch,mean_nll", "1,3.0", "2,2.5"]
    io.save_trace(tmp_path / "t.csv", [{"iteration": 1, "objective": 1.0, "nll_term": 2.0, "diversity_term": 1.0,
                                         "minASD": 0.5}])
    rows = io.read_csv(tmp_path / "t.csv")
    assert list(rows[0]) == ["iteration", "objective", "nll_term", "diversity_term", "minASD"]


def test_report_files(tmp_path, small):
    inst = build_multifuture_eval(small, 2)
    r = evaluate(lambda h, K, s: np.random.default_rng(s).normal(size=(K, 8, 2)), inst, 2, [0, 1])
    path = io.save_report(tmp_path / "r.json", {"m": r}, {"x": 1})
    doc = io.load_report(path)
    assert doc["reports"]["m"]["metrics"]["minADE"] == {"mean": r.mean["minADE"], "std": r.std["minADE"]}
    assert len(io.report_rows({"m": r})) == 6


# -- SVG ---------------------------------------------------------------------------------

def test_single_trajectory_svg():
    traj = np.cumsum(np.ones((8, 2)), axis=0)
    svg = render_trajectories_svg([Layer("p", traj[None])])
    lines = re.findall(r'<polyline points="([^"]+)"', svg)
    assert len(lines) == 1 and len(lines[0].split()) == 8
    assert svg.startswith("<?xml") and 'version="1.1"' in svg


def test_colours_and_determinism():
    rng = np.random.default_rng(0)
    layers = [Layer("pred", rng.normal(size=(3, 8, 2))), Layer("gt", rng.normal(size=(1, 8, 2)), "ground_truth")]
    a = render_trajectories_svg(layers, Scene(), "t")
    assert a == render_trajectories_svg(layers, Scene(), "t")
    assert 'stroke="#d62728"' in a and 'stroke="#2ca02c"' in a
    assert a.count("<circle") == 4


def test_viewport_has_margin():
    traj = np.array([[[0.0, 0.0], [10.0, 10.0]]])
    svg = render_trajectories_svg([Layer("p", traj)])
    pts = [tuple(map(float, p.split(","))) for p in re.findall(r'<polyline points="([^"]+)"', svg)[0].split()]
    # 10 m span in a 12 m window of 480 px: 40 px margin on each side
    assert pts[0] == pytest.approx((40.0, 440.0)) and pts[1] == pytest.approx((440.0, 40.0))


def test_svg_errors():
    with pytest.raises(ValueError):
        render_trajectories_svg([])
    with pytest.raises(ValueError):
        render_quality_diversity_trace([(1.0, 2.0)])


def test_quality_diversity_trace():
    svg = render_quality_diversity_trace([(0.0, 5.0), (3.0, 1.0)], "trace")
    assert svg == render_quality_diversity_trace([(0.0, 5.0), (3.0, 1.0)], "trace")
    assert len(re.findall("<polyline", svg)) == 1
    assert 'fill="red"' in svg and 'fill="blue"' in svg
    assert ">ASD<" in svg and ">ADE<" in svg
