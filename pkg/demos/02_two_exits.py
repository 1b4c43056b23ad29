"""The toy intersection: independent samples miss the rare exit, a learned set does not.

Ninety percent of simulated vehicles turn right and ten percent go straight.
After training the flow we draw samples for a car arriving at the junction:
first independently, then as a K=2 set from the diversity sampler.  Expect a
few minutes on one CPU, most of it flow training.

    python demos/02_two_exits.py
"""

import numpy as np

from flowcast.dsf import predict, train_dsf_batch
from flowcast.experiments import RunConfig, build_data, coverage_report, intersection_observation, train_backbone
from flowcast.flow import sample_iid
from flowcast.sim import classify_endpoints

cfg = RunConfig()
dataset, _ = build_data(cfg)
labels, counts = np.unique(dataset.modes, return_counts=True)
print("training data:", dict(zip(labels.tolist(), counts.tolist())))

flow, curve = train_backbone(cfg, dataset)
print(f"flow NLL {curve[0]:.2f} -> {curve[-1]:.2f} over {len(curve)} epochs")

obs = intersection_observation(cfg.sim)
iid = sample_iid(obs, flow, 100, seed=0)
labels, counts = np.unique(classify_endpoints(iid.endpoints, cfg.sim), return_counts=True)
print("100 independent samples end at:", dict(zip(labels.tolist(), counts.tolist())))

for seed in range(3):
    params, _ = train_dsf_batch(flow, dataset.history, cfg.dsf, seed=seed)
    ends = predict(params, flow, obs, seed=seed).endpoints
    print(f"DSF seed {seed}: endpoints {ends.round(1).tolist()} ->",
          coverage_report(ends, cfg.sim, cfg.mode_radius).summary())
