"""Why the sampler maximizes the minimum pairwise distance rather than the mean.

Nine identical predictions plus one far outlier look diverse on average but
are not: a mean-based score rewards a single stray sample, while the minimum
stays at zero until every pair is separated.

    python demos/03_min_versus_mean.py
"""

import numpy as np

from flowcast.metrics import self_distance

preds = np.zeros((10, 4, 2))
preds[9] += [6.0, 8.0]
print(f"collapsed set plus one outlier: minASD={self_distance(preds, 'min'):.1f}, "
      f"meanASD={self_distance(preds, 'mean'):.1f}")

spread = np.stack([np.tile([np.cos(a), np.sin(a)], (4, 1)) * 5 for a in np.linspace(0, 2 * np.pi, 10, endpoint=False)])
print(f"ten points on a circle:         minASD={self_distance(spread, 'min'):.1f}, "
      f"meanASD={self_distance(spread, 'mean'):.1f}")
