"""Why the untrained identity model does not score at chance level.

With identity flows both class densities are the same standard normal, so
alpha == beta and the Beta variance is a decreasing function of that density.
The OoD ring lives at larger feature norm than the moons, so it already gets
the higher variance before any training.

    python demos/null_model.py
"""

import numpy as np

from fepn import FrozenBackbone, auroc, make_scene
from fepn.flow import beta_field_from_flows
from fepn.metrics import variance_score
from fepn.train import TrainConfig, init_models

cfg = TrainConfig()
flows, _ = init_models(cfg)
for bb_seed in range(3):
    bb = FrozenBackbone.from_seed(bb_seed, cfg.dim)
    grid = make_scene(64, 64, 0.25, 0, bb)
    norm = np.linalg.norm(grid.features, axis=-1)
    field = beta_field_from_flows(flows, grid)
    same = np.array_equal(field.alpha, field.beta)
    print(
        f"backbone {bb_seed}: alpha == beta everywhere: {same}; "
        f"variance AUROC {auroc(variance_score(field), grid.mask):.3f}; "
        f"feature-norm AUROC {auroc(norm, grid.mask):.3f}"
    )
