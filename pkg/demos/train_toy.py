"""Two-phase training of a small model on synthetic imbalanced data, then per-modality CER.

Takes a few minutes on one CPU core.
"""

from dataclasses import replace

import torch

from uktr.data import SynthConfig
from uktr.evaluation import AblationSetup, Variant, ablation_to_csv, run_variant
from uktr.training import TrainConfig

torch.set_num_threads(1)
setup = AblationSetup(
    synth=SynthConfig(samples=2000),
    eval_per_modality=30,
    general=TrainConfig.for_phase("general", lr_min=1e-4, lr_max=2e-3, epochs=8, batch_size=16),
    adapt=TrainConfig.for_phase("adapt", lr_min=1e-4, lr_max=1e-3, epochs=4, batch_size=16),
)
res = run_variant(setup, Variant("mafs"), seed=0)
for row in res.history:
    print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})
print(ablation_to_csv([res]))
