"""Small masking ablation: train with and without token masking and compare.

Three seeds at 1000 steps, so expect noisy numbers: the absorption gap is a
fraction of a point and can change sign at this budget. The acceptance suite
runs the full five-seed, 2000-step version.

    python3 demos/masking_ablation.py
"""

import numpy as np

from sae_forge.evaluation import EvalConfig, build_eval_data, evaluate_all
from sae_forge.synthgen import GeneratorConfig
from sae_forge.trainer import TrainConfig, train

gen = GeneratorConfig()
ecfg = EvalConfig(n_rows=2048, ood_rows=2048)
data = build_eval_data(gen, ecfg)  # one fixed evaluation set for every run

names = ("absorption_free", "explained_variance", "ood_auc_sae")
table = {}
for p in (0.0, 0.3):
    rows = []
    for seed in (1, 2, 3):
        r = train(TrainConfig(seed=seed, p_mask=p, steps=1000), gen)
        rep = evaluate_all(r.sae, gen, ecfg, data=data)
        rows.append([rep.values[n] for n in names])
    table[p] = np.mean(rows, axis=0)

print(f"{'metric':20s} {'p=0':>9s} {'p=0.3':>9s}")
for i, n in enumerate(names):
    print(f"{n:20s} {table[0.0][i]:9.3f} {table[0.3][i]:9.3f}")
