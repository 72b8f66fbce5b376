"""Train one Matryoshka BatchTopK SAE on the toy generator and print its report.

    python3 demos/train_and_evaluate.py
"""

from sae_forge.evaluation import EvalConfig, evaluate_all
from sae_forge.synthgen import GeneratorConfig
from sae_forge.trainer import TrainConfig, train

gen = GeneratorConfig()
cfg = TrainConfig(k=8, m=256, steps=1000, p_mask=0.3, seed=1)
result = train(cfg, gen)

# loss falls fast, then the dictionary settles
for rec in result.log[::200] + result.log[-1:]:
    print(f"step {rec.step:5d}  recon {rec.recon:.4f}  active/batch {rec.active}")

report = evaluate_all(result.sae, gen, EvalConfig(n_rows=2048, ood_rows=2048))
for name, value in report.values.items():
    print(f"{name:20s} {value:8.3f}")
