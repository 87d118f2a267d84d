"""Local and global interpretation on the four-way mixture dataset.

Each mixture sample is tagged with the interaction that generated its label,
so the per-tag average of the reweighter output shows how well routing
follows the data. Takes under a minute.

Run: python3 demos/04_interpret.py
"""
import numpy as np

from intermoe.interpret import agreement_analysis, expert_accuracy_comparison, global_report, local_report
from intermoe.synthdata import GenSpec, generate
from intermoe.trainer import TrainConfig, split, train_run

data = generate(GenSpec(kind="mixture", n_samples=2000, noise_sigma=0.2, seed=0))
train, val, test = split(data, seed=0)
model = train_run(TrainConfig(seed=0), data, (train, val, test)).model
names = [k.label for k in model.kinds]

records = local_report(model, test)
r = records[0]
print(f"sample {r.index}: label {r.label}, correct {r.correct}")
for name, w, c in zip(names, r.weights, r.contributions):
    print(f"  {name:<5} weight {w:.3f}  contribution {np.round(c, 3)}")

print("\nglobal weight distribution")
for stat in global_report(records, names).experts:
    print(f"  {stat.expert:<5} mean {stat.mean:.3f}  median {stat.median:.3f}  "
          f"min {stat.min:.3f}  max {stat.max:.3f}")

print("\nmean weights by generating interaction")
weights = np.array([rec.weights for rec in records])
tags = np.asarray(test.tags)
for tag in names:
    print(f"  {tag:<5}", np.round(weights[tags == tag].mean(axis=0), 3))

print("\nexpert agreement (% of test samples)")
for row, pct in agreement_analysis(model, test).items():
    print(f"  {row:<20} {pct:6.2f}")

print("\naccuracy per expert")
for row in expert_accuracy_comparison(model, test):
    print(f"  {row['expert']:<9} {row['accuracy']:.3f}")
