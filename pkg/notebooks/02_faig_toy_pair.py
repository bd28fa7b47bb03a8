"""
Attributing a fine-tuned model's new abilities to filters
=========================================================

Train a tiny bicubic-only baseline, fine-tune it on blind data, then integrate
loss gradients along the straight line between the two parameter vectors.
Filters whose attribution is large for blurry inputs but small for noisy
inputs are the candidate deblurring filters.
"""

# %%
import numpy as np
import torch

from faig import attrib, degrade as dg, evaluation as ev, model as m
from faig.train import TrainConfig, finetune_target, train_baseline

spec = m.ModelSpec(channels=8, num_blocks=2)
data = dg.procedural_dataset(24, 64, seed=0)

baseline = train_baseline(spec, data, TrainConfig(iterations=400, batch_size=8, patch_size=32, lr=1e-3))
target = finetune_target(baseline, data, TrainConfig(iterations=400, batch_size=8, patch_size=32,
                                                     lr=5e-4, policy="blind"))
print("filters in the network:", m.filter_count(spec))

# %%
# Completeness: the per-parameter attributions (biases included) add up to
# the loss change between the two models.
sample = dg.make_pairs(data[:1], "blur+noise", seed=3)[0]
b64, t64 = baseline.to(torch.float64), target.to(torch.float64)
table = attrib.faig_per_param(t64, b64, sample, steps=100)
gap = m.loss(t64, sample).item() - m.loss(b64, sample).item()
print(f"sum of attributions {table.per_param.sum() + table.per_bias.sum():+.6f}, loss change {gap:+.6f}")

# %%
# Discriminative scores: blur attribution minus noise attribution, averaged
# over a small set of ground truths.
gts = data[:8]
blur_scores = attrib.discriminative_scores(target, baseline, gts, "blur", steps=50)
noise_scores = attrib.discriminative_scores(target, baseline, gts, "noise", steps=50)
deblur = attrib.select_top(blur_scores, 0.05, spec)
denoise = attrib.select_top(noise_scores, 0.05, spec)
print("top deblurring filters:", [f"{f.layer}[{f.out_ch},{f.in_ch}]" for f in deblur.ids[:5]])

# %%
# Masking: swap the selected filters back to their baseline values and see
# how much the output changes on each kind of input.
evals = {t: dg.make_pairs(data[8:12], t, seed=5) for t in ("blur", "noise")}


def selector(method, degradation, fraction):
    if method == "random":
        return attrib.random_filterset(spec, fraction, seed=0)
    return {"blur": deblur, "noise": denoise}[degradation]


rows = ev.mask_sweep(target, baseline, selector, [("faig", "blur"), ("faig", "noise"), ("random", "any")],
                     [0.05], evals)
for r in rows:
    print(f"{r['method']:>6} {r['selected']:>5} mask, {r['input']:>5} input: grad-MSE {r['grad_mse']:.2e}")

# %%
# Where in the network do the two sets live?
print("mean depth deblur  :", ev.mean_depth(deblur, spec))
print("mean depth denoise :", ev.mean_depth(denoise, spec))
