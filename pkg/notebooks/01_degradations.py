"""
Synthesizing degraded low-resolution inputs
===========================================

Blur with a 21x21 Gaussian (sigma 2), bicubic x2 downsampling, then additive
Gaussian noise (sigma 0.1). The blind policy switches blur and noise on
independently with probability 0.5.
"""

# %%
import numpy as np
import matplotlib.pyplot as plt

from faig import degrade as dg

rng = np.random.default_rng(0)
hr = dg.procedural_image(rng, 128)

# %%
# One ground truth under every degradation tag. The same noise stream is used
# for each tag so the panels differ only by the degradation itself.
tags = ["clean", "blur", "noise", "blur+noise"]
pairs = {t: dg.degrade(hr, dg.spec_for(t), np.random.default_rng(1)) for t in tags}

fig, axes = plt.subplots(1, 5, figsize=(14, 3))
axes[0].imshow(hr.transpose(1, 2, 0))
axes[0].set_title("ground truth")
for ax, t in zip(axes[1:], tags):
    ax.imshow(pairs[t].lr.transpose(1, 2, 0), interpolation="nearest")
    ax.set_title(t)
for ax in axes:
    ax.axis("off")
fig.tight_layout()

# %%
# Blind-policy frequencies over a large batch of patches.
batch = dg.sample_training_batch([hr], "blind", rng, batch_size=2000, patch_size=32)
counts = {t: sum(s.spec.tag == t for s in batch) for t in tags}
print(counts)

# %%
# The noise really has the requested standard deviation.
flat = np.full((3, 256, 256), 0.5, dtype=np.float32)
noisy = dg.degrade(flat, dg.DegradationSpec(use_noise=True, scale=1), rng)
print("noise std:", float(np.std(noisy.lr - flat)))

if __name__ == "__main__":
    plt.show()
