"""
Reading a desk-scale run
========================

Summarize the reports of ``faig reproduce-all --config configs/desk.ini``:
masking table at 1%, retraining comparison and degradation prediction.
"""

# %%
import json
import sys
from pathlib import Path

from faig.evaluation import aggregate
from faig.pipeline import read_csv

run = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk")
reports = run / "reports"

# %%
rows = [r for r in read_csv(reports / "mask_table.csv") if float(r["fraction"]) == 0.01]
for r in aggregate([{**r, "grad_mse": float(r["grad_mse"])} for r in rows],
                   ("method", "selected", "input"), ("grad_mse",)):
    print(f"{r['method']:>10} {r['selected']:>5} -> {r['input']:>5}: "
          f"{r['grad_mse_mean']:.3e} +- {r['grad_mse_std']:.1e}")

# %%
if (reports / "retrain_summary.csv").exists():
    for r in read_csv(reports / "retrain_summary.csv"):
        if (r["task"], r["input"]) in (("deblur", "blur"), ("denoise", "noise")):
            print(f"{r['task']:>8} {r['method']:>10}: {float(r['psnr_mean']):.3f} dB")

# %%
if (reports / "predict_per_seed.csv").exists():
    for r in read_csv(reports / "predict_per_seed.csv"):
        print(f"seed {r['seed']}: blur {float(r['accuracy_blur']):.2f}, noise {float(r['accuracy_noise']):.2f}")

# %%
if (reports / "summary.json").exists():
    summary = json.loads((reports / "summary.json").read_text())
    print({k: v.get("passed") for k, v in summary.items() if isinstance(v, dict) and "passed" in v})
