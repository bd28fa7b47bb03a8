"""Pass/fail evaluation of the desk-scale experiment reports."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

OTHER = {"blur": "noise", "noise": "blur"}
TASK = {"blur": "deblur", "noise": "denoise"}


def _read(path: Path, digest: str | None):
    from .pipeline import read_csv

    return read_csv(path, digest)


def _mask_lookup(rows, fraction):
    """(seed, method, selected, input) -> grad_mse at one fraction."""
    out = {}
    for r in rows:
        if abs(float(r["fraction"]) - fraction) < 1e-12:
            out[(int(r["seed"]), r["method"], r["selected"], r["input"])] = float(r["grad_mse"])
    return out


def _seed_mean(table, method, selected, inp, seeds):
    return float(np.mean([table[(s, method, selected, inp)] for s in seeds]))


def masking_selectivity(rows, fraction=0.01, ratio_random=5.0, ratio_other=0.5) -> dict:
    t = _mask_lookup(rows, fraction)
    seeds = sorted({k[0] for k in t})
    out = {}
    for d in ("blur", "noise"):
        faig_on = _seed_mean(t, "faig", d, d, seeds)
        rand_on = _seed_mean(t, "random", "any", d, seeds)
        faig_off = _seed_mean(t, "faig", d, OTHER[d], seeds)
        out[d] = dict(faig_matched=faig_on, random_matched=rand_on, faig_other_input=faig_off,
                      ratio_vs_random=faig_on / rand_on if rand_on > 0 else float("inf"),
                      ratio_other_vs_matched=faig_off / faig_on if faig_on > 0 else float("inf"))
        out[d]["passed"] = bool(faig_on >= ratio_random * rand_on and faig_off <= ratio_other * faig_on)
    out["passed"] = all(out[d]["passed"] for d in ("blur", "noise"))
    return out


def method_ordering(rows, fraction=0.01, min_seeds=2) -> dict:
    t = _mask_lookup(rows, fraction)
    seeds = sorted({k[0] for k in t})
    out = {}
    for d in ("blur", "noise"):
        per_seed = {}
        for s in seeds:
            f, ig = t[(s, "faig", d, d)], t[(s, "ig", d, d)]
            ab, rn = t[(s, "absdelta", "any", d)], t[(s, "random", "any", d)]
            per_seed[s] = dict(faig=f, ig=ig, absdelta=ab, random=rn, ok=bool(f > ig and f > ab > rn))
        n_ok = sum(v["ok"] for v in per_seed.values())
        out[d] = dict(per_seed=per_seed, seeds_ok=n_ok,
                      passed=n_ok >= min(min_seeds, len(seeds)))
    out["passed"] = all(out[d]["passed"] for d in ("blur", "noise"))
    return out


def ablation(rows, fraction=0.01, factor=3.0, degradation="blur") -> dict:
    t = _mask_lookup(rows, fraction)
    seeds = sorted({k[0] for k in t})
    other = OTHER[degradation]
    nosub = _seed_mean(t, "faig_nosub", degradation, other, seeds)
    full = _seed_mean(t, "faig", degradation, other, seeds)
    return dict(nosub_other_input=nosub, full_other_input=full,
                ratio=nosub / full if full > 0 else float("inf"), passed=bool(nosub >= factor * full))


def retraining(rows, margin=0.3, min_seeds=2) -> dict:
    psnr = {}
    for r in rows:
        psnr[(int(r["seed"]), r["task"], r["method"], r["input"])] = float(r["psnr"])
    seeds = sorted({k[0] for k in psnr})
    out = {}
    for d, task in TASK.items():
        if not any(k[1] == task for k in psnr):
            continue
        per_seed = {}
        for s in seeds:
            up, f, rn = (psnr[(s, task, m, d)] for m in ("upper", "faig", "random"))
            per_seed[s] = dict(upper=up, faig=f, random=rn, baseline=psnr.get((s, "none", "baseline", d)),
                               ok=bool(up >= f >= rn + margin))
        n_ok = sum(v["ok"] for v in per_seed.values())
        out[task] = dict(per_seed=per_seed, seeds_ok=n_ok, passed=n_ok >= min(min_seeds, len(seeds)))
    out["passed"] = all(v["passed"] for k, v in out.items() if isinstance(v, dict))
    return out


def prediction(per_seed_rows, min_accuracy=0.9) -> dict:
    per_seed = {int(r["seed"]): dict(blur=float(r["accuracy_blur"]), noise=float(r["accuracy_noise"]),
                                     t_blur=float(r["t_blur"]), t_noise=float(r["t_noise"]),
                                     num_images=int(r["num_images"]))
                for r in per_seed_rows}
    ok = {s: v["blur"] >= min_accuracy and v["noise"] >= min_accuracy for s, v in per_seed.items()}
    return dict(per_seed=per_seed, passed=bool(per_seed) and all(ok.values()))


def depth_observation(dist_rows) -> dict:
    depth = defaultdict(list)
    for r in dist_rows:
        depth[(int(r["seed"]), r["degradation"])].append((float(r["depth"]), int(r["count"])))
    out = {}
    for (seed, d), vals in depth.items():
        total = sum(c for _, c in vals)
        out.setdefault(seed, {})[d] = sum(x * c for x, c in vals) / total
    return dict(mean_depth=out, deblur_deeper=[bool(v["blur"] > v["noise"]) for v in out.values()])


def acceptance_summary(reports: Path, digest: str | None = None) -> dict:
    reports = Path(reports)
    mask_rows = _read(reports / "mask_table.csv", digest)
    result = dict(
        masking_selectivity=masking_selectivity(mask_rows),
        method_ordering=method_ordering(mask_rows),
        ablation=ablation(mask_rows),
    )
    if (reports / "retrain.csv").exists():
        result["retraining"] = retraining(_read(reports / "retrain.csv", digest))
    if (reports / "predict_per_seed.csv").exists():
        result["prediction"] = prediction(_read(reports / "predict_per_seed.csv", digest))
    if (reports / "distribution.csv").exists():
        result["filter_depth"] = depth_observation(_read(reports / "distribution.csv", digest))
    return result
