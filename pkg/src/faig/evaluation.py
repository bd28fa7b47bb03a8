"""Validation protocols for discovered filters: masking, retraining, degradation prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import degrade as dg
from .model import FilterSet, ModelParams, filter_mask, forward, layer_shapes

PSNR_CAP = 100.0
GRAY = (0.299, 0.587, 0.114)
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


def _np(x) -> np.ndarray:
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


def psnr_rgb(a, b, cap: float | None = None) -> float:
    """PSNR over all RGB values on the [0, 1] scale; ``inf`` for identical inputs unless capped."""
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    value = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return min(value, cap) if cap is not None else value


def to_gray(img) -> np.ndarray:
    img = _np(img).astype(np.float64)
    return GRAY[0] * img[..., 0, :, :] + GRAY[1] * img[..., 1, :, :] + GRAY[2] * img[..., 2, :, :]


def gradient_mse(a, b) -> float:
    """MSE between forward-difference gradients of the gray versions of two images.

    Both directions are pooled: the mean runs over every valid x- and y-difference.
    """
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = to_gray(a) - to_gray(b)
    dx = np.diff(d, axis=-1)
    dy = np.diff(d, axis=-2)
    return float((np.sum(dx ** 2) + np.sum(dy ** 2)) / (dx.size + dy.size))


def mask_filters(target: ModelParams, baseline: ModelParams, filters: FilterSet) -> ModelParams:
    """Copy of ``target`` whose selected K*K weights are taken from ``baseline``; biases untouched."""
    if target.spec != baseline.spec:
        raise ValueError(f"model specs differ: {target.spec} vs {baseline.spec}")
    sel = filter_mask(target.spec, filters)
    return target.with_weight_vector(torch.where(sel, baseline.weight_vector(), target.weight_vector()))


def _outputs(params: ModelParams, samples: Sequence[dg.PairedSample], chunk: int = 16) -> list[np.ndarray]:
    outs = []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            if len({s.lr.shape for s in part}) == 1:
                outs.extend(forward(params, np.stack([s.lr for s in part])).numpy())
            else:
                outs.extend(forward(params, s.lr).numpy() for s in part)
    return outs


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=0)) if len(v) > 1 else 0.0


# A selector maps (method, selected degradation, fraction) to a FilterSet.
Selector = Callable[[str, str, float], FilterSet]


def mask_sweep(target: ModelParams, baseline: ModelParams, selector: Selector,
               methods: Sequence[tuple[str, str]], fractions: Sequence[float],
               eval_sets: Mapping[str, Sequence[dg.PairedSample]], seed: int = 0) -> list[dict]:
    """One row per (method, selected degradation, fraction, input degradation).

    ``grad_mse`` compares the target's and the masked model's outputs on the
    same input; ``psnr`` scores the masked output against the ground truth.
    """
    if list(fractions) != sorted(fractions):
        raise ValueError("fractions must be ascending")
    ref = {tag: _outputs(target, samples) for tag, samples in eval_sets.items()}
    rows = []
    for method, sel_deg in methods:
        for frac in fractions:
            if frac == 0:
                masked, n_sel = target, 0
            else:
                chosen = selector(method, sel_deg, frac)
                masked, n_sel = mask_filters(target, baseline, chosen), len(chosen)
            for tag, samples in eval_sets.items():
                outs = ref[tag] if masked is target else _outputs(masked, samples)
                gm = [gradient_mse(o, r) for o, r in zip(outs, ref[tag])]
                ps = [psnr_rgb(np.clip(o, 0, 1), s.hr, PSNR_CAP) for o, s in zip(outs, samples)]
                rows.append(dict(seed=seed, method=method, selected=sel_deg, fraction=frac,
                                 num_filters=n_sel, input=tag, grad_mse=float(np.mean(gm)),
                                 psnr=float(np.mean(ps))))
    return rows


def aggregate(rows: Sequence[dict], keys: Sequence[str], values: Sequence[str]) -> list[dict]:
    """Group rows by ``keys`` and report mean/std of ``values`` across seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, members in groups.items():
        row = dict(zip(keys, key))
        row["seeds"] = " ".join(str(m["seed"]) for m in members)
        for v in values:
            row[f"{v}_mean"], row[f"{v}_std"] = mean_std([m[v] for m in members])
        out.append(row)
    return out


def evaluate_sets(params: ModelParams, eval_sets: Mapping[str, Sequence[dg.PairedSample]]) -> dict[str, float]:
    return {tag: float(np.mean([psnr_rgb(np.clip(o, 0, 1), s.hr, PSNR_CAP)
                                for o, s in zip(_outputs(params, samples), samples)]))
            for tag, samples in eval_sets.items()}


TASK_DEGRADATION = {"deblur": "blur", "denoise": "noise"}


def retrain_report(baseline: ModelParams, target: ModelParams, selector: Selector,
                   methods: Sequence[str], dataset: Sequence[np.ndarray], train_cfg,
                   eval_sets: Mapping[str, Sequence[dg.PairedSample]], fraction: float = 0.01,
                   tasks: Sequence[str] = ("deblur", "denoise"), seed: int = 0,
                   upper_bound: bool = True, progress: Callable[[str], None] | None = None) -> list[dict]:
    """Retrain selected filter locations of the baseline per task and score the results.

    Method ``faig_other`` uses the FAIG locations of the other task's degradation.
    Task ``deblur`` trains on always-blurred data, ``denoise`` on always-noisy data.
    """
    from dataclasses import replace

    from .attrib import COMPLEMENT
    from .model import enumerate_filters, filterset_from_indices
    from .train import retrain_selected

    rows = []
    for task in tasks:
        deg = TASK_DEGRADATION[task]
        cfg = replace(train_cfg, policy=deg, seed=seed)
        runs = list(methods) + (["upper"] if upper_bound else [])
        for method in runs:
            if method == "upper":
                chosen = filterset_from_indices(baseline.spec, [f.flat_index for f in enumerate_filters(baseline.spec)])
            elif method == "faig_other":
                chosen = selector("faig", COMPLEMENT[deg], fraction)
            else:
                chosen = selector(method, deg, fraction)
            if progress:
                progress(f"retrain task={task} method={method} filters={len(chosen)}")
            model = retrain_selected(baseline, chosen, dataset, cfg)
            for tag, value in evaluate_sets(model, eval_sets).items():
                rows.append(dict(seed=seed, task=task, method=method, num_filters=len(chosen),
                                 input=tag, psnr=value))
    return rows


def overlap_score(per_image: FilterSet, per_degradation: FilterSet) -> float:
    if len(per_image) == 0:
        raise ValueError("per-image filter set is empty")
    if per_image.total != per_degradation.total:
        raise ValueError("filter sets come from different model specs")
    inter = np.intersect1d(per_image.indices, per_degradation.indices)
    return len(inter) / len(per_image)


@dataclass(frozen=True)
class Thresholds:
    t_blur: float = 0.5
    t_noise: float = 0.6

    def __post_init__(self):
        for v in (self.t_blur, self.t_noise):
            if not 0 < v < 1:
                raise ValueError(f"thresholds must lie in (0, 1), got {v}")

    def for_degradation(self, d: str) -> float:
        return {"blur": self.t_blur, "noise": self.t_noise}[d]


PAPER_THRESHOLDS = Thresholds(t_blur=0.5, t_noise=0.6)


def _pseudo_gt(baseline: ModelParams, sample: dg.PairedSample) -> dg.PairedSample:
    with torch.no_grad():
        hr = forward(baseline, sample.lr).clamp(0, 1).numpy()
    return dg.PairedSample(lr=sample.lr, hr=hr, spec=sample.spec)


def image_filter_scores(samples: Sequence[dg.PairedSample], target: ModelParams, baseline: ModelParams,
                        steps: int = 100, pseudo_gt: bool = False, chunk: int = 16) -> np.ndarray:
    """``(B, F)`` per-image |FAIG| filter scores, the input to every overlap score.

    ``pseudo_gt`` replaces the true HR with the baseline output; experimental,
    not what the reported accuracies use.
    """
    from .attrib import per_image_filter_scores

    if target.equal(baseline):
        raise ValueError("target equals baseline; path attribution is undefined")
    if pseudo_gt:
        samples = [_pseudo_gt(baseline, s) for s in samples]
    return per_image_filter_scores(target, baseline, samples, steps, "faig", chunk)


def overlap_from_filter_scores(per_filter: np.ndarray, sets: Mapping[str, FilterSet], fraction: float,
                               spec) -> list[dict[str, float]]:
    from .attrib import select_top

    out = []
    for row in np.atleast_2d(per_filter):
        mine = select_top(row, fraction, spec)
        out.append({d: overlap_score(mine, s) for d, s in sets.items()})
    return out


def overlap_scores(samples: Sequence[dg.PairedSample], sets: Mapping[str, FilterSet],
                   target: ModelParams, baseline: ModelParams, fraction: float = 0.01,
                   steps: int = 100, pseudo_gt: bool = False, chunk: int = 16) -> list[dict[str, float]]:
    """OS(x, D) for every sample and every degradation set."""
    per_filter = image_filter_scores(samples, target, baseline, steps, pseudo_gt, chunk)
    return overlap_from_filter_scores(per_filter, sets, fraction, target.spec)


def predict_degradation(sample: dg.PairedSample, sets: Mapping[str, FilterSet], thresholds: Thresholds,
                        target: ModelParams, baseline: ModelParams, fraction: float = 0.01,
                        steps: int = 100, pseudo_gt: bool = False) -> set[str]:
    os_ = overlap_scores([sample], sets, target, baseline, fraction, steps, pseudo_gt)[0]
    return labels_from_scores(os_, thresholds)


def labels_from_scores(os_: Mapping[str, float], thresholds: Thresholds) -> set[str]:
    return {d for d, v in os_.items() if v >= thresholds.for_degradation(d)}


def balanced_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    return 0.5 * (np.mean(pred[truth]) + np.mean(~pred[~truth]))


def calibrate_threshold(scores: Sequence[float], labels: Sequence[bool],
                        grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """Grid threshold maximizing balanced accuracy of ``score >= t``; ties go to the lowest."""
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("calibration needs both positive and negative examples")
    best_t, best = None, -1.0
    for t in grid:
        acc = balanced_accuracy(s >= t, y)
        if acc > best + 1e-12:
            best_t, best = t, acc
    return float(best_t)


def calibrate_thresholds(samples: Sequence[dg.PairedSample], sets: Mapping[str, FilterSet],
                         target: ModelParams, baseline: ModelParams, fraction: float = 0.01,
                         steps: int = 100, os_values: Sequence[Mapping[str, float]] | None = None) -> Thresholds:
    """Per-degradation thresholds from a labelled calibration set (labels from each sample's spec)."""
    if os_values is None:
        os_values = overlap_scores(samples, sets, target, baseline, fraction, steps)
    t = {}
    for d in ("blur", "noise"):
        truth = [d in s.spec.tag.split("+") for s in samples]
        t[d] = calibrate_threshold([o[d] for o in os_values], truth)
    return Thresholds(t_blur=t["blur"], t_noise=t["noise"])


@dataclass(frozen=True)
class PredictionSetup:
    """Per-degradation set sizes and threshold for the overlap-score rule."""
    thresholds: Thresholds
    image_fraction: Mapping[str, float]
    set_fraction: Mapping[str, float]
    calib_accuracy: Mapping[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        out = dict(t_blur=self.thresholds.t_blur, t_noise=self.thresholds.t_noise)
        for d in ("blur", "noise"):
            out[f"image_fraction_{d}"] = self.image_fraction[d]
            out[f"set_fraction_{d}"] = self.set_fraction[d]
            if d in self.calib_accuracy:
                out[f"calib_accuracy_{d}"] = self.calib_accuracy[d]
        return out


def _truth(samples: Sequence[dg.PairedSample], d: str) -> np.ndarray:
    return np.array([d in s.spec.tag.split("+") for s in samples])


def calibrate_prediction(per_filter: np.ndarray, samples: Sequence[dg.PairedSample],
                         degradation_scores: Mapping[str, np.ndarray], spec,
                         fractions: Sequence[float], grid: Sequence[float] = THRESHOLD_GRID) -> PredictionSetup:
    """Search per-image fraction, degradation-set fraction and threshold per degradation.

    Each degradation is calibrated on its own: the best balanced accuracy on the
    calibration samples wins, ties going to the smaller image fraction, then the
    smaller set fraction, then the lower threshold.
    """
    from .attrib import select_top

    fractions = sorted(set(fractions))
    best = {}
    for d, scores in degradation_scores.items():
        truth = _truth(samples, d)
        for fi in fractions:
            for fd in fractions:
                os_ = [o[d] for o in overlap_from_filter_scores(per_filter, {d: select_top(scores, fd, spec)},
                                                                fi, spec)]
                t = calibrate_threshold(os_, truth, grid)
                acc = balanced_accuracy(np.asarray(os_) >= t, truth)
                if d not in best or acc > best[d][0] + 1e-12:
                    best[d] = (acc, fi, fd, t)
    return PredictionSetup(
        thresholds=Thresholds(t_blur=best["blur"][3], t_noise=best["noise"][3]),
        image_fraction={d: b[1] for d, b in best.items()},
        set_fraction={d: b[2] for d, b in best.items()},
        calib_accuracy={d: float(b[0]) for d, b in best.items()})


def predict_with_setup(per_filter: np.ndarray, degradation_scores: Mapping[str, np.ndarray], spec,
                       setup: PredictionSetup) -> list[dict[str, float]]:
    """Overlap scores under a calibrated setup; each degradation uses its own set sizes."""
    from .attrib import select_top

    cols = {}
    for d, scores in degradation_scores.items():
        sets = {d: select_top(scores, setup.set_fraction[d], spec)}
        cols[d] = [o[d] for o in overlap_from_filter_scores(per_filter, sets, setup.image_fraction[d], spec)]
    n = len(next(iter(cols.values())))
    return [{d: cols[d][i] for d in cols} for i in range(n)]


def prediction_report(ids: Sequence[str], samples: Sequence[dg.PairedSample],
                      os_values: Sequence[Mapping[str, float]], thresholds: Thresholds | PredictionSetup
                      ) -> tuple[list[dict], dict]:
    setup = thresholds if isinstance(thresholds, PredictionSetup) else None
    if setup is not None:
        thresholds = setup.thresholds
    rows, correct = [], {"blur": 0, "noise": 0}
    for img_id, s, o in zip(ids, samples, os_values):
        truth = set(s.spec.tag.split("+")) - {"clean"}
        pred = labels_from_scores(o, thresholds)
        for d in correct:
            correct[d] += (d in truth) == (d in pred)
        rows.append(dict(image=img_id, true="+".join(sorted(truth)) or "clean",
                         os_blur=o["blur"], os_noise=o["noise"],
                         predicted="+".join(sorted(pred)) or "clean"))
    n = len(rows)
    summary = {f"accuracy_{d}": c / n for d, c in correct.items()}
    summary.update(setup.summary() if setup else dict(t_blur=thresholds.t_blur, t_noise=thresholds.t_noise))
    summary["num_images"] = n
    return rows, summary


def filter_distribution(filters: FilterSet, spec, bins: int = 10) -> tuple[list[dict], list[dict]]:
    """Per-layer counts (layer order) and a histogram over normalized depth in (0, 1]."""
    shapes = layer_shapes(spec)
    counts = {name: 0 for name, _, _ in shapes}
    for f in filters.ids:
        counts[f.layer] += 1
    n_layers = len(shapes)
    per_layer = [dict(layer=name, position=i + 1, depth=(i + 1) / n_layers, count=counts[name],
                      size=o * c) for i, (name, o, c) in enumerate(shapes)]
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist = np.zeros(bins, dtype=int)
    for row in per_layer:
        b = min(bins - 1, max(0, math.ceil(round(row["depth"] * bins, 9)) - 1))
        hist[b] += row["count"]
    histogram = [dict(bin_lo=float(edges[i]), bin_hi=float(edges[i + 1]), count=int(hist[i]))
                 for i in range(bins)]
    return per_layer, histogram


def mean_depth(filters: FilterSet, spec) -> float:
    per_layer, _ = filter_distribution(filters, spec)
    total = sum(r["count"] for r in per_layer)
    return sum(r["depth"] * r["count"] for r in per_layer) / total if total else float("nan")
