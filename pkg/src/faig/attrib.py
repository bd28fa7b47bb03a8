"""Filter attribution along a straight parameter-space path (FAIG) and comparison selectors.

For a baseline ``theta_bar`` (bicubic-only model) and a fine-tuned target
``theta``, the attribution of scalar ``i`` for one input is

    (theta - theta_bar)_i * 1/N * sum_{k=1..N} dL/dgamma_i  at  gamma = theta_bar + k/N (theta - theta_bar)

with ``L`` the MSE to the ground truth. Summed over every scalar (biases
included) this telescopes to approximately ``L(theta) - L(theta_bar)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.func import grad, vmap

from . import degrade as dg
from .model import (Conv, FilterSet, ModelParams, apply, enumerate_filters, filter_count,
                    filterset_from_indices)

COMPLEMENT = {"blur": "noise", "noise": "blur"}


@dataclass
class AttributionTable:
    per_param: np.ndarray          # (P_w,) signed, weights only, canonical order
    per_filter: np.ndarray         # (F,) sum of |per_param| within each filter
    per_bias: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class DegradationScoreTable:
    scores: np.ndarray             # (F,)
    degradation: str
    dataset_id: str = ""
    meta: dict = field(default_factory=dict)


def _check_pair(target: ModelParams, baseline: ModelParams) -> None:
    if target.spec != baseline.spec:
        raise ValueError(f"model specs differ: {target.spec} vs {baseline.spec}")
    for name in target.layers:
        if name not in baseline.layers:
            raise ValueError(f"layer {name!r} missing from baseline")


def _per_sample_grads(spec):
    def sample_loss(layers, x, y):
        return torch.mean((apply(spec, layers, x[None]) - y[None]) ** 2)

    return vmap(grad(sample_loss), in_dims=(None, 0, 0))


def _flatten(grads: dict[str, Conv], batch: int) -> tuple[torch.Tensor, torch.Tensor]:
    w = torch.cat([g.weight.reshape(batch, -1) for g in grads.values()], dim=1)
    b = torch.cat([g.bias.reshape(batch, -1) for g in grads.values()], dim=1)
    return w, b


def _stack(samples: Sequence[dg.PairedSample], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    lr = torch.from_numpy(np.stack([s.lr for s in samples])).to(dtype)
    hr = torch.from_numpy(np.stack([s.hr for s in samples])).to(dtype)
    return lr, hr


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def path_gradient_sum(grad_at, steps: int):
    """Right-endpoint Riemann sum ``sum_{k=1..N} grad_at(k/N)``, accumulated in float64.

    ``grad_at`` returns a tensor or a tuple of tensors.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    acc = None
    for k in range(1, steps + 1):
        g = grad_at(k / steps)
        g = tuple(x.double() for x in g) if isinstance(g, tuple) else (g.double(),)
        acc = g if acc is None else tuple(a + b for a, b in zip(acc, g))
    return acc if len(acc) > 1 else acc[0]


def faig_batch(target: ModelParams, baseline: ModelParams, samples: Sequence[dg.PairedSample],
               steps: int = 100, chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample signed attributions, shapes ``(B, P_w)`` and ``(B, P_b)`` in float64."""
    _check_pair(target, baseline)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dtype = next(iter(target.layers.values())).weight.dtype
    fn = _per_sample_grads(target.spec)
    delta = {k: Conv(target.layers[k].weight - baseline.layers[k].weight,
                     target.layers[k].bias - baseline.layers[k].bias) for k in target.layers}
    dw = torch.cat([d.weight.reshape(-1) for d in delta.values()]).double()
    db = torch.cat([d.bias.reshape(-1) for d in delta.values()]).double()
    out_w, out_b = [], []
    for part in _chunks(list(samples), chunk):
        lr, hr = _stack(part, dtype)

        def grad_at(alpha, lr=lr, hr=hr, n=len(part)):
            gamma = {name: Conv(baseline.layers[name].weight + alpha * d.weight,
                                baseline.layers[name].bias + alpha * d.bias)
                     for name, d in delta.items()}
            with torch.no_grad():
                return _flatten(fn(gamma, lr, hr), n)

        sum_w, sum_b = path_gradient_sum(grad_at, steps)
        out_w.append((sum_w / steps * dw).numpy())
        out_b.append((sum_b / steps * db).numpy())
    return np.concatenate(out_w), np.concatenate(out_b)


def ig_batch(target: ModelParams, samples: Sequence[dg.PairedSample], steps: int = 100,
             chunk: int = 16) -> np.ndarray:
    """Parameter gradients averaged along the input path from a black image to ``lr``."""
    dtype = next(iter(target.layers.values())).weight.dtype
    fn = _per_sample_grads(target.spec)
    out = []
    for part in _chunks(list(samples), chunk):
        lr, hr = _stack(part, dtype)

        def grad_at(alpha, lr=lr, hr=hr, n=len(part)):
            with torch.no_grad():
                return _flatten(fn(target.layers, lr * alpha, hr), n)[0]

        out.append((path_gradient_sum(grad_at, steps) / steps).numpy())
    return np.concatenate(out)


def per_filter_abs(per_param: np.ndarray, kernel_size: int) -> np.ndarray:
    """Sum |attribution| over the K*K scalars of each filter (last axis)."""
    a = np.abs(per_param)
    return a.reshape(*a.shape[:-1], -1, kernel_size * kernel_size).sum(axis=-1)


def faig_per_param(target: ModelParams, baseline: ModelParams, sample: dg.PairedSample,
                   steps: int = 100) -> AttributionTable:
    w, b = faig_batch(target, baseline, [sample], steps)
    return AttributionTable(
        per_param=w[0], per_bias=b[0], per_filter=per_filter_abs(w[0], target.spec.kernel_size),
        meta=dict(method="faig", degradation=sample.spec.tag, steps=steps,
                  target=target.digest(), baseline=baseline.digest()))


def ig_input_space_scores(target: ModelParams, sample: dg.PairedSample, steps: int = 100) -> AttributionTable:
    w = ig_batch(target, [sample], steps)[0]
    return AttributionTable(per_param=w, per_filter=per_filter_abs(w, target.spec.kernel_size),
                            meta=dict(method="ig", degradation=sample.spec.tag, steps=steps,
                                      target=target.digest()))


def per_image_filter_scores(target: ModelParams, baseline: ModelParams,
                            samples: Sequence[dg.PairedSample], steps: int = 100,
                            method: str = "faig", chunk: int = 16) -> np.ndarray:
    """``(B, F)`` per-filter |attribution| for each sample."""
    if method == "faig":
        w, _ = faig_batch(target, baseline, samples, steps, chunk)
    elif method == "ig":
        w = ig_batch(target, samples, steps, chunk)
    else:
        raise ValueError(f"unknown attribution method {method!r}")
    return per_filter_abs(w, target.spec.kernel_size)


def dataset_attribution(target: ModelParams, baseline: ModelParams, gts: Sequence[np.ndarray],
                        tag: str, steps: int = 100, seed: int = 0, method: str = "faig",
                        chunk: int = 16) -> np.ndarray:
    """Sum over the dataset of per-filter |attribution| for inputs degraded by ``tag``.

    The noise stream of image ``i`` is seeded by ``(seed, i)``, so the same GT
    gives the same content under every tag.
    """
    if len(gts) == 0:
        raise ValueError("attribution dataset is empty")
    samples = dg.make_pairs(gts, tag, seed, scale=target.spec.scale)
    per_image = per_image_filter_scores(target, baseline, samples, steps, method, chunk)
    total = np.zeros(per_image.shape[1])
    for row in per_image:            # fixed-order reduction
        total += row
    return total


def discriminative_scores(target: ModelParams, baseline: ModelParams, gts: Sequence[np.ndarray],
                          degradation: str, steps: int = 100, seed: int = 0, other: str | None = None,
                          subtract_other: bool = True, method: str = "faig",
                          dataset_id: str = "", chunk: int = 16) -> DegradationScoreTable:
    """Dataset-averaged |attribution| for ``degradation`` minus that for the other degradation."""
    if len(gts) == 0:
        raise ValueError("attribution dataset is empty")
    _check_pair(target, baseline)
    pos = dataset_attribution(target, baseline, gts, degradation, steps, seed, method, chunk)
    scores = pos.copy()
    other = other or COMPLEMENT.get(degradation)
    if subtract_other:
        if other is None:
            raise ValueError(f"no complementary degradation known for {degradation!r}")
        scores -= dataset_attribution(target, baseline, gts, other, steps, seed, method, chunk)
    return DegradationScoreTable(
        scores=scores / len(gts), degradation=degradation, dataset_id=dataset_id,
        meta=dict(method=method, steps=steps, seed=seed, other=other if subtract_other else None,
                  subtract_other=subtract_other, num_images=len(gts),
                  target=target.digest(), baseline=baseline.digest()))


def combine_scores(pos_sum: np.ndarray, neg_sum: np.ndarray | None, n: int, degradation: str,
                   **meta) -> DegradationScoreTable:
    """Assemble a score table from precomputed dataset sums (see :func:`dataset_attribution`)."""
    scores = pos_sum.copy() if neg_sum is None else pos_sum - neg_sum
    return DegradationScoreTable(scores=scores / n, degradation=degradation, meta=meta,
                                 dataset_id=meta.pop("dataset_id", ""))


def abs_delta_scores(target: ModelParams, baseline: ModelParams) -> DegradationScoreTable:
    _check_pair(target, baseline)
    delta = (target.weight_vector() - baseline.weight_vector()).double().numpy()
    return DegradationScoreTable(scores=per_filter_abs(delta, target.spec.kernel_size),
                                 degradation="any", meta=dict(method="absdelta"))


def top_count(fraction: float, total: int) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return min(total, math.ceil(round(fraction * total, 9)))


def ranking(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending flat index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def select_top(table: DegradationScoreTable | np.ndarray, fraction: float, spec) -> FilterSet:
    scores = table.scores if isinstance(table, DegradationScoreTable) else np.asarray(table)
    if len(scores) != filter_count(spec):
        raise ValueError(f"{len(scores)} scores for a model with {filter_count(spec)} filters")
    chosen = ranking(scores)[:top_count(fraction, len(scores))]
    return filterset_from_indices(spec, chosen, scores[chosen])


def random_filterset(spec, fraction: float, seed: int) -> FilterSet:
    total = filter_count(spec)
    rng = np.random.default_rng([seed, 0xF1])
    chosen = np.sort(rng.choice(total, size=top_count(fraction, total), replace=False))
    return filterset_from_indices(spec, chosen)


# ---------------------------------------------------------------------------
# serialization


def save_score_table(path: str | Path, table: DegradationScoreTable, **manifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), np.asarray(table.scores, dtype="<f8"))
    meta = {**table.meta, "degradation": table.degradation, "dataset_id": table.dataset_id, **manifest}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_score_table(path: str | Path) -> DegradationScoreTable:
    path = Path(path)
    scores = np.load(path.with_suffix(".npy"))
    meta = json.loads(path.with_suffix(".json").read_text())
    return DegradationScoreTable(scores=scores, degradation=meta.pop("degradation"),
                                 dataset_id=meta.pop("dataset_id", ""), meta=meta)


def save_attribution_table(path: str | Path, table: AttributionTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(per_param=table.per_param, per_filter=table.per_filter)
    if table.per_bias is not None:
        arrays["per_bias"] = table.per_bias
    np.savez(path.with_suffix(".npz"), **{k: np.asarray(v, dtype="<f8") for k, v in arrays.items()})
    path.with_suffix(".json").write_text(json.dumps(table.meta, indent=2, sort_keys=True) + "\n")


def load_attribution_table(path: str | Path) -> AttributionTable:
    path = Path(path)
    with np.load(path.with_suffix(".npz")) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(path.with_suffix(".json").read_text())
    return AttributionTable(per_param=arrays["per_param"], per_filter=arrays["per_filter"],
                            per_bias=arrays.get("per_bias"), meta=meta)


def write_filterset_csv(path: str | Path, filters: FilterSet, comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["layer", "out_ch", "in_ch", "flat_index", "score"])
        scores = filters.scores or (float("nan"),) * len(filters)
        for f, s in zip(filters.ids, scores):
            w.writerow([f.layer, f.out_ch, f.in_ch, f.flat_index, repr(float(s))])


def read_filterset_csv(path: str | Path, spec) -> FilterSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    known = {(f.layer, f.out_ch, f.in_ch): f.flat_index for f in enumerate_filters(spec)}
    idx = []
    for r in rows:
        key = (r["layer"], int(r["out_ch"]), int(r["in_ch"]))
        if key not in known or known[key] != int(r["flat_index"]):
            raise ValueError(f"filter {key} does not belong to model spec {spec}")
        idx.append(known[key])
    return filterset_from_indices(spec, idx, [float(r["score"]) for r in rows])
