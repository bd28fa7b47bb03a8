"""Experiment stages behind the command-line interface.

Every artifact records the digest of the configuration it depends on;
downstream stages refuse artifacts whose digest does not match.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attrib as at
from . import degrade as dg
from . import evaluation as ev
from .config import ExperimentConfig
from .model import FilterSet, ModelParams, load_checkpoint, save_checkpoint
from .train import TrainLog, finetune_target, train_baseline

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "attr", "eval", "calib", "holdout")
LABELLED = ("calib", "holdout")
DEGRADATIONS = ("blur", "noise")


class PipelineError(RuntimeError):
    """A stage cannot run: missing or mismatched upstream artifact."""


def write_csv(path: Path, rows: Sequence[dict], digest: str, columns: Sequence[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_csv(path: Path, digest: str | None = None) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if digest is not None and first.strip() != f"# config_digest={digest}":
            raise PipelineError(f"{path} was produced with a different configuration ({first.strip()!r})")
        return list(csv.DictReader(fh))


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, seeds: Sequence[int] | None = None):
        self.cfg = cfg
        self.out = cfg.output_dir
        self.seeds = tuple(seeds) if seeds is not None else cfg.seeds
        self.spec = cfg.model
        self._cache: dict = {}

    # -- layout -------------------------------------------------------------

    def split_dir(self, split: str) -> Path:
        return self.out / "data" / split

    def seed_dir(self, seed: int) -> Path:
        return self.out / f"seed{seed}"

    def checkpoint_path(self, seed: int, which: str) -> Path:
        return self.seed_dir(seed) / f"{which}.npz"

    def score_path(self, seed: int, method: str, degradation: str) -> Path:
        return self.seed_dir(seed) / "scores" / f"{method}_{degradation}"

    @property
    def reports(self) -> Path:
        return self.out / "reports"

    # -- data ---------------------------------------------------------------

    def prepare_data(self) -> None:
        cfg = self.cfg
        cfg.validate_paths()
        d = cfg.data
        sizes = dict(train=(d.train_images, d.train_size), val=(d.val_images, d.val_size),
                     attr=(d.attr_images, d.attr_size), eval=(d.eval_images, d.eval_size),
                     calib=(d.calib_images, d.predict_size), holdout=(d.holdout_images, d.predict_size))
        sources = {}
        if cfg.paths.train_manifest:
            sources["train"] = [dg.crop_to_multiple(img, self.spec.scale)
                                for img in dg.load_dataset(cfg.paths.train_manifest)]
        if cfg.paths.eval_manifest:
            pool = [img for img in dg.load_dataset(cfg.paths.eval_manifest)]
            for split in SPLITS[1:]:
                n, size = sizes[split]
                picked = [_center_crop(img, size) for img in pool if min(img.shape[1:]) >= size][:n]
                pool = pool[len(picked):]
                if len(picked) < n:
                    raise PipelineError(f"eval manifest has too few images of size >= {size} for split {split}")
                sources[split] = picked
        for i, split in enumerate(SPLITS):
            n, size = sizes[split]
            images = sources.get(split) or dg.procedural_dataset(n, size, seed=d.seed * 100 + i)
            folder = self.split_dir(split)
            folder.mkdir(parents=True, exist_ok=True)
            names = []
            for j, img in enumerate(images):
                name = f"{j:04d}.png"
                dg.write_png(folder / name, img)
                names.append(name)
            dg.write_manifest(folder / "manifest.txt", names)
            if split in LABELLED:
                rng = np.random.default_rng([d.seed, i])
                tags = [dg.policy_spec("blind", rng).tag for _ in names]
                write_csv(folder / "labels.csv", [dict(image=n_, degradation=t) for n_, t in zip(names, tags)],
                          cfg.digest("data"))
        (self.out / "data" / "manifest.json").write_text(json.dumps(
            dict(config_digest=cfg.digest("data"), splits={s: sizes[s][0] for s in SPLITS}), indent=2) + "\n")
        logger.info("wrote datasets under %s", self.out / "data")

    def load_split(self, split: str) -> list[np.ndarray]:
        manifest = self.out / "data" / "manifest.json"
        if not manifest.exists():
            raise PipelineError(f"missing dataset {manifest}; run `faig prepare-data` first")
        if json.loads(manifest.read_text())["config_digest"] != self.cfg.digest("data"):
            raise PipelineError("datasets were prepared with a different data configuration; "
                                "re-run `faig prepare-data`")
        key = ("split", split)
        if key not in self._cache:
            self._cache[key] = dg.load_dataset(self.split_dir(split) / "manifest.txt")
        return self._cache[key]

    def labelled_samples(self, split: str) -> tuple[list[str], list[dg.PairedSample]]:
        gts = self.load_split(split)
        labels = read_csv(self.split_dir(split) / "labels.csv", self.cfg.digest("data"))
        seed = self.cfg.eval.degradation_seed
        samples = [dg.degrade(dg.crop_to_multiple(gt, self.spec.scale),
                              dg.spec_for(r["degradation"], scale=self.spec.scale),
                              np.random.default_rng([seed, SPLITS.index(split), j]))
                   for j, (gt, r) in enumerate(zip(gts, labels))]
        return [r["image"] for r in labels], samples

    def eval_sets(self, split: str = "eval", tags: Sequence[str] = DEGRADATIONS) -> dict[str, list[dg.PairedSample]]:
        gts = self.load_split(split)
        seed = self.cfg.eval.degradation_seed
        return {t: dg.make_pairs(gts, t, seed, self.spec.scale) for t in tags}

    # -- models -------------------------------------------------------------

    def load_model(self, seed: int, which: str) -> ModelParams:
        path = self.checkpoint_path(seed, which)
        producer = {"baseline": "train-baseline", "target": "finetune-target"}[which]
        if not path.exists():
            raise PipelineError(f"missing checkpoint {path}; produce it with `faig {producer} --seed {seed}`")
        params, manifest = load_checkpoint(path)
        if manifest.get("config_digest") != self.cfg.digest(which):
            raise PipelineError(f"{path} was trained with a different configuration; "
                                f"re-run `faig {producer} --seed {seed}`")
        if params.spec != self.spec:
            raise PipelineError(f"{path} has model spec {params.spec}, config expects {self.spec}")
        return params

    def train_baseline(self) -> None:
        train = self.load_split("train")
        val = self.eval_sets("val", ("clean",))
        for seed in self.seeds:
            cfg = _reseed(self.cfg.baseline, seed)
            log = TrainLog(self.seed_dir(seed) / "baseline_log.csv")
            logger.info("seed %d: training baseline for %d iterations", seed, cfg.iterations)
            params = train_baseline(self.spec, train, cfg, val_sets=val, log=log)
            save_checkpoint(self.checkpoint_path(seed, "baseline"), params, seed, self.cfg.digest("baseline"))

    def finetune_target(self) -> None:
        train = self.load_split("train")
        val = self.eval_sets("val", ("clean", "blur", "noise"))
        for seed in self.seeds:
            baseline = self.load_model(seed, "baseline")
            cfg = _reseed(self.cfg.finetune, seed)
            log = TrainLog(self.seed_dir(seed) / "target_log.csv")
            logger.info("seed %d: fine-tuning target for %d iterations", seed, cfg.iterations)
            target = finetune_target(baseline, train, cfg, spec=self.spec, val_sets=val, log=log)
            save_checkpoint(self.checkpoint_path(seed, "target"), target, seed, self.cfg.digest("target"),
                            extra=dict(baseline=baseline.digest()))

    # -- attribution --------------------------------------------------------

    def attribute(self) -> None:
        a = self.cfg.attribution
        gts = self.load_split("attr")
        digest = self.cfg.digest("attribution")
        for seed in self.seeds:
            target, baseline = self.load_model(seed, "target"), self.load_model(seed, "baseline")
            n = len(gts)
            tables = {}
            for method in ("faig", "ig"):
                sums = {}
                for d in DEGRADATIONS:
                    logger.info("seed %d: %s attribution on %d %s images", seed, method, n, d)
                    sums[d] = at.dataset_attribution(target, baseline, gts, d, a.steps, a.degradation_seed,
                                                     method, a.chunk)
                for d in DEGRADATIONS:
                    other = at.COMPLEMENT[d]
                    tables[(method, d)] = at.combine_scores(sums[d], sums[other], n, d, method=method,
                                                            steps=a.steps, other=other, dataset_id="attr")
                    if method == "faig":
                        tables[("faig_nosub", d)] = at.combine_scores(sums[d], None, n, d, method="faig_nosub",
                                                                      steps=a.steps, other=None,
                                                                      dataset_id="attr")
            tables[("absdelta", "any")] = at.abs_delta_scores(target, baseline)
            for (method, d), table in tables.items():
                manifest = dict(config_digest=digest, seed=seed, target=target.digest(),
                                baseline=baseline.digest())
                at.save_score_table(self.score_path(seed, method, d), table, **manifest)
                chosen = at.select_top(table, a.fraction, self.spec)
                at.write_filterset_csv(self.seed_dir(seed) / "filters" / f"{method}_{d}.csv", chosen,
                                       comment=f"config_digest={digest} fraction={a.fraction}")

    def load_scores(self, seed: int, method: str, degradation: str) -> at.DegradationScoreTable:
        key = ("scores", seed, method, degradation)
        if key not in self._cache:
            path = self.score_path(seed, method, degradation)
            if not path.with_suffix(".npy").exists():
                raise PipelineError(f"missing score table {path}.npy; run `faig attribute --seed {seed}`")
            table = at.load_score_table(path)
            if table.meta.get("config_digest") != self.cfg.digest("attribution"):
                raise PipelineError(f"{path} was computed with a different configuration; "
                                    f"re-run `faig attribute --seed {seed}`")
            self._cache[key] = table
        return self._cache[key]

    def selector(self, seed: int):
        def select(method: str, degradation: str, fraction: float) -> FilterSet:
            if method == "random":
                return at.random_filterset(self.spec, fraction, seed)
            if method == "absdelta":
                degradation = "any"
            return at.select_top(self.load_scores(seed, method, degradation), fraction, self.spec)
        return select

    # -- evaluation ---------------------------------------------------------

    def _mask_rows(self, fractions, methods) -> list[dict]:
        sets = self.eval_sets("eval")
        rows = []
        for seed in self.seeds:
            target, baseline = self.load_model(seed, "target"), self.load_model(seed, "baseline")
            pairs = [(m, "any") if m in ("random", "absdelta") else (m, d)
                     for m in methods for d in DEGRADATIONS]
            pairs = list(dict.fromkeys(pairs))
            rows += ev.mask_sweep(target, baseline, self.selector(seed), pairs, fractions, sets, seed)
        return rows

    def mask_eval(self) -> list[dict]:
        e = self.cfg.eval
        rows = self._mask_rows(e.mask_fractions, e.mask_methods)
        self._write_report("mask_table", rows, ("method", "selected", "fraction", "input"), ("grad_mse", "psnr"))
        return rows

    def sweep(self) -> list[dict]:
        e = self.cfg.eval
        rows = self._mask_rows(e.sweep_fractions, e.sweep_methods)
        self._write_report("sweep", rows, ("method", "selected", "fraction", "input"), ("grad_mse", "psnr"))
        return rows

    def retrain_eval(self) -> list[dict]:
        r = self.cfg.retrain
        train = self.load_split("train")
        sets = self.eval_sets("eval", ("clean",) + DEGRADATIONS)
        rows = []
        for seed in self.seeds:
            target, baseline = self.load_model(seed, "target"), self.load_model(seed, "baseline")
            for tag, value in ev.evaluate_sets(baseline, sets).items():
                rows.append(dict(seed=seed, task="none", method="baseline", num_filters=0, input=tag, psnr=value))
            for tag, value in ev.evaluate_sets(target, sets).items():
                rows.append(dict(seed=seed, task="none", method="target", num_filters=0, input=tag, psnr=value))
            rows += ev.retrain_report(baseline, target, self.selector(seed), r.methods, train,
                                      r.train_config(), sets, r.fraction, r.tasks, seed, r.upper_bound,
                                      progress=lambda msg, s=seed: logger.info("seed %d: %s", s, msg))
        self._write_report("retrain", rows, ("task", "method", "input"), ("psnr",))
        return rows

    def predict(self) -> tuple[list[dict], list[dict]]:
        e, a = self.cfg.eval, self.cfg.attribution
        calib_ids, calib = self.labelled_samples("calib")
        hold_ids, hold = self.labelled_samples("holdout")
        rows, summaries = [], []
        for seed in self.seeds:
            target, baseline = self.load_model(seed, "target"), self.load_model(seed, "baseline")
            d_scores = {d: self.load_scores(seed, "faig", d).scores for d in DEGRADATIONS}
            if e.calibrate:
                logger.info("seed %d: calibrating on %d images", seed, len(calib))
                cal = ev.image_filter_scores(calib, target, baseline, e.predict_steps, e.pseudo_gt, a.chunk)
                if e.predict_fraction_grid:
                    setup = ev.calibrate_prediction(cal, calib, d_scores, self.spec, e.predict_fraction_grid)
                else:
                    sets = {d: at.select_top(s, a.fraction, self.spec) for d, s in d_scores.items()}
                    os_cal = ev.overlap_from_filter_scores(cal, sets, e.predict_fraction, self.spec)
                    setup = ev.PredictionSetup(ev.calibrate_thresholds(calib, sets, target, baseline,
                                                                       os_values=os_cal),
                                               *self._fixed_fractions())
            else:
                setup = ev.PredictionSetup(ev.Thresholds(t_blur=e.t_blur, t_noise=e.t_noise),
                                           *self._fixed_fractions())
            logger.info("seed %d: predicting degradations of %d images", seed, len(hold))
            held = ev.image_filter_scores(hold, target, baseline, e.predict_steps, e.pseudo_gt, a.chunk)
            os_hold = ev.predict_with_setup(held, d_scores, self.spec, setup)
            per_image, summary = ev.prediction_report(hold_ids, hold, os_hold, setup)
            rows += [dict(seed=seed, **r) for r in per_image]
            summaries.append(dict(seed=seed, **summary))
        digest = self.cfg.digest("report")
        write_csv(self.reports / "predict.csv", rows, digest)
        agg = ev.aggregate(summaries, (), ("accuracy_blur", "accuracy_noise", "t_blur", "t_noise"))
        write_csv(self.reports / "predict_per_seed.csv", summaries, digest)
        write_csv(self.reports / "predict_summary.csv", agg, digest)
        return rows, summaries

    def _fixed_fractions(self) -> tuple[dict, dict]:
        e, a = self.cfg.eval, self.cfg.attribution
        return ({d: e.predict_fraction for d in DEGRADATIONS}, {d: a.fraction for d in DEGRADATIONS})

    def distribution(self) -> list[dict]:
        rows, hist_rows = [], []
        fraction = self.cfg.attribution.fraction
        for seed in self.seeds:
            select = self.selector(seed)
            for d in DEGRADATIONS:
                chosen = select("faig", d, fraction)
                per_layer, hist = ev.filter_distribution(chosen, self.spec)
                rows += [dict(seed=seed, degradation=d, **r) for r in per_layer]
                hist_rows += [dict(seed=seed, degradation=d, **h) for h in hist]
                hist_rows.append(dict(seed=seed, degradation=d, bin_lo="mean_depth", bin_hi="",
                                      count=ev.mean_depth(chosen, self.spec)))
        digest = self.cfg.digest("report")
        write_csv(self.reports / "distribution.csv", rows, digest)
        write_csv(self.reports / "depth_histogram.csv", hist_rows, digest)
        return rows

    def _write_report(self, name: str, rows: list[dict], keys, values) -> None:
        digest = self.cfg.digest("report")
        write_csv(self.reports / f"{name}.csv", rows, digest)
        write_csv(self.reports / f"{name}_summary.csv", ev.aggregate(rows, keys, values), digest)

    # -- summary ------------------------------------------------------------

    def summary(self) -> dict:
        from .checks import acceptance_summary

        result = acceptance_summary(self.reports, self.cfg.digest("report"))
        result["config_digest"] = self.cfg.digest("report")
        result["seeds"] = list(self.seeds)
        (self.reports / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        return result

    def plot(self) -> list[Path]:
        from .plotting import plot_reports

        return plot_reports(self.reports, self.out / "figures")

    def reproduce_all(self, with_plots: bool = True) -> dict:
        self.prepare_data()
        self.train_baseline()
        self.finetune_target()
        self.attribute()
        self.mask_eval()
        self.sweep()
        self.retrain_eval()
        self.predict()
        self.distribution()
        self.write_config()
        result = self.summary()
        if with_plots:
            self.plot()
        return result

    def write_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(
            f"# config_digest={self.cfg.digest('report')}\n" + self.cfg.to_ini())


def _reseed(cfg, seed):
    from dataclasses import replace

    return replace(cfg, seed=seed)


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[1:]
    top, left = (h - size) // 2, (w - size) // 2
    return img[:, top:top + size, left:left + size]
