"""Evaluation reports and paired vanilla/normalized experiments."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .atf import VARIANTS, CorruptionManifest, corrupt_dataset
from .data import Dataset, synthetic_shapes
from .diagnostics import contrast_binned_accuracy, flip_rate_from_predictions
from .filters import mean_part_deviation
from .nn import Model, ModelConfig, build_model
from .train import TrainHyper, predict, train

log = logging.getLogger(__name__)

SET_NAMES = ("D",) + tuple(f"D_{v}" for v in VARIANTS)


@dataclass
class EvalReport:
    accuracy: dict                          # set name -> top-1 accuracy
    contrast_bins: Optional[list] = None    # accuracies, increasing contrast
    flip_rate: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def row(self) -> dict:
        """One row of the five-set table (missing sets are NaN)."""
        return {k: self.accuracy.get(k, float("nan")) for k in SET_NAMES}


def corrupted_sets(ds: Dataset, seed: int, severity: float = 1.0,
                   variants=VARIANTS) -> tuple[dict, dict]:
    """Clean set plus one corrupted copy per variant, with manifests."""
    sets = {"D": ds}
    manifests = {}
    for v in variants:
        imgs, _, man = corrupt_dataset(ds.images, ds.labels, v, seed, severity)
        sets[f"D_{v}"] = ds.with_images(imgs)
        manifests[f"D_{v}"] = man
    return sets, manifests


def evaluate_sets(model: Model, sets: dict, contrast_set: Optional[str] = None,
                  flip_pair: Optional[tuple[str, str]] = None, n_bins: int = 9,
                  manifests: Optional[dict] = None) -> EvalReport:
    """Accuracy on every named set, optionally with contrast-binned accuracy
    on one set and the flip rate between two index-aligned sets."""
    preds = {name: predict(model, ds.images) for name, ds in sets.items()}
    acc = {name: float((p == sets[name].labels).mean()) for name, p in preds.items()}
    report = EvalReport(acc, meta={"config": asdict(model.config)})
    if contrast_set is not None:
        bins = contrast_binned_accuracy(model, sets[contrast_set], n_bins, preds[contrast_set])
        report.contrast_bins = [float(a) for a in bins.accuracy]
        report.meta["contrast_set"] = contrast_set
        report.meta["contrast_edges"] = [float(e) for e in bins.edges]
    if flip_pair is not None:
        a, b = flip_pair
        report.flip_rate = flip_rate_from_predictions(preds[a], preds[b])
        report.meta["flip_pair"] = [a, b]
    if manifests:
        report.meta["manifests"] = {k: {"variant": m.variant, "seed": m.seed,
                                        "severity": m.severity, "prng": m.prng}
                                    for k, m in manifests.items()}
    return report


# ---------------------------------------------------------------------------
# paired runs


@dataclass
class PairedSetup:
    """Everything a paired vanilla/normalized comparison depends on."""

    n_train: int = 10000
    n_test: int = 2000
    image_size: int = 16
    data_seed: int = 1
    test_seed: int = 99
    corruption_seed: int = 7
    width: int = 8
    depth: int = 3
    norm_layer: str = "batch"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    weight_decay: float = 5e-4
    augment_fraction: float = 0.0
    reg_strength: float = 0.0

    def model_config(self, conv_mode: str, seed: int) -> ModelConfig:
        return ModelConfig(architecture="tiny_cnn", conv_mode=conv_mode,
                           norm_layer=self.norm_layer, width=self.width, depth=self.depth,
                           seed=seed)

    def hyper(self, seed: int) -> TrainHyper:
        return TrainHyper(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                          weight_decay=self.weight_decay, seed=seed,
                          augment_fraction=self.augment_fraction,
                          reg_strength=self.reg_strength)

    def datasets(self) -> tuple[Dataset, Dataset]:
        return (synthetic_shapes(self.n_train, self.data_seed, self.image_size),
                synthetic_shapes(self.n_test, self.test_seed, self.image_size))


def paired_run(setup: PairedSetup, seed: int, train_set: Dataset, sets: dict,
               modes=("vanilla", "normalized"), models: Optional[dict] = None) -> dict:
    """Train one model per conv mode from the same seed (hence the same raw
    initial weights, batch order and augmentation draws) and evaluate all.
    Trained models are stored in ``models`` (keyed by mode) when given."""
    out = {}
    for mode in modes:
        model = build_model(setup.model_config(mode, seed))
        t0 = time.perf_counter()
        log_rows = train(model, train_set, setup.hyper(seed))
        rep = evaluate_sets(model, sets)
        rep.meta.update(seed=seed, train_seconds=time.perf_counter() - t0,
                        final_train_acc=log_rows[-1]["train_acc"])
        log.info("seed %d %s: %s", seed, mode, rep.accuracy)
        out[mode] = rep
        if models is not None:
            models[mode] = model
    return out


@dataclass
class PairedSummary:
    seeds: list
    per_seed: list          # [{mode: EvalReport}]
    seconds: float
    models: list = field(default_factory=list)   # [{mode: Model}] when kept

    def mean_accuracy(self, mode: str, set_name: str) -> float:
        return float(np.mean([r[mode].accuracy[set_name] for r in self.per_seed]))

    def gap(self, set_name: str) -> float:
        """Normalized minus vanilla, averaged over seeds."""
        return self.mean_accuracy("normalized", set_name) - self.mean_accuracy("vanilla", set_name)

    def rows(self) -> list[dict]:
        rows = []
        for seed, pair in zip(self.seeds, self.per_seed):
            for mode, rep in pair.items():
                rows.append({"seed": seed, "mode": mode, **rep.row()})
        return rows


def robustness_experiment(setup: PairedSetup, seeds=(0, 1, 2),
                          extra_sets: Optional[dict] = None,
                          keep_models: bool = False) -> PairedSummary:
    train_set, test_set = setup.datasets()
    sets, _ = corrupted_sets(test_set, setup.corruption_seed)
    if extra_sets:
        sets.update(extra_sets)
    t0 = time.perf_counter()
    per_seed, models = [], []
    for s in seeds:
        kept: Optional[dict] = {} if keep_models else None
        per_seed.append(paired_run(setup, s, train_set, sets, models=kept))
        if keep_models:
            models.append(kept)
    return PairedSummary(list(seeds), per_seed, time.perf_counter() - t0, models)


def soft_reg_comparison(setup: PairedSetup, strength: float = 0.01, seed: int = 0,
                        conv_mode: str = "vanilla") -> dict:
    """Train twice from one seed, without and with the soft regularizer, and
    report the final mean per-filter part deviation |1-|w+|| + |1-|w-||."""
    train_set, _ = setup.datasets()
    out = {}
    for reg in (0.0, strength):
        model = build_model(setup.model_config(conv_mode, seed))
        hyper = setup.hyper(seed)
        hyper.reg_strength = reg
        train(model, train_set, hyper)
        out[reg] = mean_part_deviation(w.data for w in model.raw_kernels())
    return {"unregularized": out[0.0], "regularized": out[strength], "strength": strength}


def manifest_summary(m: CorruptionManifest) -> dict:
    return {"variant": m.variant, "seed": m.seed, "severity": m.severity,
            "n": len(m.records), "ranges": m.ranges()}
