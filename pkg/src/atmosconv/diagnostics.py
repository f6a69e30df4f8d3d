"""Model diagnostics: contrast-binned accuracy, flip rate, filter ratio
histograms, per-filter error analysis, guided-backprop filter similarity and
parameter / latency accounting."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .atf import corrupt_dataset
from .data import Dataset
from .errors import ConfigError, ContractError, ShapeError
from .filters import filter_ratios
from .nn import Model, ModelConfig, ReLU, affine_parameter_count, build_model
from .tensor import Tensor, backward, guided_relu, no_grad
from .train import predict

log = logging.getLogger(__name__)

HIST_BINS = 20
DICHOTOMY_TOL = 1e-5


# ---------------------------------------------------------------------------
# accuracy by contrast level


@dataclass
class ContrastBins:
    edges: np.ndarray       # lowest contrast in each bin (NaN when empty)
    counts: np.ndarray
    accuracy: np.ndarray    # NaN for empty bins
    degenerate: bool = False

    def as_rows(self) -> list[dict]:
        return [{"bin": i, "min_contrast": float(e), "count": int(c), "accuracy": float(a)}
                for i, (e, c, a) in enumerate(zip(self.edges, self.counts, self.accuracy))]


def image_contrast(images: np.ndarray) -> np.ndarray:
    """Standard deviation of every image over all its pixels and channels."""
    return images.reshape(images.shape[0], -1).std(axis=1)


def contrast_bins(contrast: np.ndarray, n_bins: int = 9) -> tuple[list[np.ndarray], bool]:
    """Split image indices into ``n_bins`` equal-count groups of increasing
    contrast. A constant contrast puts everything in the first group."""
    contrast = np.asarray(contrast, dtype=np.float64)
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if contrast.size < n_bins:
        raise ContractError(f"need at least {n_bins} images, got {contrast.size}")
    if np.all(contrast == contrast[0]):
        empty = np.array([], dtype=np.int64)
        return [np.arange(contrast.size)] + [empty] * (n_bins - 1), True
    order = np.argsort(contrast, kind="stable")
    return np.array_split(order, n_bins), False


def contrast_binned_accuracy(model: Model, ds: Dataset, n_bins: int = 9,
                             preds: Optional[np.ndarray] = None) -> ContrastBins:
    c = image_contrast(ds.images)
    groups, degenerate = contrast_bins(c, n_bins)
    if degenerate:
        log.warning("all images have the same contrast; using a single bin")
    if preds is None:
        preds = predict(model, ds.images)
    hit = preds == ds.labels
    edges = np.array([c[g].min() if g.size else np.nan for g in groups])
    counts = np.array([g.size for g in groups])
    acc = np.array([hit[g].mean() if g.size else np.nan for g in groups])
    return ContrastBins(edges, counts, acc, degenerate)


# ---------------------------------------------------------------------------
# flip rate


def flip_rate_from_predictions(clean: np.ndarray, corrupted: np.ndarray) -> float:
    clean, corrupted = np.asarray(clean), np.asarray(corrupted)
    if clean.shape != corrupted.shape:
        raise ShapeError(f"{clean.shape[0]} clean vs {corrupted.shape[0]} corrupted predictions")
    if clean.size == 0:
        raise ContractError("flip rate of an empty set")
    return float((clean != corrupted).mean())


def flip_rate(model: Model, clean_set: Dataset, corrupted_set: Dataset) -> float:
    """Fraction of images whose predicted class differs between the clean and
    the corrupted copy (sets aligned by index)."""
    if len(clean_set) != len(corrupted_set):
        raise ShapeError(f"clean set has {len(clean_set)} images, corrupted set {len(corrupted_set)}")
    return flip_rate_from_predictions(predict(model, clean_set.images),
                                      predict(model, corrupted_set.images))


def severity_flip_rates(model: Model, ds: Dataset, variant: str, seed: int,
                        levels=(0.0, 0.25, 0.5, 0.75, 1.0)) -> list[dict]:
    """Flip rate and accuracy at each corruption severity."""
    base = predict(model, ds.images)
    rows = []
    for s in levels:
        imgs, _, _ = corrupt_dataset(ds.images, ds.labels, variant, seed, s)
        p = predict(model, imgs)
        rows.append({"variant": variant, "severity": float(s),
                     "accuracy": float((p == ds.labels).mean()),
                     "flip_rate": flip_rate_from_predictions(base, p)})
    return rows


# ---------------------------------------------------------------------------
# |r(w)| histogram


@dataclass
class RatioHistogram:
    edges: np.ndarray
    counts: np.ndarray
    per_layer: dict = field(default_factory=dict)   # layer -> counts
    values: dict = field(default_factory=dict)      # layer -> |r| per filter

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mean(self) -> float:
        return float(np.concatenate(list(self.values.values())).mean())

    def as_rows(self) -> list[dict]:
        rows = []
        for i in range(len(self.counts)):
            row = {"lo": float(self.edges[i]), "hi": float(self.edges[i + 1]),
                   "count": int(self.counts[i])}
            row.update({name: int(c[i]) for name, c in self.per_layer.items()})
            rows.append(row)
        return rows


def ratio_histogram(model: Model, bins: int = HIST_BINS) -> RatioHistogram:
    """|r(w)| of every output-channel filter of every conv layer, using the
    kernel the layer actually applies (after normalization, if any)."""
    kernels = model.effective_kernels()
    if not kernels:
        raise ConfigError("model has no conv layers")
    edges = np.linspace(0.0, 1.0, bins + 1)
    per_layer, values = {}, {}
    for name, w in kernels:
        a = np.abs(filter_ratios(w))
        values[name] = a
        per_layer[name] = np.histogram(a, bins=edges)[0]
    counts = np.sum(list(per_layer.values()), axis=0)
    return RatioHistogram(edges, counts, per_layer, values)


def dichotomy_violations(model: Model, tol: float = DICHOTOMY_TOL) -> list[tuple[str, int, float]]:
    """Filters whose |r| is neither below ``tol`` nor within ``tol`` of 1.

    A normalized conv should never produce one, whatever its raw weights.
    """
    bad = []
    for name, w in model.effective_kernels():
        for i, r in enumerate(np.abs(filter_ratios(w))):
            if not (r < tol or abs(1.0 - r) < tol):
                bad.append((name, i, float(r)))
    return bad


# ---------------------------------------------------------------------------
# per-filter error analysis


def _first_conv_name(model: Model) -> str:
    convs = model.conv_layers()
    if not convs:
        raise ConfigError("model has no conv layers")
    return convs[0][0]


def _top_level(model: Model, name: str) -> int:
    names = [n for n, _ in model.layers]
    if name not in names:
        raise ConfigError(f"{name!r} is not a top-level layer (have {names})")
    return names.index(name)


def layer_activations(model: Model, images: np.ndarray, layer: str,
                      batch_size: int = 256) -> np.ndarray:
    """Eval-mode output of the top-level layer ``layer``."""
    _top_level(model, layer)
    out = []
    with no_grad():
        for s in range(0, images.shape[0], batch_size):
            taps = {layer: None}
            model.forward(Tensor(images[s:s + batch_size]), train=False, taps=taps)
            out.append(taps[layer].data)
    return np.concatenate(out)


def filter_error_analysis(model: Model, ds: Dataset, k: int = 100,
                          layer: Optional[str] = None, response: str = "mean") -> list[dict]:
    """For each filter of ``layer`` (default: the first conv), the fraction of
    its ``k`` most strongly responding images that the model misclassifies.

    The response of a filter to an image is the mean (or, with
    ``response="max"``, the maximum) absolute value of its output map.
    Rows are sorted by increasing |r|.
    """
    if k > len(ds):
        raise ContractError(f"k={k} exceeds the {len(ds)} available images")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if response not in ("mean", "max"):
        raise ConfigError(f"response must be 'mean' or 'max', got {response!r}")
    layer = layer or _first_conv_name(model)
    conv = dict(model.conv_layers()).get(layer)
    if conv is None:
        raise ConfigError(f"{layer!r} is not a conv layer")
    acts = np.abs(layer_activations(model, ds.images, layer))
    score = acts.mean(axis=(2, 3)) if response == "mean" else acts.max(axis=(2, 3))
    wrong = predict(model, ds.images) != ds.labels
    with no_grad():
        ratios = np.abs(filter_ratios(conv.effective_weight().data))
    rows = []
    for f in range(score.shape[1]):
        top = np.argsort(-score[:, f], kind="stable")[:k]
        rows.append({"layer": layer, "filter": f, "abs_r": float(ratios[f]),
                     "misclassified": float(wrong[top].mean())})
    rows.sort(key=lambda r: (r["abs_r"], r["filter"]))
    return rows


def ratio_error_correlation(rows: list[dict]) -> float:
    """Spearman rank correlation between |r| and misclassified fraction."""
    r = np.array([row["abs_r"] for row in rows])
    e = np.array([row["misclassified"] for row in rows])
    if np.ptp(r) == 0 or np.ptp(e) == 0:
        return float("nan")
    return float(stats.spearmanr(r, e).statistic)


# ---------------------------------------------------------------------------
# guided backpropagation similarity


@dataclass
class GuidedSimilarity:
    corr: np.ndarray            # (F, F) correlation averaged over images
    edges: np.ndarray
    counts: np.ndarray          # histogram of the off-diagonal entries
    flagged_pairs: int = 0      # pairs with a zero-variance map, set to 0

    def off_diagonal(self) -> np.ndarray:
        iu = np.triu_indices(self.corr.shape[0], k=1)
        return self.corr[iu]

    def mean(self) -> float:
        return float(self.off_diagonal().mean())


def _activation_after(model: Model, layer: str) -> str:
    """Name of the first top-level relu at or after ``layer``."""
    i = _top_level(model, layer)
    for name, l in model.layers[i:]:
        if isinstance(l, ReLU):
            return name
    return layer


def guided_maps(model: Model, images: np.ndarray, layer: Optional[str] = None) -> np.ndarray:
    """Guided-backprop input maps, shape (F, N, C, H, W): one per filter of
    ``layer``, from backpropagating the sum of that filter's activation."""
    layer = layer or _first_conv_name(model)
    tap = _activation_after(model, layer)
    x = Tensor(np.asarray(images, dtype=np.float64), requires_grad=True)
    taps = {tap: None}
    model.forward(x, train=False, taps=taps)
    act = taps[tap]
    n_f = act.shape[1]
    if n_f < 2:
        raise ConfigError(f"{layer!r} has {n_f} filter; need at least 2")
    maps = []
    with guided_relu():
        for f in range(n_f):
            sel = np.zeros(act.shape)
            sel[:, f] = 1.0
            x.grad = None
            model.zero_grad()
            backward((act * Tensor(sel)).sum(), retain_graph=True)
            maps.append(np.zeros(x.shape) if x.grad is None else x.grad.copy())
    model.zero_grad()
    return np.stack(maps)


def map_correlations(maps: np.ndarray) -> tuple[np.ndarray, int]:
    """Pearson correlation matrix between flattened maps (F, D). Pairs with
    a zero-variance member are set to 0 and counted."""
    m = maps.reshape(maps.shape[0], -1)
    c = m - m.mean(axis=1, keepdims=True)
    norm = np.sqrt((c * c).sum(axis=1))
    ok = norm > 0
    safe = np.where(ok, norm, 1.0)
    corr = (c @ c.T) / np.outer(safe, safe)
    bad = ~np.outer(ok, ok)
    corr[bad] = 0.0
    np.fill_diagonal(corr, 1.0)
    n_bad = int(np.triu(bad, k=1).sum())
    return np.clip(corr, -1.0, 1.0), n_bad


def guided_backprop_similarity(model: Model, images: np.ndarray, layer: Optional[str] = None,
                               bins: int = HIST_BINS) -> GuidedSimilarity:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ContractError("need at least one (C, H, W) image")
    maps = guided_maps(model, images, layer)
    total = np.zeros((maps.shape[0], maps.shape[0]))
    flagged = 0
    for i in range(images.shape[0]):
        c, nb = map_correlations(maps[:, i])
        total += c
        flagged += nb
    corr = total / images.shape[0]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    iu = np.triu_indices(corr.shape[0], k=1)
    counts = np.histogram(corr[iu], bins=edges)[0]
    if flagged:
        log.warning("%d filter pairs had a zero-variance guided map", flagged)
    return GuidedSimilarity(corr, edges, counts, flagged)


# ---------------------------------------------------------------------------
# overhead accounting


@dataclass
class Overhead:
    architecture: str
    norm_layer: str
    width: int
    vanilla_params: int
    normalized_params: int
    affine_params: int
    vanilla_ms: float = float("nan")
    normalized_ms: float = float("nan")

    @property
    def added_params(self) -> int:
        return self.normalized_params - self.vanilla_params

    @property
    def added_fraction(self) -> float:
        return self.added_params / self.vanilla_params

    @property
    def added_ms(self) -> float:
        return self.normalized_ms - self.vanilla_ms

    def as_dict(self) -> dict:
        return {"architecture": self.architecture, "norm_layer": self.norm_layer,
                "width": self.width, "vanilla_params": self.vanilla_params,
                "normalized_params": self.normalized_params,
                "added_params": self.added_params, "added_fraction": self.added_fraction,
                "vanilla_ms_per_image": self.vanilla_ms,
                "normalized_ms_per_image": self.normalized_ms,
                "added_ms_per_image": self.added_ms}


def inference_ms_per_image(model: Model, images: np.ndarray, repeats: int = 3) -> float:
    """Best-of-``repeats`` wall time of one eval-mode forward, per image."""
    best = float("inf")
    with no_grad():
        model.forward(Tensor(images[:1]), train=False)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(Tensor(images), train=False)
            best = min(best, time.perf_counter() - t0)
    return 1e3 * best / images.shape[0]


def overhead(config: ModelConfig, images: Optional[np.ndarray] = None,
             repeats: int = 3) -> Overhead:
    """Parameters (and optionally latency) of the normalized model relative
    to the vanilla model of the same configuration.

    The vanilla conv keeps a bias only when no norm layer follows, so with
    batch norm both variants have identical parameter counts.
    """
    van = build_model(config.replace(conv_mode="vanilla"))
    nrm = build_model(config.replace(conv_mode="normalized"))
    out = Overhead(config.architecture, config.norm_layer, config.width,
                   van.num_parameters(), nrm.num_parameters(), affine_parameter_count(nrm))
    if images is not None:
        out.vanilla_ms = inference_ms_per_image(van, images, repeats)
        out.normalized_ms = inference_ms_per_image(nrm, images, repeats)
    return out
