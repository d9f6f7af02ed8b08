"""Deletion/insertion curves, masked accuracy, pointing game, coverage.

Curves replace (deletion) or restore (insertion) whole pixels, all
channels at once, in descending saliency order with ties broken by
raster order. Every step is a fresh forward pass of the perturbed image.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import explain as ex
from .network import Network, forward, forward_batch, predict
from .tensor import DTYPE, as_tensor, softmax64
from .training import dataset_mean

PROBABILISTIC = "probabilistic"
ACCURACY = "accuracy"


@dataclass(frozen=True)
class EvalCurve:
    fractions: np.ndarray
    scores: np.ndarray
    auc: float


@dataclass
class EvalReport:
    """Per-method metric means plus the settings that produced them."""

    sample_count: int
    methods: dict = field(default_factory=dict)  # method -> {metric: value}
    seed: int | None = None
    config: dict = field(default_factory=dict)


def trapezoid_auc(fractions, scores) -> float:
    f = np.asarray(fractions, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    return float(np.sum(np.diff(f) * (s[1:] + s[:-1]) / 2))


def _as_map(m) -> np.ndarray:
    return np.asarray(getattr(m, "upsampled", m), dtype=np.float64)


def baseline_image(x, baseline) -> np.ndarray:
    """Broadcast a scalar, per-channel ``[C]`` vector, or full image to ``x``'s shape."""
    b = np.asarray(baseline, dtype=DTYPE)
    if b.ndim == 1:
        b = b[:, None, None]
    return np.ascontiguousarray(np.broadcast_to(b, x.shape), dtype=DTYPE)


def _curve(net, start, end, saliency, mode, steps, target, label):
    start = as_tensor(start, name="image")
    end = baseline_image(start, end)
    sal = _as_map(saliency)
    C, H, W = start.shape
    if sal.shape != (H, W):
        raise ValueError(f"map shape {sal.shape} does not match image {(H, W)}")
    if mode not in (PROBABILISTIC, ACCURACY):
        raise ValueError(f"unknown mode {mode!r}")
    n = H * W
    if not 2 <= steps <= n:
        raise ValueError(f"steps must be in [2, {n}], got {steps}")
    order = np.argsort(-sal.ravel(), kind="stable")
    counts = (np.arange(steps + 1) * n) // steps
    frames = np.empty((steps + 1, C, n), dtype=DTYPE)
    src, dst = start.reshape(C, n), end.reshape(C, n)
    for s, k in enumerate(counts):
        frames[s] = src
        idx = order[:k]
        frames[s][:, idx] = dst[:, idx]
    logits = forward_batch(net, frames.reshape(steps + 1, C, H, W))
    if mode == PROBABILISTIC:
        scores = softmax64(logits)[:, target]
    else:
        scores = (np.argmax(logits, axis=1) == label).astype(np.float64)
    fractions = counts / n
    return EvalCurve(fractions, scores, trapezoid_auc(fractions, scores))


def _resolve_target(net, x, target, label):
    if target is None:
        target = predict(forward(net, x).logits)
    return int(target), int(target if label is None else label)


def deletion_curve(net: Network, x, saliency, mode=PROBABILISTIC, steps=20, baseline=0.0,
                   target=None, label=None) -> EvalCurve:
    """Class score as the most salient pixels are replaced by ``baseline``.

    ``target`` (default: the prediction on ``x``) is the class whose
    probability is tracked; ``label`` (default: ``target``) is the class
    counted as correct in accuracy mode.
    """
    target, label = _resolve_target(net, x, target, label)
    return _curve(net, x, baseline, saliency, mode, steps, target, label)


def insertion_curve(net: Network, x, saliency, mode=PROBABILISTIC, steps=20, baseline=0.0,
                    target=None, label=None) -> EvalCurve:
    """Class score as the most salient pixels of ``x`` are pasted onto ``baseline``."""
    x = as_tensor(x, name="image")
    target, label = _resolve_target(net, x, target, label)
    return _curve(net, baseline_image(x, baseline), x, saliency, mode, steps, target, label)


def masked_accuracy(net: Network, samples, maps, threshold=None) -> float:
    """Accuracy on ``x * map``. With ``threshold`` the map is binarized
    (``map > threshold``) first."""
    samples, maps = list(samples), list(maps)
    if len(samples) != len(maps):
        raise ValueError(f"{len(samples)} samples but {len(maps)} maps")
    if not samples:
        raise ValueError("no samples")
    masked = []
    for s, m in zip(samples, maps):
        m = _as_map(m)
        if threshold is not None:
            m = (m > threshold).astype(np.float64)
        masked.append((s.image * m[None]).astype(DTYPE))
    pred = np.argmax(forward_batch(net, np.stack(masked)), axis=1)
    return float(np.mean(pred == np.array([s.label for s in samples])))


def pointing_hit(saliency, mask) -> bool:
    m = _as_map(saliency)
    if not np.any(m > 0):
        return False
    i = int(np.argmax(m))
    return bool(np.asarray(mask).ravel()[i] > 0)


def pointing_game(maps, samples) -> float:
    """Fraction of maps whose maximum (first in raster order) lies inside
    the sample's object mask. All-zero maps are misses."""
    maps, samples = list(maps), list(samples)
    if len(samples) != len(maps) or not samples:
        raise ValueError("need one map per sample and at least one sample")
    hits = 0
    for m, s in zip(maps, samples):
        if s.mask is None:
            raise ValueError("pointing game needs ground-truth masks")
        hits += pointing_hit(m, s.mask)
    return hits / len(samples)


def coverage(saliency, mask, threshold=0.2) -> float:
    mask = np.asarray(mask) > 0
    total = int(mask.sum())
    if total == 0:
        raise ValueError("coverage of an empty mask")
    return float(np.sum((_as_map(saliency) > threshold) & mask) / total)


def completeness_coverage(complete: ex.CompleteExplanation, mask, threshold=0.2) -> dict:
    """Fraction of object pixels above ``threshold`` in each normalized
    paradigm map and in the normalized complete map."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    out = {name: coverage(m, mask, threshold) for name, m in complete.maps().items()}
    out["complete"] = coverage(complete.complete_upsampled, mask, threshold)
    return out


CONTROLS = ("uniform", "random")
METHODS = ex.PARADIGMS + ("complete",) + CONTROLS


def threads_from_env() -> int:
    try:
        return max(0, int(os.environ.get("CAMLAB_THREADS", "0")))
    except ValueError:
        return 0


def _sample_metrics(net, sample, index, methods, layer, steps, baseline, mode,
                    coverage_threshold, seed):
    x = sample.image
    trace = forward(net, x)
    p = predict(trace.logits)
    maps = {}
    if any(m in ex.PARADIGMS or m == "complete" for m in methods):
        comp = ex.complete_explanation(net, x, layer, trace=trace)
        maps.update({k: v.upsampled for k, v in comp.maps().items()})
        maps["complete"] = comp.complete_upsampled
    H, W = x.shape[-2:]
    maps["uniform"] = np.ones((H, W), dtype=DTYPE)
    maps["random"] = np.random.default_rng([seed, index]).random((H, W)).astype(DTYPE)
    out = {"_correct": float(p == sample.label)}
    for name in methods:
        m = maps[name]
        d = _curve(net, x, baseline, m, mode, steps, p, p)
        i = _curve(net, baseline_image(x, baseline), x, m, mode, steps, p, p)
        row = {"deletion_auc": d.auc, "insertion_auc": i.auc}
        if sample.mask is not None:
            row["pointing_game"] = float(pointing_hit(m, sample.mask))
            row["coverage"] = coverage(m, sample.mask, coverage_threshold)
        masked = (x * m[None].astype(np.float64)).astype(DTYPE)
        row["masked_accuracy"] = float(predict(forward(net, masked).logits) == sample.label)
        out[name] = row
    return out


def evaluate(net: Network, samples, methods=ex.PARADIGMS, *, layer=None, steps=20,
             baseline="mean", mode=PROBABILISTIC, coverage_threshold=0.2, seed=0,
             threads=None, config=None) -> EvalReport:
    """Mean metrics per method over ``samples``.

    Methods are paradigm names, ``"complete"``, or the controls
    ``"uniform"`` (constant map) and ``"random"`` (seeded noise map).
    ``baseline`` is ``"mean"`` (per-channel mean of ``samples``), ``"zeros"``,
    or anything :func:`baseline_image` accepts.
    ``threads`` (default ``$CAMLAB_THREADS``, 0 = sequential) parallelizes
    over samples; results do not depend on it.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}")
    threads = threads_from_env() if threads is None else threads
    if isinstance(baseline, str):
        if baseline not in ("mean", "zeros"):
            raise ValueError(f"unknown baseline {baseline!r}")
        baseline = dataset_mean(samples) if baseline == "mean" else 0.0

    def job(item):
        i, s = item
        return _sample_metrics(net, s, i, methods, layer, steps, baseline, mode,
                               coverage_threshold, seed)

    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(job, enumerate(samples)))
    else:
        rows = [job(item) for item in enumerate(samples)]

    report = EvalReport(len(samples), seed=seed, config=dict(config or {}))
    report.methods["model"] = {"accuracy": float(np.mean([r["_correct"] for r in rows]))}
    for name in methods:
        keys = rows[0][name].keys()
        agg = {k: float(np.mean([r[name][k] for r in rows])) for k in keys}
        agg["auc_gap"] = agg["insertion_auc"] - agg["deletion_auc"]
        report.methods[name] = {k: agg[k] for k in sorted(agg)}
    for metrics in report.methods.values():
        for k, v in metrics.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite aggregate {k}")
    return report
