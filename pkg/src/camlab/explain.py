"""Grad-CAM, Counterfactual-CAM, Contrast-CAM and their sum.

All three maps share one mechanism: pool the gradient of some scalar
objective over a spatial activation to get one importance score per
channel, weight the channels, sum, and rectify. They differ only in the
seed vector pushed back from the logits:

* correlation ("Why P?"): ``onehot(P)``
* counterfactual ("What if not P?"): the correlation scores, negated
* contrastive ("Why P, rather than Q?"): ``softmax(logits) - onehot(Q)``,
  the logit gradient of cross-entropy toward Q
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ForwardTrace, Network, backward_to_activation, forward, loss_seed, predict
from .tensor import DTYPE, as_tensor, global_average_pool

CORRELATION = "correlation"
COUNTERFACTUAL = "counterfactual"
CONTRASTIVE = "contrastive"
PARADIGMS = (CORRELATION, COUNTERFACTUAL, CONTRASTIVE)


@dataclass(frozen=True)
class ContrastQuery:
    predicted: int
    contrast: int


@dataclass(frozen=True)
class ImportanceScores:
    alphas: np.ndarray
    paradigm: str
    layer: int
    predicted: int
    contrast: int | None = None


@dataclass(frozen=True)
class ExplanationMap:
    raw: np.ndarray  # [h, w] at layer resolution, >= 0
    upsampled: np.ndarray  # [H, W] at input resolution, in [0, 1]
    paradigm: str
    layer: int
    predicted: int
    contrast: int | None = None


@dataclass(frozen=True)
class CompleteExplanation:
    correlation: ExplanationMap
    counterfactual: ExplanationMap
    contrastive: ExplanationMap
    complete_raw: np.ndarray

    @property
    def complete_upsampled(self) -> np.ndarray:
        h, w = self.correlation.upsampled.shape
        return postprocess_map(self.complete_raw, h, w)

    def maps(self) -> dict:
        return {
            CORRELATION: self.correlation,
            COUNTERFACTUAL: self.counterfactual,
            CONTRASTIVE: self.contrastive,
        }


def default_layer(net: Network) -> int:
    """Index of the last layer with a ``[C, H, W]`` output."""
    spatial = net.spatial_layers()
    if not spatial:
        raise ValueError("network has no spatial activation to explain")
    return spatial[-1]


def default_contrast(logits, explained=None) -> int:
    """Highest-logit class other than ``explained`` (default: the
    prediction, giving the runner-up). Lowest index wins ties."""
    z = np.asarray(logits, dtype=np.float64)
    order = [int(c) for c in np.argsort(-z, kind="stable")]
    skip = order[0] if explained is None else int(explained)
    return next(c for c in order if c != skip)


def questions(predicted: int, contrast: int, names=None) -> dict:
    name = (lambda c: names[c]) if names else str
    p, q = name(predicted), name(contrast)
    return {
        CORRELATION: f"Why {p}?",
        COUNTERFACTUAL: f"What if not {p}?",
        CONTRASTIVE: f"Why {p}, rather than {q}?",
    }


def _resolve_layer(net: Network, layer) -> int:
    if layer is None:
        return default_layer(net)
    layer = int(layer)
    if not 0 <= layer < len(net.layers):
        raise IndexError(f"layer {layer} out of range")
    if len(net.shapes[layer]) != 3:
        raise ValueError(f"layer {layer} output {net.shapes[layer]} is not spatial")
    return layer


def _check_class(net, c, what="class"):
    if not 0 <= int(c) < net.num_classes:
        raise IndexError(f"{what} {c} out of range for {net.num_classes} classes")
    return int(c)


def _trace(net, x, trace):
    if trace is None:
        return forward(net, x)
    if trace.net is not net:
        raise ValueError("trace was produced by a different network")
    return trace


def importance_from_seed(trace: ForwardTrace, net: Network, seed, layer: int) -> np.ndarray:
    """Spatially averaged gradient of ``seed . logits`` at ``layer``."""
    return global_average_pool(backward_to_activation(trace, net, seed, layer))


def weighted_map(alphas, activation) -> np.ndarray:
    """``relu(sum_k alphas[k] * activation[k])`` with a float64 sum."""
    a = np.asarray(activation, dtype=np.float64)
    s = np.tensordot(np.asarray(alphas, dtype=np.float64), a, axes=1).astype(DTYPE)
    return np.maximum(s, DTYPE(0))


def _bilinear_axis(n_in, n_out):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def postprocess_map(raw, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear upsample to ``[target_h, target_w]``, then divide by the max.

    An all-zero map stays all-zero.
    """
    raw = as_tensor(raw, name="raw map")
    if raw.ndim != 2:
        raise ValueError(f"raw map must be 2-D, got {raw.shape}")
    if np.any(raw < 0):
        raise ValueError("raw map must be nonnegative")
    h, w = raw.shape
    if target_h < h or target_w < w:
        raise ValueError(f"target {target_h}x{target_w} is smaller than the map {h}x{w}")
    r = raw.astype(np.float64)
    y0, y1, ty = _bilinear_axis(h, target_h)
    x0, x1, tx = _bilinear_axis(w, target_w)
    rows = r[y0] + ty[:, None] * (r[y1] - r[y0])
    up = rows[:, x0] + tx[None, :] * (rows[:, x1] - rows[:, x0])
    top = up.max()
    if top > 0:
        up = up / top
    else:
        up = np.zeros_like(up)
    return np.clip(up, 0.0, 1.0).astype(DTYPE)


def _make_map(net, x_shape, raw, paradigm, layer, predicted, contrast=None):
    return ExplanationMap(raw, postprocess_map(raw, x_shape[-2], x_shape[-1]),
                          paradigm, layer, predicted, contrast)


def grad_cam(net: Network, x, class_i: int, layer=None, trace=None):
    """Observed correlation map for class ``class_i`` ("Why class_i?")."""
    layer = _resolve_layer(net, layer)
    class_i = _check_class(net, class_i)
    trace = _trace(net, x, trace)
    seed = np.zeros(net.num_classes, dtype=DTYPE)
    seed[class_i] = 1
    alphas = importance_from_seed(trace, net, seed, layer)
    raw = weighted_map(alphas, trace.activations[layer])
    scores = ImportanceScores(alphas, CORRELATION, layer, class_i)
    return scores, _make_map(net, trace.input.shape, raw, CORRELATION, layer, class_i)


def counterfactual_cam(net: Network, x, class_i: int, layer=None, trace=None):
    """Observed counterfactual map: Grad-CAM with negated importance scores."""
    trace = _trace(net, x, trace)
    cu, _ = grad_cam(net, x, class_i, layer, trace)
    return _counterfactual_from(net, trace, cu)


def _counterfactual_from(net, trace, cu: ImportanceScores):
    alphas = -cu.alphas
    raw = weighted_map(alphas, trace.activations[cu.layer])
    scores = ImportanceScores(alphas, COUNTERFACTUAL, cu.layer, cu.predicted)
    return scores, _make_map(net, trace.input.shape, raw, COUNTERFACTUAL, cu.layer, cu.predicted)


def contrast_cam(net: Network, x, query: ContrastQuery, layer=None, trace=None):
    """Observed contrastive map for "Why P, rather than Q?".

    The contrast loss is cross-entropy of the logits toward Q, whose logit
    gradient ``softmax - onehot(Q)`` is the backward seed.
    """
    layer = _resolve_layer(net, layer)
    p = _check_class(net, query.predicted, "predicted class")
    q = _check_class(net, query.contrast, "contrast class")
    trace = _trace(net, x, trace)
    seed = loss_seed(trace.logits, q).astype(DTYPE)
    alphas = importance_from_seed(trace, net, seed, layer)
    raw = weighted_map(alphas, trace.activations[layer])
    scores = ImportanceScores(alphas, CONTRASTIVE, layer, p, q)
    return scores, _make_map(net, trace.input.shape, raw, CONTRASTIVE, layer, p, q)


def complete_explanation(net: Network, x, layer=None, contrast_q=None,
                         trace=None) -> CompleteExplanation:
    """All three observed maps for the predicted class plus their sum
    ``M_cu + M_ct + M_cf``, computed from one forward trace."""
    trace = _trace(net, x, trace)
    p = predict(trace.logits)
    q = default_contrast(trace.logits) if contrast_q is None else _check_class(net, contrast_q, "contrast class")
    cu_scores, cu = grad_cam(net, x, p, layer, trace)
    _, cf = _counterfactual_from(net, trace, cu_scores)
    _, ct = contrast_cam(net, x, ContrastQuery(p, q), cu.layer, trace)
    complete_raw = cu.raw + ct.raw + cf.raw
    return CompleteExplanation(cu, cf, ct, complete_raw)


def explain(net: Network, x, paradigm: str, layer=None, class_i=None, contrast_q=None,
            trace=None) -> ExplanationMap:
    """One map by paradigm name; ``class_i`` defaults to the prediction."""
    trace = _trace(net, x, trace)
    p = predict(trace.logits) if class_i is None else class_i
    if paradigm == CORRELATION:
        return grad_cam(net, x, p, layer, trace)[1]
    if paradigm == COUNTERFACTUAL:
        return counterfactual_cam(net, x, p, layer, trace)[1]
    if paradigm == CONTRASTIVE:
        q = default_contrast(trace.logits, p) if contrast_q is None else contrast_q
        return contrast_cam(net, x, ContrastQuery(p, q), layer, trace)[1]
    raise ValueError(f"unknown paradigm {paradigm!r}")
