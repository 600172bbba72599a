"""Minimal deterministic CPU forward pass for tracker subnets.

Tensors are numpy arrays in HWC layout (a leading batch axis, NHWC, is
accepted everywhere). Weights are stored as float32 and promoted to float64
for computation. Convolutions use same-padding of ``k // 2`` and are computed
tap by tap; each tap's multiply-accumulates are added to an optional
:class:`MacCounter`, which therefore counts exactly the dense work the loops
perform, under the same conventions as :mod:`nas_tracksearch.cost`.

Normalization layers run in one of two modes. With ``stats=None`` the pass
collects batch moments layer by layer (each layer normalized with its own
freshly computed moments before the next layer runs) and returns them as
:class:`PathStats`; otherwise the given stats are applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .space import (
    BACKBONE_BLOCKS,
    BACKBONE_CHOICES,
    Genome,
    HEAD_LAYER_KERNEL,
    check,
    encode,
    output_block,
)
from .supernet import PathView, WeightStore, path_view

BN_EPS = 1e-8  # negligible against activation variances; keeps normalized moments at (0, 1)


class EngineError(ValueError):
    pass


class MissingStatsError(EngineError):
    pass


class MacCounter:
    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


@dataclass
class PathStats:
    """Per-normalization-layer (mean, variance) for one sampled path."""

    genome_key: str
    layers: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.layers[name]
        except KeyError:
            raise MissingStatsError(f"no statistics for normalization layer {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def names(self) -> list[str]:
        return list(self.layers)


# --------------------------------------------------------------------------
# Primitives


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise EngineError(f"expected HWC or NHWC tensor, got shape {x.shape}")


def conv2d(x: np.ndarray, weights: np.ndarray, kernel: int, stride: int = 1, groups: int = 1,
           counter: MacCounter | None = None) -> np.ndarray:
    """Same-padded 2-D convolution (cross-correlation), no bias.

    ``weights`` has shape ``(kernel, kernel, C_in / groups, C_out)``.
    """
    xb, squeeze = _batched(x)
    n, h, w, cin = xb.shape
    weights = np.asarray(weights, dtype=np.float64)
    if kernel % 2 == 0:
        raise EngineError(f"kernel must be odd, got {kernel}")
    if cin % groups:
        raise EngineError(f"{cin} input channels not divisible by {groups} groups")
    kh, kw, cg, cout = weights.shape
    if (kh, kw) != (kernel, kernel) or cg != cin // groups or cout % groups:
        raise EngineError(f"weight shape {weights.shape} does not match kernel {kernel}, "
                          f"{cin} input channels, {groups} groups")
    ho, wo = -(-h // stride), -(-w // stride)
    p = kernel // 2
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
    out = np.zeros((n, ho, wo, cout))
    per_tap = n * ho * wo * cout * cg
    depthwise = groups == cin and cg == 1 and cout == cin
    tmp = np.empty_like(out) if depthwise else None
    for dy in range(kernel):
        for dx in range(kernel):
            tap = xp[:, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride, :]
            wt = weights[dy, dx]
            if groups == 1:
                out += tap @ wt
            elif depthwise:
                np.multiply(tap, wt[0], out=tmp)
                out += tmp
            else:
                og = cout // groups
                t = tap.reshape(n, ho, wo, groups, cg)
                wg = wt.reshape(cg, groups, og).transpose(1, 0, 2)
                out += np.einsum("nhwgc,gco->nhwgo", t, wg).reshape(n, ho, wo, cout)
            if counter is not None:
                counter.add(per_tap)
    return out[0] if squeeze else out


def swish(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def squeeze_excite(x: np.ndarray, w1, b1, w2, b2, counter: MacCounter | None = None) -> np.ndarray:
    xb, squeeze = _batched(x)
    n, h, w, c = xb.shape
    pooled = xb.mean(axis=(1, 2))
    hidden = relu(pooled @ np.asarray(w1, np.float64) + b1)
    gate = sigmoid(hidden @ np.asarray(w2, np.float64) + b2)
    out = xb * gate[:, None, None, :]
    if counter is not None:
        cr = np.shape(w1)[1]
        counter.add(n * (2 * c * cr + h * w * c))
    return out[0] if squeeze else out


def xcorr_depthwise(exemplar_feat: np.ndarray, search_feat: np.ndarray,
                    counter: MacCounter | None = None) -> np.ndarray:
    """Per-channel correlation of exemplar features over search features.

    Zero padding of ``k // 2`` keeps the search feature's spatial size.
    Batched inputs pair exemplar ``i`` with search ``i``.
    """
    eb, squeeze = _batched(exemplar_feat)
    sb, _ = _batched(search_feat)
    if eb.shape[-1] != sb.shape[-1]:
        raise EngineError(f"channel mismatch: exemplar {eb.shape[-1]} vs search {sb.shape[-1]}")
    if eb.shape[0] != sb.shape[0]:
        raise EngineError("exemplar and search batches differ in size")
    n, kh, kw, c = eb.shape
    if kh != kw or kh % 2 == 0:
        raise EngineError(f"exemplar spatial size must be odd and square, got {kh}x{kw}")
    _, h, w, _ = sb.shape
    p = kh // 2
    sp = np.pad(sb, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros_like(sb)
    for dy in range(kh):
        for dx in range(kw):
            out += sp[:, dy:dy + h, dx:dx + w, :] * eb[:, dy, dx, None, None, :]
            if counter is not None:
                counter.add(n * h * w * c)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------
# Path execution


class _Pass:
    """One forward pass over a path; backbone tensors flow as [exemplar, search] pairs."""

    def __init__(self, view: Mapping, stats: PathStats | Mapping | None, counter: MacCounter | None,
                 trace: dict | None):
        self.view = view
        self.stats = stats
        genome = getattr(view, "genome", None)
        self.collected = None if stats is not None else PathStats(encode(genome) if genome else "")
        self.counter = counter
        self.trace = trace

    def norm(self, name: str, xs: list[np.ndarray], entry, prefix: str) -> list[np.ndarray]:
        if self.stats is None:
            flat = np.concatenate([x.reshape(-1, x.shape[-1]) for x in xs])
            mean = flat.mean(axis=0)
            var = ((flat - mean) ** 2).mean(axis=0)
            self.collected.layers[name] = (mean, var)
        else:
            if name not in self.stats:
                raise MissingStatsError(f"no statistics for normalization layer {name!r}")
            mean, var = self.stats[name]
            if mean.shape != (xs[0].shape[-1],):
                raise EngineError(f"statistics for {name} have {mean.shape[0]} channels, "
                                  f"activations have {xs[0].shape[-1]}")
        inv = 1.0 / np.sqrt(var + BN_EPS)
        gamma = entry[f"{prefix}_bn.gamma"].astype(np.float64)
        beta = entry[f"{prefix}_bn.beta"].astype(np.float64)
        normed = [(x - mean) * inv for x in xs]
        if self.trace is not None:
            self.trace[name] = normed
        return [z * gamma + beta for z in normed]

    def conv(self, xs, entry, prefix, kernel, stride=1, depthwise=False):
        w = entry[prefix]
        groups = xs[0].shape[-1] if depthwise else 1
        return [conv2d(x, w, kernel, stride, groups, self.counter) for x in xs]

    def dsconv(self, name, xs, kernel, act):
        e = self.view[name]
        xs = self.conv(xs, e, "dw", kernel, depthwise=True)
        xs = [act(x) for x in self.norm(f"{name}.dw_bn", xs, e, "dw")]
        xs = self.conv(xs, e, "pw", 1)
        return self.norm(f"{name}.pw_bn", xs, e, "pw")

    def mbconv(self, name, xs, kernel, stride, residual):
        e = self.view[name]
        inputs = xs
        xs = self.conv(xs, e, "expand", 1)
        xs = [swish(x) for x in self.norm(f"{name}.expand_bn", xs, e, "expand")]
        xs = self.conv(xs, e, "dw", kernel, stride, depthwise=True)
        xs = [swish(x) for x in self.norm(f"{name}.dw_bn", xs, e, "dw")]
        xs = [squeeze_excite(x, e["se.w1"], e["se.b1"], e["se.w2"], e["se.b2"], self.counter) for x in xs]
        xs = self.conv(xs, e, "project", 1)
        xs = self.norm(f"{name}.project_bn", xs, e, "project")
        if residual:
            xs = [x + r for x, r in zip(xs, inputs)]
        return xs

    def backbone(self, xs, stop_after: int | None = None):
        """Stem through neck. ``stop_after="stem"`` ends right after the stem."""
        g = self.view.genome
        e = self.view["stem"]
        xs = self.conv(xs, e, "conv", 3, 2)
        xs = [swish(x) for x in self.norm("stem.bn", xs, e, "conv")]
        if stop_after == "stem":
            return xs
        xs = self.dsconv("dsconv", xs, 3, swish)
        for blk in BACKBONE_BLOCKS[:output_block(g.output_layer) + 1]:
            k, _ = BACKBONE_CHOICES[g.backbone[blk.index]]
            residual = blk.stride == 1 and blk.in_channels == blk.out_channels
            xs = self.mbconv(f"backbone.{blk.index}", xs, k, blk.stride, residual)
        e = self.view["neck"]
        xs = self.conv(xs, e, "conv", 1)
        return [swish(x) for x in self.norm("neck.bn", xs, e, "conv")]

    def head(self, name, x):
        br = getattr(self.view.genome, name)
        xs = self.dsconv(f"{name}.0", [x], br.first_kernel, relu)
        xs = [relu(x) for x in xs]
        for i, kind in enumerate(br.layers, start=1):
            if kind == "skip":
                continue
            xs = [relu(x) for x in self.dsconv(f"{name}.{i}", xs, HEAD_LAYER_KERNEL[kind], relu)]
        e = self.view[f"{name}.final"]
        out = conv2d(xs[0], e["conv"], 3, 1, 1, self.counter)
        return out + e["bias"].astype(np.float64)

    def run(self, exemplar, search):
        ex, s = self.backbone([exemplar, search])
        corr = xcorr_depthwise(ex, s, self.counter)
        return self.head("cls", corr), self.head("reg", corr)


def dsconv_forward(x: np.ndarray, weights: Mapping[str, np.ndarray], kernel: int,
                   stats: PathStats | Mapping, name: str = "dsconv", act=swish,
                   counter: MacCounter | None = None) -> np.ndarray:
    """Depthwise ``kernel``x``kernel`` -> norm -> ``act`` -> pointwise -> norm.

    ``stats`` must hold ``{name}.dw_bn`` and ``{name}.pw_bn``.
    """
    xb, squeeze = _batched(x)
    (out,) = _Pass({name: weights}, stats, counter, None).dsconv(name, [xb], kernel, act)
    return out[0] if squeeze else out


def mbconv_forward(x: np.ndarray, weights: Mapping[str, np.ndarray], kernel: int, stride: int,
                   stats: PathStats | Mapping, name: str = "mbconv",
                   counter: MacCounter | None = None) -> np.ndarray:
    """Expand -> depthwise -> SE -> project, with a residual add when shapes allow.

    ``stats`` must hold ``{name}.expand_bn``, ``{name}.dw_bn`` and ``{name}.project_bn``.
    """
    xb, squeeze = _batched(x)
    cout = np.shape(weights["project"])[-1]
    residual = stride == 1 and xb.shape[-1] == cout
    (out,) = _Pass({name: weights}, stats, counter, None).mbconv(name, [xb], kernel, stride, residual)
    return out[0] if squeeze else out


def _prepare(exemplar, search) -> tuple[np.ndarray, np.ndarray, bool]:
    eb, squeeze = _batched(exemplar)
    sb, _ = _batched(search)
    if eb.shape[0] != sb.shape[0]:
        raise EngineError("exemplar and search batches differ in size")
    if eb.shape[-1] != 3 or sb.shape[-1] != 3:
        raise EngineError("images must have 3 channels")
    if not (np.isfinite(eb).all() and np.isfinite(sb).all()):
        raise EngineError("non-finite input values")
    return eb, sb, squeeze


def _view(g: Genome, store: WeightStore | PathView) -> PathView:
    check(g)
    if isinstance(store, PathView):
        if store.genome != g:
            raise EngineError("path view belongs to a different genome")
        return store
    return path_view(store, g)


def forward_tracker(g: Genome, store: WeightStore | PathView, stats: PathStats,
                    exemplar: np.ndarray, search: np.ndarray,
                    counter: MacCounter | None = None, trace: dict | None = None):
    """Run the subnet ``g``; returns ``(cls_map, reg_map)`` of shapes 16x16x1 and 16x16x4."""
    if stats is None:
        raise MissingStatsError("forward_tracker needs path statistics; run recalibrate_bn first")
    eb, sb, squeeze = _prepare(exemplar, search)
    cls_map, reg_map = _Pass(_view(g, store), stats, counter, trace).run(eb, sb)
    if squeeze:
        return cls_map[0], reg_map[0]
    return cls_map, reg_map


def recalibrate_bn(g: Genome, store: WeightStore | PathView,
                   calib: Iterable[tuple[np.ndarray, np.ndarray]]) -> PathStats:
    """Empirical per-layer moments of pre-normalization activations over ``calib``.

    The whole stream is processed as one batch, layer by layer, so each
    layer's moments are computed from inputs normalized with the already
    recomputed moments of the layers before it. Backbone layers pool the
    exemplar and search activations of every pair. The store is not touched.
    """
    pairs = list(calib)
    if not pairs:
        raise EngineError("calibration stream is empty")
    eb = np.stack([np.asarray(e, np.float64) for e, _ in pairs])
    sb = np.stack([np.asarray(s, np.float64) for _, s in pairs])
    eb, sb, _ = _prepare(eb, sb)
    p = _Pass(_view(g, store), None, None, None)
    p.run(eb, sb)
    return p.collected


def instrumented_macs(g: Genome, store: WeightStore | PathView | None = None,
                      stats: PathStats | None = None, stop_after: str | None = None) -> int:
    """Count the multiply-accumulates of one real forward pass of ``g``.

    Without a store, a weight set covering just this path is initialized
    (the count does not depend on weight values). Statistics default to unit
    moments. ``stop_after="stem"`` counts only the search-branch stem.
    """
    from .space import EXEMPLAR_SIZE, SEARCH_SIZE

    view = _view(g, store if store is not None else _path_only_store(g))
    if stats is None:
        stats = _unit_stats(view)
    counter = MacCounter()
    rng = np.random.default_rng(0)
    exemplar = rng.standard_normal((EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3))
    search = rng.standard_normal((SEARCH_SIZE, SEARCH_SIZE, 3))
    p = _Pass(view, stats, counter, None)
    if stop_after == "stem":
        p.backbone([search[None]], stop_after="stem")
    elif stop_after is None:
        p.run(exemplar[None], search[None])
    else:
        raise ValueError(f"unknown stop point {stop_after!r}")
    return counter.total


def _path_only_store(g: Genome) -> WeightStore:
    from .space import path_space
    from .supernet import init_weights

    return init_weights(path_space(g), seed=0)


def unit_stats(g: Genome, store: WeightStore | PathView) -> PathStats:
    """Zero-mean, unit-variance statistics for every normalization layer on ``g``'s path.

    Useful when only shapes or operation counts matter and a calibration
    pass would be wasted work.
    """
    return _unit_stats(_view(g, store))


def _unit_stats(view: PathView) -> PathStats:
    stats = PathStats(encode(view.genome))
    for role, entry in view.items():
        for tname, arr in entry.items():
            if tname.endswith("_bn.gamma"):
                bn = tname[: -len(".gamma")]
                c = arr.shape[0]
                stats.layers[f"{role}.{bn}" if bn != "conv_bn" else f"{role}.bn"] = (np.zeros(c), np.ones(c))
    return stats


def normalization_layers(view: PathView) -> list[str]:
    return list(_unit_stats(view).layers)


__all__ = [
    "BN_EPS", "EngineError", "MacCounter", "MissingStatsError", "PathStats", "conv2d", "dsconv_forward",
    "mbconv_forward",
    "forward_tracker", "instrumented_macs", "recalibrate_bn", "squeeze_excite", "unit_stats", "xcorr_depthwise",
]
