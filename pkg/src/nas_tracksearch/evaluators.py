"""Fitness functions standing in for validation tracking accuracy.

* :class:`SyntheticEvaluator`: seeded landscape of per-gene values plus
  interactions between neighbouring genes, normalized into [0, 1].
* :class:`LookupEvaluator`: exact scores read from a CSV table.
* :class:`ProxyEvaluator`: per-path batch-norm recalibration followed by toy
  template-matching inference on planted synthetic data.
"""

from __future__ import annotations

import csv
import functools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import EngineError, forward_tracker, recalibrate_bn
from .space import (
    BACKBONE_BLOCKS,
    BACKBONE_CHOICES,
    EXEMPLAR_SIZE,
    FULL_CHOICES,
    FULL_SPACE,
    HEAD_CHANNELS,
    NUM_GENES,
    SEARCH_SIZE,
    Genome,
    Space,
    check,
    decode,
    encode,
)
from .supernet import NECK_CHANNELS, WeightStore, entry_layout, space_keys

FEATURE_STRIDE = 16
MAP_SIZE = SEARCH_SIZE // FEATURE_STRIDE
EXEMPLAR_CELLS = EXEMPLAR_SIZE // FEATURE_STRIDE


# --------------------------------------------------------------------------
# Synthetic landscape


@functools.lru_cache(maxsize=32)
def _landscape(seed: int):
    rng = np.random.default_rng([0x5EED, int(seed)])
    unary = [rng.standard_normal(len(c)) for c in FULL_CHOICES]
    pair = [0.5 * rng.standard_normal((len(FULL_CHOICES[i]), len(FULL_CHOICES[i + 1])))
            for i in range(NUM_GENES - 1)]
    lo = sum(u.min() for u in unary) + sum(p.min() for p in pair)
    hi = sum(u.max() for u in unary) + sum(p.max() for p in pair)
    return unary, pair, lo, hi


def _indices(g: Genome) -> list[int]:
    return [c.index(v) for v, c in zip(g.values(), FULL_CHOICES)]


def synthetic_fitness(g: Genome, seed: int) -> float:
    check(g)
    unary, pair, lo, hi = _landscape(seed)
    idx = _indices(g)
    raw = sum(unary[i][k] for i, k in enumerate(idx))
    raw += sum(pair[i][idx[i], idx[i + 1]] for i in range(NUM_GENES - 1))
    return float((raw - lo) / (hi - lo))


@dataclass(frozen=True)
class SyntheticEvaluator:
    seed: int = 0
    kind = "synthetic"

    def __call__(self, g: Genome) -> float:
        return synthetic_fitness(g, self.seed)


# --------------------------------------------------------------------------
# Lookup table


class LookupError_(KeyError):
    pass


class MissingGenomeError(LookupError_):
    pass


class DuplicateKeyError(ValueError):
    pass


def load_table(path: str | Path) -> dict[str, float]:
    """Read a ``genome,score`` CSV whose first column holds canonical encodings."""
    table: dict[str, float] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["genome", "score"]:
            raise ValueError(f"lookup table header must be 'genome,score', got {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"malformed lookup row: {row}")
            key = encode(decode(row[0]))
            if key in table:
                raise DuplicateKeyError(f"duplicate genome in lookup table: {key}")
            table[key] = float(row[1])
    return table


def write_table(path: str | Path, scores: dict[Genome, float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["genome", "score"])
        for g, s in sorted(scores.items(), key=lambda kv: encode(kv[0])):
            w.writerow([encode(g), repr(float(s))])


class LookupEvaluator:
    kind = "lookup"

    def __init__(self, table: dict[str, float]):
        self.table = dict(table)

    @classmethod
    def from_csv(cls, path: str | Path) -> LookupEvaluator:
        return cls(load_table(path))

    def __call__(self, g: Genome) -> float:
        try:
            return self.table[encode(g)]
        except KeyError:
            raise MissingGenomeError(f"genome not in lookup table: {encode(g)}") from None


def lookup_fitness(table_path: str | Path, g: Genome) -> float:
    return LookupEvaluator.from_csv(table_path)(g)


# --------------------------------------------------------------------------
# Planted synthetic tracking data


@dataclass(frozen=True)
class Triple:
    exemplar: np.ndarray
    search: np.ndarray
    cell: tuple[int, int]


def plant(exemplar: np.ndarray, search: np.ndarray, cell: tuple[int, int]) -> np.ndarray:
    """Copy ``exemplar`` into ``search`` centred on feature cell ``cell``, clipped at the borders.

    The copy is aligned to the stride-16 feature grid: exemplar pixel
    ``16 * a`` lands on search pixel ``16 * (cell - 3 + a)``.
    """
    out = search.copy()
    top = FEATURE_STRIDE * (cell[0] - EXEMPLAR_CELLS // 2)
    left = FEATURE_STRIDE * (cell[1] - EXEMPLAR_CELLS // 2)
    y0, x0 = max(top, 0), max(left, 0)
    y1 = min(top + EXEMPLAR_SIZE, SEARCH_SIZE)
    x1 = min(left + EXEMPLAR_SIZE, SEARCH_SIZE)
    out[y0:y1, x0:x1] = exemplar[y0 - top:y1 - top, x0 - left:x1 - left]
    return out


def make_evalset(seed: int, count: int, snr: float = float("inf"), interior: bool = True) -> list[Triple]:
    """Seeded triples of (exemplar, search with the exemplar planted, cell).

    Exemplar pixels are uniform in [0.5, 1.5]; the search background is zero
    plus Gaussian noise of std ``1 / snr``. ``interior=True`` keeps the whole
    plant inside the image (cells 3..12); otherwise any of the 256 cells may
    be chosen and the plant is clipped.
    """
    rng = np.random.default_rng([0xE7A1, int(seed)])
    half = EXEMPLAR_CELLS // 2
    lo, hi = (half, MAP_SIZE - half) if interior else (0, MAP_SIZE)
    noise = 0.0 if np.isinf(snr) else 1.0 / snr
    triples = []
    for _ in range(count):
        ex = rng.uniform(0.5, 1.5, (EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3))
        bg = noise * rng.standard_normal((SEARCH_SIZE, SEARCH_SIZE, 3)) if noise else np.zeros(
            (SEARCH_SIZE, SEARCH_SIZE, 3))
        cell = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
        triples.append(Triple(ex, plant(ex, bg, cell), cell))
    return triples


EVALSET_INDEX = "index.json"


def save_evalset(directory: str | Path, triples: Sequence[Triple]) -> None:
    """Write triples as ``.npy`` tensor pairs plus an ``index.json`` listing files and cells."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    items = []
    for i, t in enumerate(triples):
        ex, se = f"{i:05d}_exemplar.npy", f"{i:05d}_search.npy"
        np.save(d / ex, t.exemplar)
        np.save(d / se, t.search)
        items.append({"exemplar": ex, "search": se, "cell": list(t.cell)})
    (d / EVALSET_INDEX).write_text(json.dumps({"schema_version": 1, "triples": items}, indent=1))


def load_evalset(directory: str | Path) -> list[Triple]:
    d = Path(directory)
    try:
        index = json.loads((d / EVALSET_INDEX).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read evalset index in {d}: {exc}") from None
    if index.get("schema_version") != 1:
        raise ValueError("unsupported evalset schema_version")
    triples = []
    for item in index["triples"]:
        ex = np.load(d / item["exemplar"], allow_pickle=False)
        se = np.load(d / item["search"], allow_pickle=False)
        if ex.shape != (EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3) or se.shape != (SEARCH_SIZE, SEARCH_SIZE, 3):
            raise ValueError(f"evalset tensors have shapes {ex.shape} and {se.shape}")
        cell = tuple(int(c) for c in item["cell"])
        if len(cell) != 2 or not all(0 <= c < MAP_SIZE for c in cell):
            raise ValueError(f"ground-truth cell {cell} outside the {MAP_SIZE}x{MAP_SIZE} map")
        triples.append(Triple(ex, se, cell))
    return triples


def calibration_pairs(triples: Sequence[Triple]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(t.exemplar, t.search) for t in triples]


# --------------------------------------------------------------------------
# Proxy evaluator


def proxy_tracking_fitness(g: Genome, store: WeightStore, calib, evalset: Sequence[Triple],
                           batch_size: int = 16) -> float:
    """Fraction of triples whose classification-map argmax hits the planted cell."""
    if not evalset:
        raise EngineError("evaluation set is empty")
    stats = recalibrate_bn(g, store, calib)
    hits = 0
    for start in range(0, len(evalset), batch_size):
        chunk = evalset[start:start + batch_size]
        ex = np.stack([t.exemplar for t in chunk])
        se = np.stack([t.search for t in chunk])
        cls_map, _ = forward_tracker(g, store, stats, ex, se)
        flat = cls_map[..., 0].reshape(len(chunk), -1).argmax(axis=1)
        for t, k in zip(chunk, flat):
            hits += divmod(int(k), cls_map.shape[2]) == tuple(t.cell)
    return hits / len(evalset)


class ProxyEvaluator:
    kind = "proxy"

    def __init__(self, store: WeightStore, calib, evalset: Sequence[Triple]):
        self.store = store
        self.calib = list(calib)
        self.evalset = list(evalset)

    def __call__(self, g: Genome) -> float:
        return proxy_tracking_fitness(g, self.store, self.calib, self.evalset)


# --------------------------------------------------------------------------
# Hand-constructed template-matching weights


def template_matching_store(space: Space = FULL_SPACE, shift: float = 10.0) -> WeightStore:
    """Weights under which every path computes pure template matching.

    Every spatial kernel is a centre delta and every 1x1 map is an identity
    embedding, so each backbone feature cell is a per-channel increasing
    function of the image pixel at ``16 * cell``; SE gates saturate at 1 and
    normalization shifts (``beta = shift``) keep activations in the
    increasing range of Swish/ReLU. The first head layer sums the three
    colour channels of the correlation volume, the rest pass channel 0
    through, so the classification map peaks where the exemplar was planted.
    """
    entries = {}
    for key in space_keys(space):
        layer_id, choice = key
        layout = entry_layout(layer_id, choice)
        tensors = {}
        for name, shape in layout.items():
            a = np.zeros(shape)
            if name.endswith(".gamma"):
                a[:] = 1.0
            elif name.endswith(".beta"):
                a[:] = shift
            elif name == "se.b2":
                a[:] = 40.0
            elif name in ("bias", "se.b1", "se.w1", "se.w2"):
                pass
            elif len(shape) == 4:
                k, _, cin, cout = shape
                c = k // 2
                if cin == 1:  # depthwise
                    a[c, c, 0, :] = 1.0
                elif layer_id.endswith(".0") and name == "pw":
                    a[c, c, :3, 0] = 1.0
                elif layer_id.endswith(".final"):
                    a[c, c, 0, :] = 1.0
                else:
                    n = min(cin, cout)
                    a[c, c, np.arange(n), np.arange(n)] = 1.0
            tensors[name] = a
        entries[key] = tensors
    return WeightStore.from_entries(entries, seed=-1, space=space)


__all__ = [
    "LookupEvaluator", "ProxyEvaluator", "SyntheticEvaluator", "Triple", "calibration_pairs",
    "load_evalset", "load_table", "lookup_fitness", "make_evalset", "save_evalset", "plant", "proxy_tracking_fitness",
    "synthetic_fitness", "template_matching_store", "write_table",
]
