"""Search space for the tracker: genome algebra, validation, encoding and sampling.

A genome has 33 genes:

* 14 backbone genes, each an index into ``BACKBONE_CHOICES`` (kernel, expansion);
* one output-layer gene selecting one of the last eight backbone blocks;
* 9 genes per head branch (cls, reg): channel width, first-layer kernel and
  seven layer kinds from ``{"k3", "k5", "skip"}``.

Reduced spaces for oracle tests are the same :class:`Space` with shrunken
choice sets. Gene values are always expressed in the full space's vocabulary,
so a genome valid in a reduced space is valid in the full space too.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

SCHEMA_VERSION = 1

BACKBONE_CHOICES: tuple[tuple[int, int], ...] = (
    (3, 4), (3, 6), (5, 4), (5, 6), (7, 4), (7, 6),
)
STAGE_CHANNELS = (24, 40, 80, 96)
STAGE_REPEATS = (2, 4, 4, 4)
STAGE_STRIDES = (2, 2, 2, 1)
NUM_BACKBONE = sum(STAGE_REPEATS)
NUM_OUTPUT_CHOICES = 8
FIRST_OUTPUT_BLOCK = NUM_BACKBONE - NUM_OUTPUT_CHOICES

STEM_CHANNELS = 16
HEAD_IN_CHANNELS = 128
HEAD_CHANNELS = (128, 192, 256)
HEAD_FIRST_KERNELS = (3, 5)
HEAD_LAYER_KINDS = ("k3", "k5", "skip")
HEAD_LAYER_KERNEL = {"k3": 3, "k5": 5}
NUM_HEAD_LAYERS = 7
GENES_PER_BRANCH = 2 + NUM_HEAD_LAYERS
NUM_GENES = NUM_BACKBONE + 1 + 2 * GENES_PER_BRANCH

SEARCH_SIZE = 256
EXEMPLAR_SIZE = 112

# Approximate head-space size quoted by the original authors, (3 * 3^8)^2.
QUOTED_HEAD_CARDINALITY = (3 * 3**8) ** 2


@dataclass(frozen=True)
class BlockSpec:
    index: int
    stage: int
    in_channels: int
    out_channels: int
    stride: int


def _backbone_blocks() -> tuple[BlockSpec, ...]:
    blocks = []
    cin = STEM_CHANNELS
    for stage, (cout, reps, stride) in enumerate(zip(STAGE_CHANNELS, STAGE_REPEATS, STAGE_STRIDES)):
        for r in range(reps):
            blocks.append(BlockSpec(len(blocks), stage, cin, cout, stride if r == 0 else 1))
            cin = cout
    return tuple(blocks)


BACKBONE_BLOCKS = _backbone_blocks()


def output_block(output_layer: int) -> int:
    """Absolute backbone block index named by an output-layer gene."""
    return FIRST_OUTPUT_BLOCK + output_layer


class GenomeError(ValueError):
    """Malformed or out-of-range genome."""


@dataclass(frozen=True)
class BranchGenes:
    channels: int
    first_kernel: int
    layers: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def depth(self) -> int:
        """Non-skip layers among the seven elastic ones (first DSConv and final conv excluded)."""
        return sum(1 for k in self.layers if k != "skip")


@dataclass(frozen=True)
class Genome:
    backbone: tuple[int, ...]
    output_layer: int
    cls: BranchGenes
    reg: BranchGenes

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(self.backbone))

    def values(self) -> tuple:
        """Flat 33-gene vector (raw gene values, full-space vocabulary)."""
        out: list[Any] = list(self.backbone)
        out.append(self.output_layer)
        for br in (self.cls, self.reg):
            out.extend((br.channels, br.first_kernel, *br.layers))
        return tuple(out)

    @classmethod
    def from_values(cls, values: Sequence) -> Genome:
        if len(values) != NUM_GENES:
            raise GenomeError(f"wrong gene count: expected {NUM_GENES}, got {len(values)}")
        v = list(values)
        bb = v[:NUM_BACKBONE]
        out = v[NUM_BACKBONE]
        b0 = NUM_BACKBONE + 1
        branches = []
        for start in (b0, b0 + GENES_PER_BRANCH):
            chunk = v[start:start + GENES_PER_BRANCH]
            branches.append(BranchGenes(chunk[0], chunk[1], tuple(chunk[2:])))
        return cls(tuple(bb), out, branches[0], branches[1])

    def replace_output_layer(self, output_layer: int) -> Genome:
        return Genome(self.backbone, output_layer, self.cls, self.reg)

    def __lt__(self, other: Genome) -> bool:
        return encode(self) < encode(other)


# --------------------------------------------------------------------------
# Space descriptor


@dataclass(frozen=True)
class LayerSpec:
    name: str
    input_shape: tuple[int, int, int]
    operator: str
    choices: int
    channels: int | str
    repeats: int
    stride: int


@dataclass(frozen=True)
class Space:
    """Per-gene choice sets. The default instance is the full search space."""

    backbone: tuple[tuple[int, ...], ...] = tuple(
        tuple(range(len(BACKBONE_CHOICES))) for _ in range(NUM_BACKBONE)
    )
    output_layers: tuple[int, ...] = tuple(range(NUM_OUTPUT_CHOICES))
    head_channels: tuple[int, ...] = HEAD_CHANNELS
    head_first_kernels: tuple[int, ...] = HEAD_FIRST_KERNELS
    head_layers: tuple[tuple[str, ...], ...] = tuple(HEAD_LAYER_KINDS for _ in range(NUM_HEAD_LAYERS))
    _choices: tuple[tuple, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.backbone) != NUM_BACKBONE or len(self.head_layers) != NUM_HEAD_LAYERS:
            raise ValueError("space must keep 14 backbone genes and 7 head layers per branch")
        full = FULL_CHOICES if "FULL_CHOICES" in globals() else None
        choices: list[tuple] = [tuple(c) for c in self.backbone]
        choices.append(tuple(self.output_layers))
        branch = [tuple(self.head_channels), tuple(self.head_first_kernels)]
        branch += [tuple(c) for c in self.head_layers]
        choices += branch + branch
        for i, c in enumerate(choices):
            if not c:
                raise ValueError(f"gene {i} has an empty choice set")
            if len(set(c)) != len(c):
                raise ValueError(f"gene {i} has duplicate choices")
            if full is not None and not set(c) <= set(full[i]):
                raise ValueError(f"gene {i} choices {c} are not a subset of the full space")
        object.__setattr__(self, "_choices", tuple(choices))

    @property
    def gene_choices(self) -> tuple[tuple, ...]:
        return self._choices

    @property
    def cardinality(self) -> int:
        return math.prod(len(c) for c in self._choices)

    @property
    def backbone_cardinality(self) -> int:
        return math.prod(len(c) for c in self.backbone)

    @property
    def branch_cardinality(self) -> int:
        n = len(self.head_channels) * len(self.head_first_kernels)
        return n * math.prod(len(c) for c in self.head_layers)

    @property
    def head_cardinality(self) -> int:
        return self.branch_cardinality ** 2

    def contains(self, g: Genome) -> bool:
        return all(v in c for v, c in zip(g.values(), self._choices))

    def enumerate(self) -> Iterator[Genome]:
        for vals in itertools.product(*self._choices):
            yield Genome.from_values(vals)

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"layers": [list(map(str, c)) for c in self._choices],
             "blocks": [(b.in_channels, b.out_channels, b.stride) for b in BACKBONE_BLOCKS]},
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def reduced(cls, **overrides) -> Space:
        """Full space with some choice sets replaced.

        ``backbone`` may be given as a dict ``{layer: choices}``, and
        ``head_layers`` likewise; all other keys take tuples directly.
        """
        base = cls()
        bb = list(base.backbone)
        for k, v in dict(overrides.pop("backbone", {})).items():
            bb[k] = tuple(v)
        hl = list(base.head_layers)
        for k, v in dict(overrides.pop("head_layers", {})).items():
            hl[k] = tuple(v)
        return cls(backbone=tuple(bb), head_layers=tuple(hl), **overrides)


FULL_SPACE = Space()
FULL_CHOICES = FULL_SPACE.gene_choices


@dataclass(frozen=True)
class SpaceDescriptor:
    layers: tuple[LayerSpec, ...]
    space: Space
    backbone_cardinality: int
    output_choices: int
    branch_cardinality: int
    head_cardinality: int
    quoted_head_cardinality: int
    cardinality: int

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "backbone_cardinality": self.backbone_cardinality,
            "output_layer_choices": self.output_choices,
            "branch_cardinality": self.branch_cardinality,
            "head_cardinality": self.head_cardinality,
            "quoted_head_cardinality": self.quoted_head_cardinality,
            "cardinality": self.cardinality,
            "layers": [
                {"name": l.name, "input_shape": list(l.input_shape), "operator": l.operator,
                 "choices": l.choices, "channels": l.channels, "repeats": l.repeats, "stride": l.stride}
                for l in self.layers
            ],
        }


def describe_space(space: Space = FULL_SPACE) -> SpaceDescriptor:
    half = SEARCH_SIZE // 2
    layers = [
        LayerSpec("stem", (SEARCH_SIZE, SEARCH_SIZE, 3), "conv3x3", 1, STEM_CHANNELS, 1, 2),
        LayerSpec("dsconv", (half, half, STEM_CHANNELS), "dsconv", 1, STEM_CHANNELS, 1, 1),
    ]
    hw, cin = half, STEM_CHANNELS
    for stage, (cout, reps, stride) in enumerate(zip(STAGE_CHANNELS, STAGE_REPEATS, STAGE_STRIDES)):
        first = sum(STAGE_REPEATS[:stage])
        n = max(len(space.backbone[i]) for i in range(first, first + reps))
        layers.append(LayerSpec(f"stage{stage}", (hw, hw, cin), "mbconv", n, cout, reps, stride))
        hw //= stride
        cin = cout
    nb = len(space.head_channels) * len(space.head_first_kernels)
    nl = max(len(c) for c in space.head_layers)
    for name, out, ch in (("cls", 1, "C1"), ("reg", 4, "C2")):
        layers += [
            LayerSpec(f"{name}.first", (hw, hw, HEAD_IN_CHANNELS), "dsconv", nb, ch, 1, 1),
            LayerSpec(f"{name}.layers", (hw, hw, 0), "dsconv/skip", nl, ch, NUM_HEAD_LAYERS, 1),
            LayerSpec(f"{name}.final", (hw, hw, 0), "conv3x3", 1, out, 1, 1),
        ]
    return SpaceDescriptor(
        layers=tuple(layers),
        space=space,
        backbone_cardinality=space.backbone_cardinality,
        output_choices=len(space.output_layers),
        branch_cardinality=space.branch_cardinality,
        head_cardinality=space.head_cardinality,
        quoted_head_cardinality=QUOTED_HEAD_CARDINALITY,
        cardinality=space.cardinality,
    )


# --------------------------------------------------------------------------
# Sampling and validation


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def random_genome(rng_seed, space: Space = FULL_SPACE) -> Genome:
    """Uniform single-path sample; accepts an int seed or a numpy Generator."""
    rng = _rng(rng_seed)
    vals = [c[int(rng.integers(len(c)))] for c in space.gene_choices]
    return Genome.from_values(vals)


def validate(g: Genome, space: Space = FULL_SPACE) -> list[str]:
    """Return every invariant violation of ``g``; an empty list means valid."""
    errors = []
    try:
        vals = g.values()
    except (TypeError, AttributeError) as exc:
        return [f"malformed genome: {exc}"]
    if len(g.backbone) != NUM_BACKBONE:
        errors.append(f"wrong gene count: backbone has {len(g.backbone)} genes, expected {NUM_BACKBONE}")
    for name, br in (("cls", g.cls), ("reg", g.reg)):
        if len(br.layers) != NUM_HEAD_LAYERS:
            errors.append(f"wrong gene count: {name}.layers has {len(br.layers)} genes, expected {NUM_HEAD_LAYERS}")
        if br.first_kernel == "skip":
            errors.append(f"{name}: first head layer may not be skip")
    if len(vals) != NUM_GENES or errors:
        return errors
    for i, (v, c) in enumerate(zip(vals, space.gene_choices)):
        if isinstance(v, bool) or v not in c:
            errors.append(f"gene out of range: {gene_name(i)}={v!r} not in {list(c)}")
    return errors


def gene_name(i: int) -> str:
    if i < NUM_BACKBONE:
        return f"backbone[{i}]"
    if i == NUM_BACKBONE:
        return "output_layer"
    j = i - NUM_BACKBONE - 1
    branch = "cls" if j < GENES_PER_BRANCH else "reg"
    j %= GENES_PER_BRANCH
    if j == 0:
        return f"{branch}.channels"
    if j == 1:
        return f"{branch}.first_kernel"
    return f"{branch}.layers[{j - 2}]"


def check(g: Genome, space: Space = FULL_SPACE) -> Genome:
    errors = validate(g, space)
    if errors:
        raise GenomeError("; ".join(errors))
    return g


# --------------------------------------------------------------------------
# Canonical JSON encoding

_TOP_KEYS = ("schema_version", "backbone", "output_layer", "cls", "reg")
_BRANCH_KEYS = ("channels", "first_kernel", "layers")


def to_dict(g: Genome) -> dict:
    def branch(b: BranchGenes) -> dict:
        return {"channels": b.channels, "first_kernel": b.first_kernel, "layers": list(b.layers)}

    return {
        "schema_version": SCHEMA_VERSION,
        "backbone": list(g.backbone),
        "output_layer": g.output_layer,
        "cls": branch(g.cls),
        "reg": branch(g.reg),
    }


def encode(g: Genome) -> str:
    return json.dumps(to_dict(g), separators=(",", ":"))


def from_dict(d: Any, space: Space = FULL_SPACE) -> Genome:
    if not isinstance(d, dict):
        raise GenomeError("genome must be a JSON object")
    keys = set(d)
    required = set(_TOP_KEYS) - {"schema_version"}
    if not required <= keys or not keys <= set(_TOP_KEYS):
        raise GenomeError(f"wrong field set: {sorted(keys)}")
    if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise GenomeError(f"unsupported schema_version {d['schema_version']!r}")
    bb = d["backbone"]
    if not isinstance(bb, list) or not all(_is_int(x) for x in bb):
        raise GenomeError("backbone must be a list of integers")
    if len(bb) != NUM_BACKBONE:
        raise GenomeError(f"wrong gene count: backbone has {len(bb)} genes, expected {NUM_BACKBONE}")
    if not _is_int(d["output_layer"]):
        raise GenomeError("output_layer must be an integer")
    branches = []
    for name in ("cls", "reg"):
        b = d[name]
        if not isinstance(b, dict) or set(b) != set(_BRANCH_KEYS):
            raise GenomeError(f"wrong field set in {name}")
        layers = b["layers"]
        if not isinstance(layers, list) or not all(isinstance(x, str) for x in layers):
            raise GenomeError(f"{name}.layers must be a list of strings")
        if len(layers) != NUM_HEAD_LAYERS:
            raise GenomeError(f"wrong gene count: {name}.layers has {len(layers)} genes, expected {NUM_HEAD_LAYERS}")
        if not _is_int(b["channels"]) or not _is_int(b["first_kernel"]):
            raise GenomeError(f"{name}.channels and {name}.first_kernel must be integers")
        branches.append(BranchGenes(b["channels"], b["first_kernel"], tuple(layers)))
    g = Genome(tuple(bb), d["output_layer"], branches[0], branches[1])
    return check(g, space)


def decode(text: str | bytes, space: Space = FULL_SPACE) -> Genome:
    try:
        d = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise GenomeError(f"malformed genome JSON: {exc}") from None
    return from_dict(d, space)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def space_to_dict(space: Space) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "backbone": [list(c) for c in space.backbone],
        "output_layers": list(space.output_layers),
        "head_channels": list(space.head_channels),
        "head_first_kernels": list(space.head_first_kernels),
        "head_layers": [list(c) for c in space.head_layers],
    }


def space_from_dict(d: dict) -> Space:
    """Inverse of :func:`space_to_dict`; ``backbone`` and ``head_layers`` may also be
    partial ``{index: choices}`` maps over the full space."""
    d = dict(d)
    if d.pop("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError("unsupported space schema_version")
    unknown = set(d) - {"backbone", "output_layers", "head_channels", "head_first_kernels", "head_layers"}
    if unknown:
        raise ValueError(f"unknown space fields: {sorted(unknown)}")
    kw: dict[str, Any] = {}
    for key in ("backbone", "head_layers"):
        v = d.pop(key, None)
        if isinstance(v, dict):
            kw[key] = {int(k): tuple(c) for k, c in v.items()}
        elif v is not None:
            kw[key] = dict(enumerate(tuple(c) for c in v))
    for key, v in d.items():
        kw[key] = tuple(v)
    return Space.reduced(**kw)


def path_space(g: Genome) -> Space:
    """Smallest space containing ``g`` (one choice per gene, branch genes merged)."""
    return Space.reduced(
        backbone={i: (v,) for i, v in enumerate(g.backbone)},
        output_layers=(g.output_layer,),
        head_channels=tuple(sorted({g.cls.channels, g.reg.channels})),
        head_first_kernels=tuple(sorted({g.cls.first_kernel, g.reg.first_kernel})),
        head_layers={i: tuple(sorted({a, b})) for i, (a, b) in enumerate(zip(g.cls.layers, g.reg.layers))},
    )
