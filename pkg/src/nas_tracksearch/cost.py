"""Analytic MAC and parameter counting.

Conventions (shared with the tensor engine's instrumented counters):

* one MAC per multiply-accumulate; Flops are reported as MACs;
* convolutions are counted densely, ``H_out * W_out * C_out * K^2 * C_in / groups``,
  padding positions included;
* every normalization layer holds 2 learnable scalars per channel and costs
  no MACs; the final head convs carry a bias instead of a normalization;
* SE counts both fully-connected maps (weights and biases) plus the
  ``H * W * C`` gate rescale; activations, pooling and residual adds are free;
* the exemplar branch re-runs the backbone and neck on a 112x112 input:
  its MACs are counted, its parameters are shared and counted once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

from .space import (
    BACKBONE_BLOCKS,
    BACKBONE_CHOICES,
    EXEMPLAR_SIZE,
    FULL_SPACE,
    HEAD_IN_CHANNELS,
    HEAD_LAYER_KERNEL,
    SCHEMA_VERSION,
    SEARCH_SIZE,
    STAGE_CHANNELS,
    STEM_CHANNELS,
    Genome,
    Space,
    check,
    output_block,
)

FAMILIES = ("conv", "dsconv", "mbconv_se", "skip", "neck_1x1", "xcorr", "head_final")
SE_DIVISOR = 4
NORM_SCALARS = 2
HEAD_OUT = {"cls": 1, "reg": 4}


class Cost(NamedTuple):
    macs: int
    params: int

    def __add__(self, other):
        return Cost(self.macs + other.macs, self.params + other.params)


ZERO = Cost(0, 0)


@dataclass(frozen=True)
class Budget:
    flops_max: float
    params_max: float

    def admits(self, c: Cost) -> bool:
        return c.macs <= self.flops_max and c.params <= self.params_max


INFINITE_BUDGET = Budget(float("inf"), float("inf"))
BUDGET_PRESETS = {
    "mobile": Budget(600_000_000, 2_000_000),
    "largeA": Budget(800_000_000, 3_000_000),
    "largeB": Budget(800_000_000, 4_000_000),
}


@dataclass(frozen=True)
class OperatorSpec:
    family: str
    kernel: int = 1
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    expansion: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown operator family {self.family!r}")
        if self.family == "skip":
            return
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels <= 0 or (self.family != "xcorr" and self.out_channels <= 0):
            raise ValueError("channel counts must be positive")
        if self.family == "mbconv_se" and self.expansion < 1:
            raise ValueError("expansion must be >= 1")

    @property
    def expanded(self) -> int:
        return self.in_channels * self.expansion

    @property
    def se_channels(self) -> int:
        return max(1, self.expanded // SE_DIVISOR)


def out_size(hw: int, stride: int) -> int:
    return -(-hw // stride)


def conv_cost(hw: int, cin: int, cout: int, k: int, stride: int = 1, groups: int = 1,
              norm: bool = True, bias: bool = False) -> Cost:
    ho = out_size(hw, stride)
    w = k * k * cin * cout // groups
    extra = NORM_SCALARS * cout if norm else 0
    return Cost(ho * ho * w, w + extra + (cout if bias else 0))


def op_cost(spec: OperatorSpec, input_hw: int) -> Cost:
    if input_hw <= 0:
        raise ValueError("input size must be positive")
    f = spec.family
    if f == "skip":
        return ZERO
    if f in ("conv", "neck_1x1"):
        return conv_cost(input_hw, spec.in_channels, spec.out_channels, spec.kernel, spec.stride)
    if f == "head_final":
        return conv_cost(input_hw, spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                         norm=False, bias=True)
    if f == "dsconv":
        cin = spec.in_channels
        dw = conv_cost(input_hw, cin, cin, spec.kernel, spec.stride, groups=cin)
        pw = conv_cost(out_size(input_hw, spec.stride), cin, spec.out_channels, 1)
        return dw + pw
    if f == "mbconv_se":
        ce, cr = spec.expanded, spec.se_channels
        ho = out_size(input_hw, spec.stride)
        total = conv_cost(input_hw, spec.in_channels, ce, 1)
        total += conv_cost(input_hw, ce, ce, spec.kernel, spec.stride, groups=ce)
        total += Cost(2 * ce * cr + ho * ho * ce, 2 * ce * cr + cr + ce)
        total += conv_cost(ho, ce, spec.out_channels, 1)
        return total
    if f == "xcorr":
        # kernel = exemplar feature size, one MAC per tap per output element
        return Cost(input_hw * input_hw * spec.in_channels * spec.kernel * spec.kernel, 0)
    raise AssertionError(f)


# --------------------------------------------------------------------------
# Realized operator list of a genome


@dataclass(frozen=True)
class OpInstance:
    name: str
    spec: OperatorSpec
    input_hw: int
    # exemplar-branch replicas share parameters with the search branch
    counts_params: bool = True

    def cost(self) -> Cost:
        c = op_cost(self.spec, self.input_hw)
        return c if self.counts_params else Cost(c.macs, 0)


def backbone_ops(g: Genome, hw: int, prefix: str = "", counts_params: bool = True) -> tuple[list[OpInstance], int]:
    """Stem, fixed DSConv, MBConv blocks up to the output layer, and neck."""
    ops = [OpInstance(prefix + "stem", OperatorSpec("conv", 3, 2, 3, STEM_CHANNELS), hw, counts_params)]
    hw = out_size(hw, 2)
    ops.append(OpInstance(prefix + "dsconv", OperatorSpec("dsconv", 3, 1, STEM_CHANNELS, STEM_CHANNELS),
                          hw, counts_params))
    last = output_block(g.output_layer)
    for blk in BACKBONE_BLOCKS[:last + 1]:
        k, e = BACKBONE_CHOICES[g.backbone[blk.index]]
        spec = OperatorSpec("mbconv_se", k, blk.stride, blk.in_channels, blk.out_channels, e)
        ops.append(OpInstance(f"{prefix}backbone.{blk.index}", spec, hw, counts_params))
        hw = out_size(hw, blk.stride)
    cout = BACKBONE_BLOCKS[last].out_channels
    ops.append(OpInstance(prefix + "neck", OperatorSpec("neck_1x1", 1, 1, cout, HEAD_IN_CHANNELS), hw, counts_params))
    return ops, hw


def head_ops(g: Genome, hw: int) -> list[OpInstance]:
    ops = []
    for name, br in (("cls", g.cls), ("reg", g.reg)):
        c = br.channels
        ops.append(OpInstance(f"{name}.0", OperatorSpec("dsconv", br.first_kernel, 1, HEAD_IN_CHANNELS, c), hw))
        for i, kind in enumerate(br.layers, start=1):
            if kind == "skip":
                spec = OperatorSpec("skip")
            else:
                spec = OperatorSpec("dsconv", HEAD_LAYER_KERNEL[kind], 1, c, c)
            ops.append(OpInstance(f"{name}.{i}", spec, hw))
        ops.append(OpInstance(f"{name}.final", OperatorSpec("head_final", 3, 1, c, HEAD_OUT[name]), hw))
    return ops


def realize(g: Genome) -> list[OpInstance]:
    """Every operator the tracker executes for ``g``, in execution order."""
    search, shw = backbone_ops(g, SEARCH_SIZE)
    exemplar, ehw = backbone_ops(g, EXEMPLAR_SIZE, prefix="exemplar.", counts_params=False)
    xcorr = OpInstance("xcorr", OperatorSpec("xcorr", ehw, 1, HEAD_IN_CHANNELS, HEAD_IN_CHANNELS), shw)
    return search + exemplar + [xcorr] + head_ops(g, shw)


def genome_cost(g: Genome) -> Cost:
    check(g)
    return sum((op.cost() for op in realize(g)), ZERO)


def cost_report(g: Genome) -> dict:
    check(g)
    per_layer = []
    total = ZERO
    for op in realize(g):
        c = op.cost()
        total += c
        per_layer.append({"name": op.name, "macs": c.macs, "params": c.params})
    return {"schema_version": SCHEMA_VERSION, "flops_convention": "1 Flop = 1 MAC",
            "macs": total.macs, "params": total.params, "per_layer": per_layer}


def feasible(g: Genome, b: Budget) -> bool:
    return b.admits(genome_cost(g))


# --------------------------------------------------------------------------
# Extrema


def _block_cost(i: int, choice: int, hw: int) -> Cost:
    blk = BACKBONE_BLOCKS[i]
    k, e = BACKBONE_CHOICES[choice]
    return op_cost(OperatorSpec("mbconv_se", k, blk.stride, blk.in_channels, blk.out_channels, e), hw)


def _block_inputs(size: int) -> list[int]:
    hw = out_size(size, 2)
    sizes = []
    for blk in BACKBONE_BLOCKS:
        sizes.append(hw)
        hw = out_size(hw, blk.stride)
    return sizes


def _trunk_fixed(size: int) -> Cost:
    hw = out_size(size, 2)
    return (op_cost(OperatorSpec("conv", 3, 2, 3, STEM_CHANNELS), size)
            + op_cost(OperatorSpec("dsconv", 3, 1, STEM_CHANNELS, STEM_CHANNELS), hw))


def _pick(costs: Iterable[Cost], field: int, best) -> int:
    return best(c[field] for c in costs)


def space_extrema(space: Space = FULL_SPACE) -> tuple[Cost, Cost]:
    """Exact (min, max) genome cost over ``space``, each field optimized separately.

    Cost decomposes additively: each backbone block depends only on its own
    gene (positions fix channels and resolution), truncated by the output
    layer; each head layer depends only on its own gene and the branch width.
    Optimizing the sum per output layer and per branch width is therefore
    exact, including on reduced spaces whose choices are not ordered by the
    kernel/expansion monotonicity.
    """
    s_in, e_in = _block_inputs(SEARCH_SIZE), _block_inputs(EXEMPLAR_SIZE)
    fixed = _trunk_fixed(SEARCH_SIZE)
    fixed_ex = Cost(_trunk_fixed(EXEMPLAR_SIZE).macs, 0)
    out_hw = s_in[-1]
    ex_hw = e_in[-1]
    xcorr = op_cost(OperatorSpec("xcorr", ex_hw, 1, HEAD_IN_CHANNELS, HEAD_IN_CHANNELS), out_hw)

    per_block = []
    for i, choices in enumerate(space.backbone):
        per_block.append([
            _block_cost(i, c, s_in[i]) + Cost(_block_cost(i, c, e_in[i]).macs, 0) for c in choices
        ])

    result = []
    for best in (min, max):
        fields = []
        for f in (0, 1):
            trunk = []
            for o in space.output_layers:
                last = output_block(o)
                cout = BACKBONE_BLOCKS[last].out_channels
                neck = op_cost(OperatorSpec("neck_1x1", 1, 1, cout, HEAD_IN_CHANNELS), out_hw)
                neck_ex = op_cost(OperatorSpec("neck_1x1", 1, 1, cout, HEAD_IN_CHANNELS), ex_hw)
                v = neck[f] + (neck_ex.macs if f == 0 else 0)
                v += sum(_pick(per_block[i], f, best) for i in range(last + 1))
                trunk.append(v)
            total = fixed[f] + fixed_ex[f] + xcorr[f] + best(trunk)
            for name in ("cls", "reg"):
                opts = []
                for c in space.head_channels:
                    first = _pick((op_cost(OperatorSpec("dsconv", k, 1, HEAD_IN_CHANNELS, c), out_hw)
                                   for k in space.head_first_kernels), f, best)
                    layers = 0
                    for kinds in space.head_layers:
                        layers += _pick(
                            (ZERO if kind == "skip" else
                             op_cost(OperatorSpec("dsconv", HEAD_LAYER_KERNEL[kind], 1, c, c), out_hw)
                             for kind in kinds), f, best)
                    final = op_cost(OperatorSpec("head_final", 3, 1, c, HEAD_OUT[name]), out_hw)
                    opts.append(first + layers + final[f])
                total += best(opts)
            fields.append(total)
        result.append(Cost(*fields))
    return result[0], result[1]


def extremal_genome(kind: str) -> Genome:
    """The full space's cheapest (``"min"``) or most expensive (``"max"``) genome."""
    from .space import BranchGenes, NUM_BACKBONE, NUM_HEAD_LAYERS, NUM_OUTPUT_CHOICES

    if kind == "min":
        br = BranchGenes(128, 3, ("skip",) * NUM_HEAD_LAYERS)
        return Genome((0,) * NUM_BACKBONE, 0, br, br)
    if kind == "max":
        br = BranchGenes(256, 5, ("k5",) * NUM_HEAD_LAYERS)
        return Genome((len(BACKBONE_CHOICES) - 1,) * NUM_BACKBONE, NUM_OUTPUT_CHOICES - 1, br, br)
    raise ValueError(kind)


__all__ = [
    "BUDGET_PRESETS", "Budget", "Cost", "INFINITE_BUDGET", "OpInstance", "OperatorSpec",
    "STAGE_CHANNELS", "cost_report", "extremal_genome", "feasible", "genome_cost", "op_cost",
    "realize", "space_extrema",
]
