"""Architecture statistics for a single genome."""

from __future__ import annotations

from dataclasses import dataclass

from .cost import Cost, cost_report
from .space import (
    BACKBONE_BLOCKS,
    BACKBONE_CHOICES,
    NUM_OUTPUT_CHOICES,
    SCHEMA_VERSION,
    Genome,
    check,
    output_block,
)


def output_position(output_layer: int) -> str:
    from_end = NUM_OUTPUT_CHOICES - 1 - output_layer
    if from_end == 0:
        return "last block"
    if from_end == 1:
        return "second-last block"
    n = from_end + 1
    return f"{n}{'rd' if n == 3 else 'th'}-last block"  # n ranges over 3..8


@dataclass(frozen=True)
class ArchReport:
    layers: list[dict]
    cost: Cost
    per_layer_cost: list[dict]
    k7_fraction: float
    output_layer: int
    output_block: int
    output_position: str
    cls_depth: int
    reg_depth: int

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "layers": self.layers,
            "macs": self.cost.macs,
            "params": self.cost.params,
            "per_layer": self.per_layer_cost,
            "summary": {
                "k7_fraction": self.k7_fraction,
                "output_layer": self.output_layer,
                "output_block": self.output_block,
                "output_position": self.output_position,
                "cls_depth": self.cls_depth,
                "reg_depth": self.reg_depth,
                "cls_conv_layers": self.cls_depth + 2,
                "reg_conv_layers": self.reg_depth + 2,
            },
        }


def report(g: Genome) -> ArchReport:
    check(g)
    last = output_block(g.output_layer)
    layers = []
    for blk in BACKBONE_BLOCKS:
        k, e = BACKBONE_CHOICES[g.backbone[blk.index]]
        layers.append({"layer": f"backbone.{blk.index}", "op": f"MBConv k{k} e{e}",
                       "channels": blk.out_channels, "stride": blk.stride,
                       "active": blk.index <= last})
    for name, br in (("cls", g.cls), ("reg", g.reg)):
        layers.append({"layer": f"{name}.0", "op": f"DSConv k{br.first_kernel}", "channels": br.channels})
        for i, kind in enumerate(br.layers, start=1):
            op = "skip" if kind == "skip" else f"DSConv {kind}"
            layers.append({"layer": f"{name}.{i}", "op": op, "channels": br.channels})
    rep = cost_report(g)
    k7 = sum(1 for c in g.backbone if BACKBONE_CHOICES[c][0] == 7) / len(g.backbone)
    return ArchReport(
        layers=layers,
        cost=Cost(rep["macs"], rep["params"]),
        per_layer_cost=rep["per_layer"],
        k7_fraction=k7,
        output_layer=g.output_layer,
        output_block=last,
        output_position=output_position(g.output_layer),
        cls_depth=g.cls.depth,
        reg_depth=g.reg.depth,
    )
