"""One-shot architecture search for lightweight Siamese trackers."""

from .cost import BUDGET_PRESETS, Budget, Cost, feasible, genome_cost, op_cost, space_extrema
from .space import FULL_SPACE, Genome, Space, decode, describe_space, encode, random_genome, validate

__all__ = [
    "BUDGET_PRESETS", "Budget", "Cost", "FULL_SPACE", "Genome", "Space", "decode", "describe_space",
    "encode", "feasible", "genome_cost", "op_cost", "random_genome", "space_extrema", "validate",
]
__version__ = "0.1.0"
