"""Kernel-size genomes and their decoding into concrete layer layouts.

A genome holds one kernel side per convolutional layer, column after column:
genes ``[0, L)`` configure column 0, ``[L, 2L)`` column 1 and so on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InfeasibleArchitectureError
from .nn import conv_output_side, pool_output_side

KERNEL_CHOICES = (3, 5, 7)
# stride is set by kernel size, not by the layer position
STRIDE_FOR_KERNEL = {3: 2, 5: 2, 7: 1}
POOL_WINDOW = 2
PADDING_MODES = ("same", "valid")


@dataclass(frozen=True)
class NetworkTemplate:
    columns: int = 3
    conv_layers_per_column: int = 3
    channel_plan: tuple = (32, 128, 256)
    fc_width: int = 2048
    input_side: int = 32
    num_classes: int = 10
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "channel_plan", tuple(int(c) for c in self.channel_plan))
        problems = self.problems()
        if problems:
            raise ConfigError("invalid network template: " + "; ".join(problems))

    def problems(self):
        out = []
        if self.columns < 1:
            out.append(f"columns = {self.columns} < 1")
        if self.conv_layers_per_column < 1:
            out.append(f"conv_layers_per_column = {self.conv_layers_per_column} < 1")
        if len(self.channel_plan) != self.conv_layers_per_column:
            out.append(
                f"channel_plan has {len(self.channel_plan)} entries, "
                f"expected {self.conv_layers_per_column}"
            )
        if any(c < 1 for c in self.channel_plan):
            out.append("channel_plan entries must be >= 1")
        if self.fc_width < 1:
            out.append(f"fc_width = {self.fc_width} < 1")
        if self.input_side < 1:
            out.append(f"input_side = {self.input_side} < 1")
        if self.num_classes < 2:
            out.append(f"num_classes = {self.num_classes} < 2")
        if self.padding not in PADDING_MODES:
            out.append(f"padding {self.padding!r} not in {PADDING_MODES}")
        return out

    @property
    def genome_length(self) -> int:
        return self.columns * self.conv_layers_per_column

    def pool_positions(self) -> tuple:
        """Conv layers followed by 2x2 max pooling: the first and the last."""
        return tuple(sorted({0, self.conv_layers_per_column - 1}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


TINY_TEMPLATE = NetworkTemplate(channel_plan=(8, 16, 32), fc_width=64, num_classes=3)


@dataclass(frozen=True)
class Genome:
    genes: tuple

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(int(g) for g in self.genes))

    def __len__(self):
        return len(self.genes)

    def __iter__(self):
        return iter(self.genes)

    def __getitem__(self, i):
        return self.genes[i]

    def __str__(self):
        return ",".join(str(g) for g in self.genes)

    @classmethod
    def parse(cls, text: str) -> "Genome":
        text = text.strip()
        if not text:
            raise ConfigError("empty genome text")
        try:
            return cls(tuple(int(tok) for tok in text.split(",")))
        except ValueError as exc:
            raise ConfigError(f"bad genome text {text!r}") from exc

    @classmethod
    def homogeneous(cls, kernel: int, template: NetworkTemplate) -> "Genome":
        if kernel not in KERNEL_CHOICES:
            raise ConfigError(f"kernel {kernel} not in {set(KERNEL_CHOICES)}")
        return cls((kernel,) * template.genome_length)


def random_genome(template: NetworkTemplate, rng: np.random.Generator) -> Genome:
    """Draw every gene uniformly and independently from {3, 5, 7}."""
    if template.problems():
        raise ConfigError("invalid network template")
    genes = rng.choice(KERNEL_CHOICES, size=template.genome_length)
    return Genome(tuple(genes.tolist()))


def validate(genome: Sequence[int], template: NetworkTemplate) -> list:
    """Return a list of violation messages; an empty list means the genome is valid."""
    genes = list(genome)
    violations = []
    if len(genes) != template.genome_length:
        violations.append(f"length {len(genes)} ≠ {template.genome_length}")
    for i, g in enumerate(genes):
        if g not in KERNEL_CHOICES:
            violations.append(f"gene {i} = {g} not in {{3,5,7}}")
    return violations


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    stride: int
    pad: int
    in_channels: int
    out_channels: int
    in_side: int
    out_side: int
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class PoolLayer:
    in_side: int
    out_side: int
    channels: int
    window: int = POOL_WINDOW
    stride: int = POOL_WINDOW
    kind: str = field(default="pool", init=False)


@dataclass(frozen=True)
class BatchNormLayer:
    channels: int
    side: int
    kind: str = field(default="bn", init=False)


@dataclass(frozen=True)
class ReluLayer:
    channels: int
    side: int
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class ColumnSpec:
    layers: tuple
    fc_in: int
    fc_width: int
    out_channels: int
    out_side: int


@dataclass(frozen=True)
class ArchitectureSpec:
    genome: Genome
    columns: tuple
    concat_width: int
    num_classes: int
    input_side: int

    def kernels(self, column: int) -> tuple:
        return tuple(l.kernel for l in self.columns[column].layers if l.kind == "conv")

    def strides(self, column: int) -> tuple:
        return tuple(l.stride for l in self.columns[column].layers if l.kind == "conv")


def _padding(kernel: int, mode: str) -> int:
    return kernel // 2 if mode == "same" else 0


def decode(genome: Genome | Sequence[int], template: NetworkTemplate) -> ArchitectureSpec:
    """Resolve a genome into per-column layer stacks with every shape inferred.

    Raises InfeasibleArchitectureError when some layer would produce a spatial
    side below 1 (conv) or receive a side below the pooling window.
    """
    genome = genome if isinstance(genome, Genome) else Genome(tuple(genome))
    violations = validate(genome, template)
    if violations:
        raise ConfigError("invalid genome: " + "; ".join(violations))

    L = template.conv_layers_per_column
    pools = set(template.pool_positions())
    columns = []
    for c in range(template.columns):
        side = template.input_side
        channels = 1
        layers = []
        for i, kernel in enumerate(genome.genes[c * L:(c + 1) * L]):
            stride = STRIDE_FOR_KERNEL[kernel]
            pad = _padding(kernel, template.padding)
            out_side = conv_output_side(side, kernel, stride, pad)
            if out_side < 1:
                raise InfeasibleArchitectureError(
                    f"column {c} conv {i} (kernel {kernel}) maps side {side} to {out_side}"
                )
            out_ch = template.channel_plan[i]
            layers.append(ConvLayer(kernel, stride, pad, channels, out_ch, side, out_side))
            side, channels = out_side, out_ch
            if i in pools:
                if side < POOL_WINDOW:
                    raise InfeasibleArchitectureError(
                        f"column {c} pool after conv {i} receives side {side} < {POOL_WINDOW}"
                    )
                out_side = pool_output_side(side)
                layers.append(PoolLayer(side, out_side, channels))
                side = out_side
            layers.append(BatchNormLayer(channels, side))
            layers.append(ReluLayer(channels, side))
        columns.append(
            ColumnSpec(tuple(layers), channels * side * side, template.fc_width, channels, side)
        )
    return ArchitectureSpec(
        genome=genome,
        columns=tuple(columns),
        concat_width=template.columns * template.fc_width,
        num_classes=template.num_classes,
        input_side=template.input_side,
    )


def is_feasible(genome, template: NetworkTemplate) -> bool:
    try:
        decode(genome, template)
    except InfeasibleArchitectureError:
        return False
    return True
