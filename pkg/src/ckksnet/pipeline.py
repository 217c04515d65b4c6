"""End-to-end compilation: lower, optionally merge, rescale, cost."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

from .cost import DEFAULT_CALIBRATION, Calibration, CostReport, estimate_cost
from .ddg import Ddg, insert_rescales
from .lowering import QuantConfig, lower_network
from .merge import merge_coefficients
from .network_ir import NetworkSpec
from .shadow import DEFAULT_TOL_REL


@dataclass(frozen=True)
class PipelineConfig:
    merge_enabled: bool = True
    # size in bits of every rescaling prime
    waterline_bits: int = 60
    input_scale_bits: int = 25
    weight_scale_bits: int = 15
    coeff_scale_bits: int = 10
    calibration: Calibration = DEFAULT_CALIBRATION
    seed: int = 0
    tol_rel: float = DEFAULT_TOL_REL

    def __post_init__(self):
        for name in ("waterline_bits", "input_scale_bits", "weight_scale_bits", "coeff_scale_bits"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.tol_rel < 0:
            raise ValueError("tol_rel must be non-negative")

    @property
    def quant(self) -> QuantConfig:
        return QuantConfig(
            input_scale_bits=self.input_scale_bits,
            weight_scale_bits=self.weight_scale_bits,
            coeff_scale_bits=self.coeff_scale_bits,
            prime_bits=self.waterline_bits,
        )

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["calibration"] = {"k1": self.calibration.k1, "k2": self.calibration.k2}
        return doc


@dataclass
class CompileResult:
    graph: Ddg
    report: CostReport
    config: PipelineConfig = field(default_factory=PipelineConfig)


def compile_graph(spec: NetworkSpec, config: PipelineConfig = PipelineConfig(), weights=None) -> Ddg:
    """Rescaled, leveled DDG for ``spec``."""
    graph = lower_network(spec, weights, config.quant)
    if config.merge_enabled:
        graph = merge_coefficients(graph, config.coeff_scale_bits)
    return insert_rescales(graph, config.waterline_bits)


def compile_network(spec: NetworkSpec, config: PipelineConfig = PipelineConfig(), weights=None) -> CompileResult:
    graph = compile_graph(spec, config, weights)
    return CompileResult(graph, estimate_cost(graph, config.calibration), config)
