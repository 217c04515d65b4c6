"""Greedy last-to-first replacement of mobile modules by plain convolutions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .network_ir import NetworkSpec, network_to_dict, replace_module
from .pipeline import PipelineConfig, compile_network

Oracle = Callable[[NetworkSpec], float]


class CandidateError(RuntimeError):
    """Compiling or costing one candidate failed; ``spec`` is the culprit."""

    def __init__(self, spec: NetworkSpec, cause: Exception):
        super().__init__(f"candidate {spec.name!r} failed: {cause}")
        self.spec = spec
        self.cause = cause


class SearchAborted(RuntimeError):
    """The oracle raised mid-search; ``trace`` holds the steps completed so far."""

    def __init__(self, trace: "SearchTrace", cause: Exception):
        super().__init__(f"search aborted after {len(trace.steps)} steps: {cause}")
        self.trace = trace
        self.cause = cause


@dataclass(frozen=True)
class SearchStep:
    module: int  # 1-based module number, n = last
    block_index: int  # 1-based layer position
    label: str
    cost_keep: float
    cost_replace: float
    accepted: bool

    def to_dict(self) -> dict:
        return {
            "module": self.module,
            "block_index": self.block_index,
            "label": self.label,
            "cost_keep": self.cost_keep,
            "cost_replace": self.cost_replace,
            "accepted": self.accepted,
        }


@dataclass
class SearchTrace:
    steps: list[SearchStep] = field(default_factory=list)
    initial_cost: float = 0.0
    final_cost: float = 0.0
    final_spec: NetworkSpec | None = None
    evaluations: int = 0

    @property
    def accepted(self) -> list[str]:
        return [s.label for s in self.steps if s.accepted]

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "accepted": self.accepted,
            "evaluations": self.evaluations,
            "final_spec": None if self.final_spec is None else network_to_dict(self.final_spec),
        }


def compile_run(spec: NetworkSpec, config: PipelineConfig = PipelineConfig()) -> float:
    """Estimated cost of ``spec`` through the full pipeline."""
    try:
        return compile_network(spec, config).report.cost_units
    except Exception as exc:  # attach the candidate for the caller
        raise CandidateError(spec, exc) from exc


def greedy_search(
    spec: NetworkSpec,
    oracle: Oracle | None = None,
    *,
    config: PipelineConfig = PipelineConfig(),
    literal: bool = False,
) -> tuple[NetworkSpec, SearchTrace]:
    """Visit modules from last to first, keeping each replacement that is
    strictly cheaper than the current network.

    The current network's cost is carried over between steps; ``literal``
    re-evaluates it at every step instead, which only changes the number of
    oracle calls.
    """
    if oracle is None:
        def oracle(s: NetworkSpec) -> float:
            return compile_run(s, config)

    trace = SearchTrace(final_spec=spec)

    def cost(s: NetworkSpec) -> float:
        trace.evaluations += 1
        return oracle(s)

    try:
        current = spec
        cost_current = trace.initial_cost = trace.final_cost = cost(current)
        blocks = spec.block_indices
        for module in range(len(blocks), 0, -1):
            pos = blocks[module - 1]
            label = spec.layers[pos - 1].label
            candidate = replace_module(current, pos)
            if literal and module != len(blocks):
                cost_current = cost(current)
            cost_replace = cost(candidate)
            accepted = cost_replace < cost_current
            trace.steps.append(SearchStep(module, pos, label, cost_current, cost_replace, accepted))
            if accepted:
                current, cost_current = candidate, cost_replace
            trace.final_spec, trace.final_cost = current, cost_current
    except Exception as exc:
        raise SearchAborted(trace, exc) from exc
    return current, trace
