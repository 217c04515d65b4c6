"""Compile neural networks to leveled CKKS dataflow graphs, estimate their
cost, shorten them by coefficient merging, and search for cheaper module
choices."""

from .cost import CkksParams, CostReport, estimate_cost, max_q_bits, op_cost, select_params
from .ddg import Ddg, DdgNode, insert_rescales, multiplicative_depth, validate_ddg
from .lowering import QuantConfig, lower_network
from .merge import compute_merged_coeffs, merge_coefficients
from .network_ir import LayerSpec, NetworkSpec, bundled_network, parse_network, replace_module
from .pipeline import PipelineConfig, compile_network
from .search import SearchTrace, compile_run, greedy_search
from .shadow import compare_outputs, eval_ddg, eval_reference

__version__ = "0.1.0"

__all__ = [
    "CkksParams",
    "CostReport",
    "Ddg",
    "DdgNode",
    "LayerSpec",
    "NetworkSpec",
    "PipelineConfig",
    "QuantConfig",
    "SearchTrace",
    "bundled_network",
    "compare_outputs",
    "compile_network",
    "compile_run",
    "compute_merged_coeffs",
    "estimate_cost",
    "eval_ddg",
    "eval_reference",
    "greedy_search",
    "insert_rescales",
    "lower_network",
    "max_q_bits",
    "merge_coefficients",
    "multiplicative_depth",
    "op_cost",
    "parse_network",
    "replace_module",
    "select_params",
    "validate_ddg",
]
