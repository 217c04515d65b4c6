"""RNS-CKKS parameter selection and an abstract latency model.

Per-op costs follow the usual asymptotics: additions and plaintext
multiplications are linear in ``N`` and in the number of RNS limbs, while
ciphertext multiplication, rotation and rescaling are NTT-bound and grow as
``N log N`` times the square of the limb count.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .ddg import (
    ADD,
    MUL_CIPHER,
    MUL_PLAIN,
    OP_KINDS,
    PLAIN_CONST,
    RESCALE,
    ROTATE,
    SUB,
    Ddg,
    DdgError,
    multiplicative_depth,
    op_histogram,
)

# Largest total modulus (bits) per ring dimension at 128-bit classical
# security for a ternary secret, as tabulated by the HE standardization
# effort; 2^16 and 2^17 extend the table by doubling.
MAX_Q_BITS: dict[int, int] = {
    2048: 54,
    4096: 109,
    8192: 218,
    16384: 438,
    32768: 881,
    65536: 1772,
    131072: 3544,
}

LINEAR_KINDS = frozenset({ADD, SUB, MUL_PLAIN})
NTT_KINDS = frozenset({MUL_CIPHER, ROTATE, RESCALE})


class CapacityError(ValueError):
    """No supported ring dimension can hold the requested modulus."""


@dataclass(frozen=True)
class Calibration:
    k1: float = 1.0
    k2: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "Calibration":
        """``"k1,k2"`` as accepted by the command line."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"calibration must be 'k1,k2', got {text!r}")
        k1, k2 = (float(p) for p in parts)
        if not (k1 > 0 and k2 > 0 and math.isfinite(k1) and math.isfinite(k2)):
            raise ValueError("calibration constants must be positive and finite")
        return cls(k1, k2)


DEFAULT_CALIBRATION = Calibration()


@dataclass(frozen=True)
class CkksParams:
    poly_degree_N: int
    total_q_bits: int
    rescale_budget_r: int
    prime_bits: int

    @property
    def slots(self) -> int:
        return self.poly_degree_N // 2

    def to_dict(self) -> dict:
        return {"N": self.poly_degree_N, "Q": self.total_q_bits, "r": self.rescale_budget_r, "prime_bits": self.prime_bits}


def max_q_bits(n: int, table: dict[int, int] | None = None) -> int:
    table = MAX_Q_BITS if table is None else table
    try:
        return table[n]
    except KeyError:
        raise ValueError(f"unsupported ring dimension N={n}; expected one of {sorted(table)}") from None


def select_params(
    r: int,
    prime_bits: int = 60,
    min_slots: int = 0,
    table: dict[int, int] | None = None,
) -> CkksParams:
    """Smallest ring dimension whose modulus budget fits ``r`` primes.

    ``min_slots`` optionally forces ``N/2`` to cover the packed tensor.
    """
    if r < 0:
        raise ValueError(f"rescale count must be non-negative, got {r}")
    table = MAX_Q_BITS if table is None else table
    q = prime_bits * r
    for n in sorted(table):
        if table[n] >= q and n // 2 >= min_slots:
            return CkksParams(n, q, r, prime_bits)
    raise CapacityError(f"Q={q} bits (r={r}) exceeds every supported ring dimension")


def op_cost(kind: str, level: int, n: int, calib: Calibration = DEFAULT_CALIBRATION) -> float:
    """Abstract cost of one op on a ciphertext with ``level`` RNS limbs."""
    if kind == PLAIN_CONST:
        return 0.0
    if kind in LINEAR_KINDS:
        return calib.k1 * n * level
    if kind in NTT_KINDS:
        return calib.k2 * n * math.log2(n) * level * level
    return 0.0


@dataclass
class CostReport:
    params: CkksParams
    depth: int
    rescales: int
    histogram: dict[tuple[str, int], int]
    cost_units: float
    per_layer_breakdown: list[tuple[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "depth": self.depth,
            "rescales": self.rescales,
            "cost_units": self.cost_units,
            "histogram": [
                {"kind": k, "level": lvl, "count": c}
                for (k, lvl), c in sorted(self.histogram.items(), key=lambda kv: (kv[0][0], -kv[0][1]))
            ],
            "per_layer": [{"layer": name, "cost": cost} for name, cost in self.per_layer_breakdown],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def estimate_cost(
    graph: Ddg,
    calib: Calibration = DEFAULT_CALIBRATION,
    table: dict[int, int] | None = None,
) -> CostReport:
    """Parameters and summed op costs for a rescaled, leveled graph.

    Levels count the rescales a ciphertext can still absorb, so a value at
    level ``l`` carries ``l + 1`` limbs (the last prime is never dropped);
    each op is charged at that limb count.
    """
    if not graph.is_leveled:
        raise DdgError("graph must be leveled before costing (run insert_rescales)")
    report = multiplicative_depth(graph)
    params = select_params(report.rescale_count_r, graph.prime_bits, min_slots=graph.slots, table=table)
    n = params.poly_degree_N
    hist = op_histogram(graph)
    total = math.fsum(op_cost(k, lvl + 1, n, calib) * c for (k, lvl), c in hist.items())

    per_layer: dict[int, float] = defaultdict(float)
    for node in graph.nodes:
        if node.kind in OP_KINDS:
            per_layer[node.layer] += op_cost(node.kind, node.level + 1, n, calib)
    names = graph.layer_names
    breakdown = [
        (names[i] if 0 <= i < len(names) else f"layer{i}", cost)
        for i, cost in sorted(per_layer.items())
    ]
    return CostReport(
        params=params,
        depth=report.multiplicative_depth,
        rescales=report.rescale_count_r,
        histogram=dict(hist),
        cost_units=total,
        per_layer_breakdown=breakdown,
    )
