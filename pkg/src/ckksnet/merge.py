"""Coefficient merging for conv -> activation -> batch-norm tails.

``d*(a*(m*X)^2 + b*(m*X) + c) + e`` is rewritten as ``a'*X^2 + b'*X + c'`` with
``a' = d*a*m^2``, ``b' = d*b*m`` and ``c' = d*c + e``, which removes the mask
multiply and the batch-norm multiply from the critical path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

from .ddg import Builder, Ddg, renumber


@dataclass(frozen=True)
class MergedCoeffs:
    a_prime: tuple[Fraction, ...]
    b_prime: tuple[Fraction, ...]
    c_prime: tuple[Fraction, ...]


def compute_merged_coeffs(
    m: Sequence,
    a,
    b,
    c,
    d=1,
    e=0,
) -> MergedCoeffs:
    """Slotwise merged coefficients in exact rational arithmetic.

    ``a``, ``b``, ``c`` may be scalars or slot vectors aligned with the mask
    ``m``; pass ``d=1, e=0`` when no batch norm follows the activation.
    """
    n = len(m)

    def vec(x):
        if isinstance(x, (list, tuple)):
            if len(x) != n:
                raise ValueError(f"coefficient vector length {len(x)} != mask length {n}")
            return [Fraction(v) for v in x]
        return [Fraction(x)] * n

    m_, a_, b_, c_, d_, e_ = (vec(v) for v in (m, a, b, c, d, e))
    return MergedCoeffs(
        a_prime=tuple(di * ai * mi * mi for di, ai, mi in zip(d_, a_, m_)),
        b_prime=tuple(di * bi * mi for di, bi, mi in zip(d_, b_, m_)),
        c_prime=tuple(di * ci + ei for di, ci, ei in zip(d_, c_, e_)),
    )


def _merged_value(b: Builder, graph: Ddg, mask_key, coeff: Fraction, kind: str, d: Fraction):
    """Scalar when no mask is involved, else a shared slot vector."""
    if mask_key is None:
        return d * coeff
    key = f"merged_{kind}:{mask_key}:{d}:{coeff}"
    if key not in b.vectors:
        m = graph.vectors[mask_key]
        power = 2 if kind == "a" else 1
        b.vector(key, tuple(d * coeff * Fraction(v) ** power for v in m))
    return key


def merge_coefficients(graph: Ddg, coeff_scale_bits: int = 10) -> Ddg:
    """Rewrite every unmerged block tail recorded by lowering.

    Graphs without tails (or already merged) come back unchanged. The merged
    coefficients are exact rationals; they are quantized once, to
    ``coeff_scale_bits``, when the graph is evaluated.
    """
    pending = {t: info for t, info in graph.tails.items() if not info["merged"]}
    if not pending:
        return graph
    by_out = {info["out"]: (t, info) for t, info in pending.items()}
    interior = {n.id for n in graph.nodes if n.tag in pending}
    # the raw conv sum feeding a tail is never part of it
    interior -= {info["x"] for info in pending.values()}

    b = Builder(
        prime_bits=graph.prime_bits,
        input_scale_bits=graph.input_scale_bits,
        slots=graph.slots,
        vectors=graph.vectors,
    )
    mapped: dict[int, int] = {}
    tails: dict[int, dict] = {}
    for t, info in graph.tails.items():
        if t not in pending:
            tails[t] = dict(info)

    for node in graph.nodes:
        if node.id in by_out:
            t, info = by_out[node.id]
            x = mapped[info["x"]]
            b.layer, b.tag = node.layer, t
            a, bb, c = info["act"] if info["act"] is not None else (Fraction(0), Fraction(1), Fraction(0))
            d, e = info["bn"] if info["bn"] is not None else (Fraction(1), Fraction(0))
            mask = info["mask"]
            terms = []
            if a != 0:
                sq = b.mul_cipher(x, x, role="square")
                terms.append(b.mul_plain(sq, _merged_value(b, graph, mask, a, "a", d), coeff_scale_bits, role="merged_a"))
            if bb != 0:
                terms.append(b.mul_plain(x, _merged_value(b, graph, mask, bb, "b", d), coeff_scale_bits, role="merged_b"))
            c_prime = d * c + e
            if terms:
                z = b.sum(terms)
                if c_prime != 0:
                    z = b.add_const(z, c_prime, role="merged_c")
            else:
                z = b.add_const(b.sub(x, x, role="zero"), c_prime, role="merged_c")
            mapped[node.id] = z
            tails[t] = dict(info, x=x, out=z, merged=True)
            b.tag = -1
            continue
        if node.id in interior:
            continue
        ops = tuple(mapped[o] for o in node.operands)
        nid = len(b.nodes)
        b.nodes.append(replace(node, id=nid, operands=ops))
        mapped[node.id] = nid

    out = graph.derived(
        b.nodes,
        [mapped[o] for o in graph.outputs],
        vectors=b.vectors,
        tails=tails,
    )
    return renumber(out)


def merged_tail_count(graph: Ddg) -> int:
    return sum(1 for info in graph.tails.values() if info["merged"])
