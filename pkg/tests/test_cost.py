import json
import math
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from ckksnet.cost import (
    MAX_Q_BITS,
    CapacityError,
    Calibration,
    estimate_cost,
    max_q_bits,
    op_cost,
    select_params,
)
from ckksnet.ddg import DdgError, OP_KINDS, insert_rescales
from ckksnet.lowering import lower_network
from ckksnet.network_ir import network_from_dict

from helpers import WATERLINE_CFG, micro_conv_graph


class TestMaxQ:
    @pytest.mark.parametrize("n,bits", [(32768, 881), (65536, 1772), (131072, 3544)])
    def test_table(self, n, bits):
        assert max_q_bits(n) == bits

    def test_consistency_with_reported_rows(self):
        assert max_q_bits(32768) < 1020 <= max_q_bits(65536)
        assert 1740 <= max_q_bits(65536)
        assert max_q_bits(131072) >= 2340

    def test_unsupported(self):
        with pytest.raises(ValueError, match="unsupported"):
            max_q_bits(3000)


class TestSelectParams:
    @pytest.mark.parametrize("r,n,q", [
        (17, 65536, 1020),
        (12, 32768, 720),
        (33, 131072, 1980),
        (36, 131072, 2160),
        (29, 65536, 1740),
        (39, 131072, 2340),
    ])
    def test_reported_rows(self, r, n, q):
        p = select_params(r, 60)
        assert (p.poly_degree_N, p.total_q_bits, p.rescale_budget_r) == (n, q, r)

    def test_q_is_r_primes(self):
        # rows quoted with Q != 60 r are not reproduced
        assert select_params(15).total_q_bits == 900
        assert select_params(14).total_q_bits == 840

    def test_capacity(self):
        with pytest.raises(CapacityError):
            select_params(60, 60)

    def test_negative_r(self):
        with pytest.raises(ValueError):
            select_params(-1)

    def test_min_slots(self):
        assert select_params(1, 30, min_slots=4096).poly_degree_N == 8192

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 59), st.sampled_from([30, 40, 50, 60]))
    def test_smallest_fitting_ring(self, r, prime):
        q = r * prime
        fits = [n for n in sorted(MAX_Q_BITS) if MAX_Q_BITS[n] >= q]
        if not fits:
            with pytest.raises(CapacityError):
                select_params(r, prime)
            return
        assert select_params(r, prime).poly_degree_N == fits[0]


class TestOpCost:
    @pytest.mark.parametrize("r", [2, 3, 12, 17, 33])
    def test_level_ratios(self, r):
        n = 65536
        for kind in ("Add", "Sub", "MulPlain"):
            assert Fraction(op_cost(kind, r, n)) / Fraction(op_cost(kind, r - 1, n)) == Fraction(r, r - 1)
        for kind in ("MulCipher", "Rotate", "Rescale"):
            assert Fraction(op_cost(kind, r, n)) / Fraction(op_cost(kind, r - 1, n)) == Fraction(r * r, (r - 1) ** 2)

    def test_plain_const_is_free(self):
        assert op_cost("PlainConst", 0, 4096) == 0
        assert op_cost("PlainConst", 9, 4096) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.sampled_from(OP_KINDS), st.integers(1, 40), st.sampled_from(sorted(MAX_Q_BITS)[:-1]))
    def test_monotone(self, kind, level, n):
        assert op_cost(kind, level + 1, n) > op_cost(kind, level, n)
        assert op_cost(kind, level, 2 * n) > op_cost(kind, level, n)

    def test_calibration_scales(self):
        c = Calibration(2.0, 3.0)
        assert op_cost("Add", 4, 4096, c) == 2 * op_cost("Add", 4, 4096)
        assert op_cost("Rotate", 4, 4096, c) == 3 * op_cost("Rotate", 4, 4096)

    @pytest.mark.parametrize("text", ["1", "0,1", "-1,2", "nan,1", "a,b"])
    def test_calibration_parse_rejects(self, text):
        with pytest.raises(ValueError):
            Calibration.parse(text)

    def test_calibration_parse(self):
        assert Calibration.parse("0.5, 2") == Calibration(0.5, 2.0)


def hand_cost(graph, n, k1=1.0, k2=1.0):
    """Sum of per-node costs; a node at level l carries l + 1 limbs."""
    total = 0.0
    for node in graph.nodes:
        limbs = node.level + 1
        if node.kind in ("Add", "Sub", "MulPlain"):
            total += k1 * n * limbs
        elif node.kind in ("MulCipher", "Rotate", "Rescale"):
            total += k2 * n * math.log2(n) * limbs ** 2
    return total


class TestEstimateCost:
    def test_fig3_micro_conv(self):
        g = insert_rescales(micro_conv_graph(cfg=WATERLINE_CFG))
        report = estimate_cost(g)
        assert (report.depth, report.rescales) == (2, 2)
        # Q = 60 bits does not fit 2048 (54) so 4096 is the smallest ring
        assert report.params.poly_degree_N == 4096
        assert sum(report.histogram.values()) == 13
        assert report.cost_units == pytest.approx(hand_cost(g, 4096), rel=1e-15)

    def test_lowering_every_level_is_cheaper(self):
        g = insert_rescales(micro_conv_graph(cfg=WATERLINE_CFG))
        lower = replace(g, nodes=[replace(n, level=n.level - 1) for n in g.nodes])
        assert estimate_cost(lower).cost_units < estimate_cost(g).cost_units

    def test_unleveled(self):
        with pytest.raises(DdgError):
            estimate_cost(micro_conv_graph())

    def test_capacity_propagates(self):
        g = insert_rescales(micro_conv_graph(cfg=WATERLINE_CFG))
        with pytest.raises(CapacityError):
            estimate_cost(g, table={2048: 54})

    def test_per_layer_sums_to_total(self):
        spec = network_from_dict({"name": "n", "input_shape": [2, 6, 6], "layers": [
            {"kind": "Conv2D", "in_channels": 2, "out_channels": 2, "kernel": 3, "name": "C1"},
            {"kind": "PolyActivation", "act_coeffs": ["0.125", "0.5", "0.25"]},
            {"kind": "AvgPool", "kernel": 2, "name": "P1"},
        ]})
        report = estimate_cost(insert_rescales(lower_network(spec)))
        assert math.fsum(c for _, c in report.per_layer_breakdown) == pytest.approx(report.cost_units, rel=1e-12)
        assert [name for name, _ in report.per_layer_breakdown][0] == "C1"

    def test_report_json(self):
        report = estimate_cost(insert_rescales(micro_conv_graph(cfg=WATERLINE_CFG)))
        doc = json.loads(report.to_json())
        assert doc["params"] == {"N": 4096, "Q": 60, "r": 2, "prime_bits": 30}
        assert sum(h["count"] for h in doc["histogram"]) == 13
