import json
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from ckksnet.network_ir import (
    BUNDLED,
    IDENTITY_BN,
    LayerSpec,
    ModuleIndexError,
    NetworkParseError,
    SchemaError,
    bundled_network,
    fold_batchnorm,
    lowered_layer_count,
    network_from_dict,
    parse_network,
    replace_module,
    replaced_labels,
    serialize_network,
    validate_network,
)

from helpers import random_micro_network

ACT = ["0.125", "0.5", "0.25"]


def doc(layers, shape=(3, 32, 32)):
    return {"name": "t", "input_shape": list(shape), "layers": layers}


def fire(i, c, e1, e3, out=None, **kw):
    return {"kind": "FireModule", "in_channels": i, "out_channels": e1 + e3 if out is None else out,
            "fire_squeeze": c, "fire_expand1": e1, "fire_expand3": e3, **kw}


class TestParse:
    def test_three_layer_document(self):
        text = json.dumps(doc([
            {"kind": "Conv2D", "in_channels": 3, "out_channels": 64, "kernel": 3},
            {"kind": "PolyActivation", "act_coeffs": ACT},
            {"kind": "AvgPool", "kernel": 2},
        ]))
        spec = parse_network(text)
        assert len(spec.layers) == 3
        assert spec.input_shape == (3, 32, 32)
        conv, act, pool = spec.layers
        assert conv.stride == 1
        assert act.in_channels == act.out_channels == 64
        assert act.act_coeffs == tuple(ACT)
        assert pool.stride == 2

    def test_malformed_json_reports_position(self):
        with pytest.raises(NetworkParseError, match=r"line 2 column"):
            parse_network('{"name": "x",\n  "layers": [,]}')

    def test_unknown_kind(self):
        with pytest.raises(SchemaError, match="unknown layer kind 'MaxPool'"):
            network_from_dict(doc([{"kind": "MaxPool", "in_channels": 3, "out_channels": 3}]))

    def test_fire_width_mismatch_is_schema_error(self):
        with pytest.raises(SchemaError, match="fire_expand1 \\+ fire_expand3"):
            network_from_dict(doc([fire(3, 16, 64, 64, out=100)]))

    @pytest.mark.parametrize("field,value", [
        ("kernel", "3"), ("kernel", True), ("in_channels", 1.5),
    ])
    def test_mistyped_integers(self, field, value):
        layer = {"kind": "Conv2D", "in_channels": 3, "out_channels": 4, "kernel": 3, field: value}
        with pytest.raises(SchemaError, match=field):
            network_from_dict(doc([layer]))

    def test_missing_top_level_field(self):
        with pytest.raises(SchemaError, match="input_shape"):
            network_from_dict({"name": "x", "layers": []})

    def test_unknown_field(self):
        with pytest.raises(SchemaError, match="unknown field"):
            network_from_dict(doc([{"kind": "Conv2D", "in_channels": 3, "out_channels": 4, "padding": 1}]))

    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_round_trip(self, name):
        spec = bundled_network(name)
        assert parse_network(serialize_network(spec)) == spec

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_generated_round_trip(self, seed):
        spec = random_micro_network(seed)
        assert parse_network(serialize_network(spec)) == spec


class TestValidate:
    def test_bundled_networks_are_valid(self):
        for name in BUNDLED:
            assert validate_network(bundled_network(name)) == []

    def test_channel_mismatch_is_one_violation(self):
        spec = network_from_dict(doc([
            {"kind": "Conv2D", "in_channels": 3, "out_channels": 64, "kernel": 3},
        ]))
        bad = replace(spec, layers=spec.layers + (LayerSpec("Conv2D", 128, 10, kernel=3),))
        problems = validate_network(bad)
        assert len(problems) == 1
        assert "in_channels 128 != 64" in problems[0]

    def test_wide_fire_module_is_valid(self):
        spec = network_from_dict(doc([fire(3, 32, 128, 128)]))
        assert spec.layers[0].out_channels == 256
        assert validate_network(spec) == []

    def test_kernel_larger_than_input(self):
        spec = network_from_dict(doc([{"kind": "Conv2D", "in_channels": 3, "out_channels": 4, "kernel": 5}], (3, 4, 4)))
        assert any("exceeds spatial size" in p for p in validate_network(spec))

    def test_inception_branch_sum(self):
        layer = LayerSpec("InceptionModule", 4, 9, inception_branch_channels=(2, 2, 2, 2), inception_reduce=(1, 1))
        spec = replace(network_from_dict(doc([], (4, 8, 8))), layers=(layer,))
        assert any("inception_branch_channels" in p for p in validate_network(spec))

    def test_literal_f4_width_breaks_channel_chain(self):
        # F4 declared with I=128 while F3 emits 256 channels
        base = bundled_network("squeezenet")
        f3, f4 = (l for l in base.layers if l.label in ("F3", "F4"))
        assert (f3.in_channels, f3.out_channels, f4.in_channels) == (64, 256, 256)
        literal = replace(base, layers=tuple(
            replace(l, in_channels=128) if l.label == "F4" else l for l in base.layers))
        problems = validate_network(literal)
        assert len(problems) == 1 and "F4" in problems[0] and "in_channels 128 != 256" in problems[0]


class TestReplaceModule:
    def test_fire_to_conv(self):
        spec = network_from_dict(doc([fire(128, 32, 128, 128)], (128, 16, 16)))
        conv = replace_module(spec, 1).layers[0]
        assert (conv.kind, conv.in_channels, conv.out_channels, conv.kernel) == ("Conv2D", 128, 256, 3)

    def test_bundled_f3_shape(self):
        spec = bundled_network("squeezenet")
        pos = next(p for p in spec.block_indices if spec.layers[p - 1].label == "F3")
        conv = replace_module(spec, pos).layers[pos - 1]
        assert (conv.in_channels, conv.out_channels, conv.kernel) == (64, 256, 3)
        assert conv.label == "C(F3)"

    def test_second_replacement_is_rejected(self):
        spec = bundled_network("squeezenet_desk")
        pos = spec.block_indices[-1]
        once = replace_module(spec, pos)
        with pytest.raises(ModuleIndexError):
            replace_module(once, pos)

    def test_non_module_index(self):
        with pytest.raises(ModuleIndexError):
            replace_module(bundled_network("squeezenet_desk"), 1)

    @pytest.mark.parametrize("name", BUNDLED)
    def test_every_replacement_stays_valid(self, name):
        spec = bundled_network(name)
        for pos in reversed(spec.block_indices):
            spec = replace_module(spec, pos)
            assert validate_network(spec) == []
            assert spec.layers[pos - 1].kind == "Conv2D"
        assert spec.block_indices == ()

    def test_kernel_follows_spatial_shrink(self):
        squeeze_only = network_from_dict(doc([fire(4, 2, 4, 0)], (4, 8, 8)))
        assert replace_module(squeeze_only, 1).layers[0].kernel == 1
        wide = LayerSpec("InceptionModule", 4, 8, inception_branch_channels=(2, 2, 2, 2), inception_reduce=(1, 1))
        spec = replace(squeeze_only, layers=(wide,))
        assert replace_module(spec, 1).layers[0].kernel == 5

    def test_other_layers_untouched(self):
        spec = bundled_network("squeezenet_desk")
        pos = spec.block_indices[1]
        new = replace_module(spec, pos)
        assert all(a == b for i, (a, b) in enumerate(zip(spec.layers, new.layers), 1) if i != pos)
        assert replaced_labels(new) == {spec.layers[pos - 1].label}


class TestFoldBatchnorm:
    @pytest.mark.parametrize("stats,expected", [
        ((1, 0, 0, 1, 0), (1, 0)),
        ((2, 1, 3, 4, 0), (1, -2)),
        ((1, 0, 0, 0, "0.0001"), (100, 0)),
    ])
    def test_examples(self, stats, expected):
        bn = fold_batchnorm(*stats)
        assert (bn.d, bn.e) == tuple(Fraction(v) for v in expected)

    def test_identity(self):
        assert fold_batchnorm(1, 0, 0, 1, 0) == IDENTITY_BN

    @pytest.mark.parametrize("var,eps", [(0, 0), (-1, "0.5")])
    def test_non_positive_variance(self, var, eps):
        with pytest.raises(ValueError):
            fold_batchnorm(1, 0, 0, var, eps)

    @settings(max_examples=100, deadline=None)
    @given(
        st.fractions(-4, 4, max_denominator=64),
        st.fractions(-4, 4, max_denominator=64),
        st.fractions(-4, 4, max_denominator=64),
        st.fractions(Fraction(1, 64), 16, max_denominator=64),
    )
    def test_affine_identity(self, gamma, beta, mu, var):
        # d*y + e == gamma*(y - mu)/sqrt(var) + beta for any y
        bn = fold_batchnorm(gamma, beta, mu, var, 0)
        for y in (Fraction(0), Fraction(3, 2), mu):
            lhs = float(bn.d * y + bn.e)
            rhs = float(gamma) * float(y - mu) / float(var) ** 0.5 + float(beta)
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_bundled_squeezenet_lowered_layers():
    assert lowered_layer_count(bundled_network("squeezenet")) == 13
    assert lowered_layer_count(bundled_network("squeezenet_desk")) == 13


def test_block_indices_point_at_modules():
    for name in BUNDLED:
        spec = bundled_network(name)
        assert spec.block_indices
        assert all(spec.layers[p - 1].is_module for p in spec.block_indices)
