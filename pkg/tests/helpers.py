"""Shared builders for the test suite."""

from __future__ import annotations

from decimal import Decimal, localcontext
from fractions import Fraction

import numpy as np

from ckksnet.ddg import Builder, Ddg
from ckksnet.lowering import CiphertextLayout, QuantConfig, lower_conv
from ckksnet.network_ir import LayerSpec, NetworkSpec, network_from_dict, replaced_labels

# 30-bit inputs and filters with 30-bit primes: every product lands on the
# waterline, so each multiplication must be followed by a rescale
WATERLINE_CFG = QuantConfig(input_scale_bits=30, weight_scale_bits=30, coeff_scale_bits=10, prime_bits=30)


def micro_conv_graph(filt=None, cfg: QuantConfig = WATERLINE_CFG) -> Ddg:
    """2x2 filter over one 3x3 channel, masked to the 2x2 valid corner."""
    b = Builder(prime_bits=cfg.prime_bits, input_scale_bits=cfg.input_scale_bits, slots=9)
    x = b.cipher_input("in0", cfg.input_scale_bits)
    layout = CiphertextLayout.dense(1, 3, 3)
    weights = None if filt is None else np.asarray(filt, dtype=float).reshape(1, 1, 2, 2)
    frag = lower_conv(b, [x], layout, LayerSpec("Conv2D", 1, 1, kernel=2), weights, cfg)
    b.output(frag.outputs[0], "out0")
    return b.build(output_slots={"out0": frag.layout.valid_slots})


def dec(x: Fraction) -> str:
    """Exact decimal string of a dyadic rational."""
    x = Fraction(x)
    with localcontext() as ctx:
        ctx.prec = 80
        return format(Decimal(x.numerator) / Decimal(x.denominator), "f")


def grid(rng: np.random.Generator, bound: float, bits: int) -> Fraction:
    k = int(bound * (1 << bits))
    return Fraction(int(rng.integers(-k, k + 1)), 1 << bits)


def random_act(rng) -> list[str]:
    # coefficients on a 2^-5 grid keep every merged product on the 2^-10 grid
    return [dec(grid(rng, 0.25, 5)), dec(grid(rng, 1.0, 5)), dec(grid(rng, 0.5, 5))]


def random_bn(rng) -> list[str]:
    """BatchNorm stats whose folded (d, e) are exact 2^-5 grid values."""
    d = grid(rng, 2.0, 5)
    e = grid(rng, 0.5, 5)
    s = Fraction(int(rng.choice([1, 2, 4])), int(rng.choice([1, 2])))
    eps = Fraction(1, 1024)
    mu = grid(rng, 0.5, 5)
    gamma = d * s
    beta = e + d * mu
    return [dec(gamma), dec(beta), dec(mu), dec(s * s - eps), dec(eps)]


def conv_block_network(rng, size: int = 8, channels: int = 4) -> NetworkSpec:
    k = int(rng.integers(2, 4))
    # stride 2 must tile the input exactly
    stride = int(rng.integers(1, 3)) if (size - k) % 2 == 0 else 1
    layers = [
        {"kind": "Conv2D", "in_channels": channels, "out_channels": channels, "kernel": k, "stride": stride},
        {"kind": "PolyActivation", "act_coeffs": random_act(rng)},
        {"kind": "BatchNorm", "bn_stats": random_bn(rng)},
    ]
    return network_from_dict({"name": "block", "input_shape": [channels, size, size], "layers": layers})


def random_micro_network(seed: int, max_blocks: int = 3, size: int = 8, max_channels: int = 4) -> NetworkSpec:
    """At most ``max_blocks`` conv/fire/inception blocks (plus pools and an
    optional dense head) on an ``size x size`` input."""
    rng = np.random.default_rng(seed)
    c = c0 = int(rng.integers(1, max_channels + 1))
    h = size
    layers: list[dict] = []
    blocks = int(rng.integers(1, max_blocks + 1))

    def tail():
        if rng.random() < 0.8:
            layers.append({"kind": "PolyActivation", "act_coeffs": random_act(rng)})
        if rng.random() < 0.5:
            layers.append({"kind": "BatchNorm", "bn_stats": random_bn(rng)})

    for _ in range(blocks):
        o = int(rng.integers(1, max_channels + 1))
        choice = rng.choice(["conv", "fire", "inception"]) if h >= 5 else "conv"
        if choice == "conv":
            k = int(rng.integers(1, min(3, h) + 1))
            layers.append({"kind": "Conv2D", "in_channels": c, "out_channels": o, "kernel": k})
            h = h - k + 1
        elif choice == "fire":
            e1 = int(rng.integers(0, o + 1))
            inner = random_act(rng) if rng.random() < 0.5 else None
            fire = {"kind": "FireModule", "in_channels": c, "out_channels": o,
                    "fire_squeeze": int(rng.integers(1, max_channels + 1)),
                    "fire_expand1": e1, "fire_expand3": o - e1}
            if inner:
                fire["inner_act_coeffs"] = inner
            layers.append(fire)
            h = h - 2 if o - e1 else h
        else:
            o = max(o, 4)
            parts = [o // 4, o // 4, o // 4, o - 3 * (o // 4)]
            layers.append({"kind": "InceptionModule", "in_channels": c, "out_channels": o,
                           "inception_branch_channels": parts, "inception_reduce": [1, 1]})
            h = h - 4 if parts[2] else h - 2
        c = o
        tail()
        if h >= 4 and h % 2 == 0 and rng.random() < 0.4:
            layers.append({"kind": "AvgPool", "kernel": 2, "stride": 2})
            h //= 2
    if rng.random() < 0.5:
        layers.append({"kind": "Dense", "in_channels": c, "out_channels": int(rng.integers(1, 4))})
    return network_from_dict({"name": f"micro{seed}", "input_shape": [c0, size, size],
                              "layers": layers})


# --------------------------------------------------------------------------
# stub cost oracles keyed by the set of replaced module labels

SQUEEZE_COSTS = {
    frozenset(): 72.7,
    frozenset({"F4"}): 43.8,
    frozenset({"F3", "F4"}): 37.5,
    frozenset({"F2", "F3", "F4"}): 50.2,
}
F1_PENALTY = 1.32


def squeeze_stub(spec: NetworkSpec) -> float:
    done = replaced_labels(spec)
    if done in SQUEEZE_COSTS:
        return SQUEEZE_COSTS[done]
    if "F1" in done:
        return squeeze_stub(_unreplace(spec, "F1")) * F1_PENALTY
    raise KeyError(f"no stub cost for {sorted(done)}")


INCEPTION_COSTS = {
    frozenset(): 213.2,
    frozenset({"I9"}): 173.5,
    # not reported; any value strictly between the I9 and I789 rows works
    frozenset({"I8", "I9"}): 153.15,
    frozenset({"I7", "I8", "I9"}): 132.8,
    frozenset({"I6", "I7", "I8", "I9"}): 193.6,
}


def inception_stub(spec: NetworkSpec) -> float:
    done = replaced_labels(spec)
    if done in INCEPTION_COSTS:
        return INCEPTION_COSTS[done]
    core = frozenset({"I7", "I8", "I9"})
    if core <= done:
        return INCEPTION_COSTS[core] * F1_PENALTY ** (len(done) - len(core))
    raise KeyError(f"no stub cost for {sorted(done)}")


def _unreplace(spec: NetworkSpec, label: str) -> NetworkSpec:
    """The network with the conv named ``C(label)`` marked as original again."""
    from dataclasses import replace

    layers = tuple(replace(l, name=label) if l.name == f"C({label})" else l for l in spec.layers)
    return replace(spec, layers=layers)


def replace_labels(spec: NetworkSpec, labels) -> NetworkSpec:
    from ckksnet.network_ir import replace_module

    for pos in sorted((p for p in spec.block_indices if spec.layers[p - 1].label in set(labels)), reverse=True):
        spec = replace_module(spec, pos)
    return spec
