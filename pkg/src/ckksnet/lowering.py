"""Lower a NetworkSpec to an HE dataflow graph under HW batching.

Each channel lives in one ciphertext whose slots hold the ``H x W`` image in
row-major order. Convolutions are valid (unpadded) and anchored at the top
left: output ``(x, y)`` reads input ``(x+i, y+j)``. Pooling and strides do not
re-pack data; they widen the step between live slots instead, and later
layers rotate by correspondingly dilated offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from .ddg import Builder, Ddg
from .network_ir import (
    FoldedBn,
    LayerSpec,
    NetworkSpec,
    fold_batchnorm,
    lowered_layer_count,
    to_fraction,
    validate_network,
)


class LoweringError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    input_scale_bits: int = 25
    weight_scale_bits: int = 15
    coeff_scale_bits: int = 10
    prime_bits: int = 60


@dataclass(frozen=True)
class CiphertextLayout:
    """Where the live values of each channel ciphertext sit.

    The physical grid is ``height x width`` slots. Live values form a
    ``rows x cols`` lattice starting at slot (0, 0) with ``step`` slots between
    neighbours.
    """

    height: int
    width: int
    channels: int
    rows: int
    cols: int
    step: int = 1
    scheme: str = "HW"

    @classmethod
    def dense(cls, channels: int, height: int, width: int) -> "CiphertextLayout":
        return cls(height, width, channels, height, width, 1)

    @property
    def slots(self) -> int:
        return self.height * self.width

    def slot(self, r: int, c: int) -> int:
        return (r * self.step) * self.width + c * self.step

    @property
    def valid_slots(self) -> tuple[int, ...]:
        return tuple(self.slot(r, c) for r in range(self.rows) for c in range(self.cols))

    @property
    def valid_mask(self) -> np.ndarray:
        mask = np.zeros(self.slots, dtype=bool)
        mask[list(self.valid_slots)] = True
        return mask.reshape(self.height, self.width)

    @property
    def all_valid(self) -> bool:
        return self.rows * self.cols == self.slots

    def offset(self, i: int, j: int) -> int:
        return self.slot(i, j)

    def with_(self, **kw) -> "CiphertextLayout":
        fields_ = dict(
            height=self.height, width=self.width, channels=self.channels,
            rows=self.rows, cols=self.cols, step=self.step, scheme=self.scheme,
        )
        fields_.update(kw)
        return CiphertextLayout(**fields_)


@dataclass(frozen=True)
class PlainOperand:
    role: str  # FilterCoeff, Mask, ActCoeff, BnCoeff, MergedCoeff, PoolScalar
    values: tuple
    scale_bits: int

    def __post_init__(self):
        if self.scale_bits <= 0:
            raise ValueError("plaintext scale must be positive")
        if self.role == "Mask" and any(v not in (0, 1) for v in self.values):
            raise ValueError("mask values must be 0 or 1")


@dataclass
class LayerStats:
    rotate_nodes: int = 0
    # aligned (channel, offset) operands, the identity offset included
    rotation_terms: int = 0
    filter_mults: int = 0
    mask_mults: int = 0
    adds: int = 0

    def __iadd__(self, other: "LayerStats") -> "LayerStats":
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


@dataclass
class Fragment:
    outputs: list[int]
    layout: CiphertextLayout
    stats: LayerStats = field(default_factory=LayerStats)


def mask_operand(layout: CiphertextLayout, scale_bits: int) -> PlainOperand:
    flat = layout.valid_mask.reshape(-1)
    return PlainOperand("Mask", tuple(Fraction(int(v)) for v in flat), scale_bits)


def _mask_key(b: Builder, layout: CiphertextLayout, scale_bits: int) -> str:
    key = f"mask:{layout.height}x{layout.width}:{layout.rows}x{layout.cols}/{layout.step}"
    return b.vector(key, mask_operand(layout, scale_bits).values)


def _coeff(x) -> Fraction:
    return to_fraction(x)


def _weight(w, idx) -> Fraction | None:
    if w is None:
        return None
    return Fraction(float(w[idx]))


def _conv_core(
    b: Builder,
    inputs: Sequence[int],
    layout: CiphertextLayout,
    weights,
    out_channels: int,
    kernel: int,
    stride: int,
    cfg: QuantConfig,
) -> Fragment:
    """Unmasked convolution sums; rotations are shared by all output channels."""
    in_channels = len(inputs)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (out_channels, in_channels, kernel, kernel):
            raise LoweringError(
                f"conv weights shape {weights.shape} != {(out_channels, in_channels, kernel, kernel)}"
            )
    if kernel > layout.rows or kernel > layout.cols:
        raise LoweringError(f"kernel {kernel} exceeds live region {layout.rows}x{layout.cols}")
    stats = LayerStats()
    taps = [(i, j) for i in range(kernel) for j in range(kernel)]
    rotated = []
    for x in inputs:
        row = []
        for i, j in taps:
            s = layout.offset(i, j)
            if s:
                row.append(b.rotate(x, s))
                stats.rotate_nodes += 1
            else:
                row.append(x)
            stats.rotation_terms += 1
        rotated.append(row)
    outs = []
    for o in range(out_channels):
        terms = []
        for c in range(in_channels):
            for t, (i, j) in enumerate(taps):
                w = _weight(weights, (o, c, i, j))
                terms.append(b.mul_plain(rotated[c][t], w, cfg.weight_scale_bits, role="filter"))
                stats.filter_mults += 1
        outs.append(b.sum(terms))
        stats.adds += len(terms) - 1
    out_layout = layout.with_(
        channels=out_channels,
        rows=(layout.rows - kernel) // stride + 1,
        cols=(layout.cols - kernel) // stride + 1,
        step=layout.step * stride,
    )
    return Fragment(outs, out_layout, stats)


def _apply_mask(b: Builder, frag: Fragment, layout: CiphertextLayout, cfg: QuantConfig) -> Fragment:
    if layout.all_valid:
        return Fragment(list(frag.outputs), layout, frag.stats)
    key = _mask_key(b, layout, cfg.weight_scale_bits)
    outs = [b.mul_plain(x, key, cfg.weight_scale_bits, role="mask") for x in frag.outputs]
    return Fragment(outs, layout, frag.stats)


def lower_conv(
    b: Builder,
    inputs: Sequence[int],
    layout: CiphertextLayout,
    layer: LayerSpec,
    weights=None,
    cfg: QuantConfig = QuantConfig(),
    mask: bool = True,
) -> Fragment:
    """Lower one Conv2D layer.

    ``sum_c sum_ij rot(A_c, offset(i, j)) * f[o, c, i, j]`` per output channel,
    followed (when ``mask`` is set and some slot is dead) by one mask
    multiplication that zeroes the slots outside the valid output region.
    """
    if layer.kind != "Conv2D":
        raise LoweringError(f"lower_conv expects Conv2D, got {layer.kind}")
    if layout.channels != layer.in_channels or len(inputs) != layer.in_channels:
        raise LoweringError(
            f"conv expects {layer.in_channels} input channels, layout has {layout.channels}"
        )
    frag = _conv_core(b, inputs, layout, weights, layer.out_channels, layer.kernel, layer.stride, cfg)
    if mask and not frag.layout.all_valid:
        frag = _apply_mask(b, frag, frag.layout, cfg)
        frag.stats.mask_mults += len(frag.outputs)
    return frag


@dataclass
class TailSpec:
    act: tuple[Fraction, Fraction, Fraction] | None = None
    bn: FoldedBn | None = None

    @property
    def empty(self) -> bool:
        return self.act is None and self.bn is None


def lower_block_tail(
    b: Builder,
    x: int,
    act: tuple | None,
    bn: FoldedBn | None,
    mask_key: str | None,
    cfg: QuantConfig = QuantConfig(),
    tails: dict | None = None,
) -> int:
    """Emit ``d * (a*(m*X)^2 + b*(m*X) + c) + e`` in unmerged form.

    ``x`` is the raw (unmasked) convolution sum. The nodes are tagged so the
    merge pass can find and rewrite the whole tail.
    """
    tag = len(tails) if tails is not None else -1
    prev_tag, b.tag = b.tag, tag
    a_, b_, c_ = (Fraction(v) for v in act) if act is not None else (None, None, None)
    needs_y = act is None or a_ != 0 or b_ != 0
    y = b.mul_plain(x, mask_key, cfg.weight_scale_bits, role="mask") if mask_key and needs_y else x
    if act is not None:
        terms = []
        if a_ != 0:
            sq = b.mul_cipher(y, y, role="square")
            terms.append(b.mul_plain(sq, a_, cfg.coeff_scale_bits, role="act_a"))
        if b_ != 0:
            terms.append(b.mul_plain(y, b_, cfg.coeff_scale_bits, role="act_b"))
        if terms:
            z = b.sum(terms)
            if c_ != 0:
                z = b.add_const(z, c_, role="act_c")
        else:
            z = b.add_const(b.sub(x, x, role="zero"), c_, role="act_c")
    else:
        z = y
    if bn is not None:
        z = b.mul_plain(z, bn.d, cfg.coeff_scale_bits, role="bn_d")
        if bn.e != 0:
            z = b.add_const(z, bn.e, role="bn_e")
    b.tag = prev_tag
    if tails is not None:
        tails[tag] = {
            "x": x,
            "out": z,
            "mask": mask_key,
            "act": None if act is None else [a_, b_, c_],
            "bn": None if bn is None else [bn.d, bn.e],
            "layer": b.layer,
            "merged": False,
        }
    return z


def lower_pool(
    b: Builder,
    inputs: Sequence[int],
    layout: CiphertextLayout,
    layer: LayerSpec,
    cfg: QuantConfig = QuantConfig(),
) -> Fragment:
    """Average pooling: rotate-accumulate over the window, one 1/k^2 multiply."""
    if layer.kind != "AvgPool":
        raise LoweringError(f"lower_pool expects AvgPool, got {layer.kind}")
    k, s = layer.kernel, layer.stride
    if layout.rows % s or layout.cols % s:
        raise LoweringError(f"pool stride {s} does not divide live region {layout.rows}x{layout.cols}")
    if k > layout.rows or k > layout.cols:
        raise LoweringError(f"pool window {k} exceeds live region {layout.rows}x{layout.cols}")
    stats = LayerStats()
    out_layout = layout.with_(
        rows=(layout.rows - k) // s + 1,
        cols=(layout.cols - k) // s + 1,
        step=layout.step * s,
    )
    if k == 1:
        return Fragment(list(inputs), out_layout, stats)
    outs = []
    offsets = [layout.offset(i, j) for i in range(k) for j in range(k) if (i, j) != (0, 0)]
    for x in inputs:
        terms = [x]
        for off in offsets:
            terms.append(b.rotate(x, off))
            stats.rotate_nodes += 1
        acc = b.sum(terms)
        stats.adds += len(offsets)
        outs.append(b.mul_plain(acc, Fraction(1, k * k), cfg.weight_scale_bits, role="pool"))
    return Fragment(outs, out_layout, stats)


def lower_dense(
    b: Builder,
    inputs: Sequence[int],
    layout: CiphertextLayout,
    layer: LayerSpec,
    weights=None,
    cfg: QuantConfig = QuantConfig(),
) -> Fragment:
    """Per output neuron: slotwise weight products, summed over channels, then
    rotate-accumulated into slot 0."""
    if layer.kind != "Dense":
        raise LoweringError(f"lower_dense expects Dense, got {layer.kind}")
    if len(inputs) != layer.in_channels:
        raise LoweringError(f"dense expects {layer.in_channels} channels, got {len(inputs)}")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        want = (layer.out_channels, layer.in_channels, layout.rows, layout.cols)
        if weights.shape != want:
            raise LoweringError(f"dense weights shape {weights.shape} != {want}")
    stats = LayerStats()
    valid = layout.valid_slots
    outs = []
    for j in range(layer.out_channels):
        terms = []
        for c, x in enumerate(inputs):
            key = None
            if weights is not None:
                vec = [Fraction(0)] * layout.slots
                for (r, q), slot in zip(np.ndindex(layout.rows, layout.cols), valid):
                    vec[slot] = Fraction(float(weights[j, c, r, q]))
                key = b.vector(f"dense:{b.layer}:{j}:{c}", vec)
            terms.append(b.mul_plain(x, key, cfg.weight_scale_bits, role="filter"))
            stats.filter_mults += 1
        t = b.sum(terms)
        acc = [t] + [b.rotate(t, s) for s in valid[1:]]
        stats.rotate_nodes += len(valid) - 1
        stats.rotation_terms += len(valid)
        outs.append(b.sum(acc))
        stats.adds += len(terms) - 1 + len(valid) - 1
    out_layout = layout.with_(channels=layer.out_channels, rows=1, cols=1, step=1)
    return Fragment(outs, out_layout, stats)


def _tail_all(b, xs, tail: TailSpec, layout, cfg, tails) -> list[int]:
    key = None if layout.all_valid else _mask_key(b, layout, cfg.weight_scale_bits)
    return [lower_block_tail(b, x, tail.act, tail.bn, key, cfg, tails) for x in xs]


def _finish(b, frag: Fragment, tail: TailSpec | None, cfg, tails) -> list[int]:
    """Mask the raw outputs of a stage, or hand them to an activation tail."""
    if tail is None or tail.empty:
        return _apply_mask(b, frag, frag.layout, cfg).outputs
    return _tail_all(b, frag.outputs, tail, frag.layout, cfg, tails)


def _w(weights, key):
    return None if weights is None else weights[key]


def _inner_tail(layer: LayerSpec) -> TailSpec | None:
    if layer.inner_act_coeffs is None:
        return None
    return TailSpec(act=tuple(_coeff(v) for v in layer.inner_act_coeffs))


def lower_module(
    b: Builder,
    inputs: Sequence[int],
    layout: CiphertextLayout,
    layer: LayerSpec,
    weights=None,
    cfg: QuantConfig = QuantConfig(),
    tail: TailSpec | None = None,
    tails: dict | None = None,
) -> Fragment:
    """Expand a fire or inception module into stacked convolutions.

    Branch outputs are concatenated by collecting their ciphertexts, which
    costs no HE operation. Branches with a larger live region are cropped by
    their mask to the common (smallest) region.
    """
    if layer.kind not in ("FireModule", "InceptionModule"):
        raise LoweringError(f"lower_module expects a mobile module, got {layer.kind}")
    if len(inputs) != layer.in_channels:
        raise LoweringError(f"module expects {layer.in_channels} channels, got {len(inputs)}")
    stats = LayerStats()
    inner = _inner_tail(layer)
    if layer.kind == "FireModule":
        sq = _conv_core(b, inputs, layout, _w(weights, "squeeze"), layer.fire_squeeze, 1, 1, cfg)
        stats += sq.stats
        mid = _finish(b, sq, inner, cfg, tails)
        if inner is None and not sq.layout.all_valid:
            stats.mask_mults += len(mid)
        branches = []
        if layer.fire_expand1:
            branches.append(_conv_core(b, mid, sq.layout, _w(weights, "expand1"), layer.fire_expand1, 1, 1, cfg))
        if layer.fire_expand3:
            branches.append(_conv_core(b, mid, sq.layout, _w(weights, "expand3"), layer.fire_expand3, 3, 1, cfg))
    else:
        o0, o1, o2, o3 = layer.inception_branch_channels
        r1, r2 = layer.inception_reduce
        branches = []
        if o0:
            branches.append(_conv_core(b, inputs, layout, _w(weights, "b0"), o0, 1, 1, cfg))
        for width, red, k, name in ((o1, r1, 3, "b1"), (o2, r2, 5, "b2")):
            if not width:
                continue
            red_frag = _conv_core(b, inputs, layout, _w(weights, f"{name}_reduce"), red, 1, 1, cfg)
            stats += red_frag.stats
            mid = _finish(b, red_frag, inner, cfg, tails)
            if inner is None and not red_frag.layout.all_valid:
                stats.mask_mults += len(mid)
            branches.append(_conv_core(b, mid, red_frag.layout, _w(weights, name), width, k, 1, cfg))
        if o3:
            pool = lower_pool(b, inputs, layout, LayerSpec("AvgPool", len(inputs), len(inputs), kernel=3, stride=1), cfg)
            stats += pool.stats
            branches.append(_conv_core(b, pool.outputs, pool.layout, _w(weights, "b3"), o3, 1, 1, cfg))
    rows = min(f.layout.rows for f in branches)
    cols = min(f.layout.cols for f in branches)
    out_layout = branches[0].layout.with_(rows=rows, cols=cols, channels=layer.out_channels)
    raw = []
    for f in branches:
        stats += f.stats
        raw.extend(f.outputs)
    frag = Fragment(raw, out_layout, stats)
    if tail is None or tail.empty:
        masked = _apply_mask(b, frag, out_layout, cfg)
        if not out_layout.all_valid:
            stats.mask_mults += len(masked.outputs)
        return masked
    return Fragment(_tail_all(b, raw, tail, out_layout, cfg, tails), out_layout, stats)


# --------------------------------------------------------------------------
# whole networks


@dataclass
class LoweredNetwork:
    graph: Ddg
    layer_stats: list[LayerStats]
    output_layout: CiphertextLayout


def _tail_from(layers: Sequence[LayerSpec], start: int) -> tuple[TailSpec, int]:
    """Collect an activation and/or batch norm following position ``start``."""
    tail = TailSpec()
    pos = start
    if pos < len(layers) and layers[pos].kind == "PolyActivation":
        tail.act = tuple(_coeff(v) for v in layers[pos].act_coeffs)
        pos += 1
    if pos < len(layers) and layers[pos].kind == "BatchNorm":
        tail.bn = fold_batchnorm(*layers[pos].bn_stats)
        pos += 1
    return tail, pos


def lower_network(
    spec: NetworkSpec,
    weights: dict[int, Any] | None = None,
    cfg: QuantConfig = QuantConfig(),
) -> Ddg:
    """Compile ``spec`` to a DDG without rescales."""
    return lower_network_detailed(spec, weights, cfg).graph


def lower_network_detailed(
    spec: NetworkSpec,
    weights: dict[int, Any] | None = None,
    cfg: QuantConfig = QuantConfig(),
) -> LoweredNetwork:
    problems = validate_network(spec)
    if problems:
        raise LoweringError("invalid network: " + "; ".join(problems))
    c, h, w = spec.input_shape
    layout = CiphertextLayout.dense(c, h, w)
    b = Builder(
        prime_bits=cfg.prime_bits,
        input_scale_bits=cfg.input_scale_bits,
        slots=layout.slots,
    )
    tails: dict[int, dict] = {}
    xs = [b.cipher_input(f"in{ch}", cfg.input_scale_bits) for ch in range(c)]
    layers = spec.layers
    stats: list[LayerStats] = [LayerStats() for _ in layers]
    pos = 0
    while pos < len(layers):
        layer = layers[pos]
        b.layer = pos
        lw = None if weights is None else weights.get(pos)
        try:
            if layer.kind in ("Conv2D", "FireModule", "InceptionModule", "Dense"):
                tail, nxt = _tail_from(layers, pos + 1)
                if layer.kind == "Conv2D":
                    frag = _conv_core(b, xs, layout, lw, layer.out_channels, layer.kernel, layer.stride, cfg)
                    stats[pos] = frag.stats
                    if layout.channels != layer.in_channels:
                        raise LoweringError("channel mismatch")
                    b.layer = pos + 1 if not tail.empty else pos
                    xs = _finish(b, frag, tail, cfg, tails)
                    if tail.empty and not frag.layout.all_valid:
                        stats[pos].mask_mults += len(xs)
                    layout = frag.layout
                elif layer.kind == "Dense":
                    frag = lower_dense(b, xs, layout, layer, lw, cfg)
                    stats[pos] = frag.stats
                    layout = frag.layout
                    xs = frag.outputs
                    if not tail.empty:
                        b.layer = pos + 1
                        xs = _tail_all(b, xs, tail, layout, cfg, tails)
                else:
                    frag = lower_module(b, xs, layout, layer, lw, cfg, tail, tails)
                    stats[pos] = frag.stats
                    layout = frag.layout
                    xs = frag.outputs
                pos = nxt
            elif layer.kind in ("PolyActivation", "BatchNorm"):
                tail, nxt = _tail_from(layers, pos)
                xs = [lower_block_tail(b, x, tail.act, tail.bn, None, cfg, tails) for x in xs]
                pos = nxt
            elif layer.kind == "AvgPool":
                frag = lower_pool(b, xs, layout, layer, cfg)
                stats[pos] = frag.stats
                layout, xs = frag.layout, frag.outputs
                pos += 1
            else:
                raise LoweringError(f"unsupported layer kind {layer.kind}")
        except LoweringError as exc:
            raise LoweringError(f"layer {pos} ({layer.label}): {exc}") from exc
    b.layer = len(layers)
    output_slots = {}
    for ch, x in enumerate(xs):
        b.output(x, f"out{ch}")
        output_slots[f"out{ch}"] = layout.valid_slots
    graph = b.build(
        tails=tails,
        layer_names=[layer.label for layer in layers] + ["output"],
        output_slots=output_slots,
        lowered_layers=lowered_layer_count(spec),
    )
    return LoweredNetwork(graph, stats, layout)
