"""Plaintext emulation of compiled graphs, plus a dense reference.

``eval_ddg`` runs a DDG slot by slot. In ``"quantized"`` mode every value is
an integer mantissa with a scale in bits, as in CKKS without noise: products
add scales, rescales divide by ``2**prime`` with round-half-even, and additions
align operands by shifting the smaller-scale one up. ``"exact"`` mode keeps
Fractions and treats rescales as the identity, which makes rewrite identities
checkable with ``==``.

``eval_reference`` evaluates a NetworkSpec with ordinary nested loops over
float tensors and knows nothing about slots.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .ddg import (
    ADD,
    CIPHER_INPUT,
    MUL_CIPHER,
    MUL_PLAIN,
    OUTPUT,
    PLAIN_CONST,
    RESCALE,
    ROTATE,
    SUB,
    Ddg,
    topological_order,
)
from .lowering import QuantConfig
from .network_ir import LayerSpec, NetworkSpec, fold_batchnorm, to_fraction

DEFAULT_TOL_REL = 2.0**-10
# |value| may reach 2**HEADROOM_BITS before a mantissa counts as overflowed
HEADROOM_BITS = 40

EXACT = "exact"
QUANTIZED = "quantized"


class BindingError(ValueError):
    """Inputs or weights do not fit the graph or network."""


class MantissaOverflow(OverflowError):
    pass


@dataclass
class SlotVector:
    """One ciphertext's worth of slots.

    In quantized mode ``values`` holds integer mantissas (the real value is
    ``m / 2**scale_bits``); in exact mode it holds Fractions.
    """

    values: np.ndarray
    scale_bits: int
    exact: bool = False

    def __len__(self) -> int:
        return len(self.values)

    def to_float(self) -> np.ndarray:
        if self.exact:
            return np.array([float(v) for v in self.values])
        return np.array([int(v) / (1 << self.scale_bits) for v in self.values])

    def to_fractions(self) -> list[Fraction]:
        if self.exact:
            return [Fraction(v) for v in self.values]
        return [Fraction(int(v), 1 << self.scale_bits) for v in self.values]

    @classmethod
    def encode(cls, data, scale_bits: int) -> "SlotVector":
        """Round real values onto the ``2**-scale_bits`` grid."""
        return cls(_obj([_quantize(Fraction(v), scale_bits) for v in np.ravel(data)]), scale_bits)

    @classmethod
    def exact_of(cls, data, scale_bits: int = 0) -> "SlotVector":
        return cls(_obj([Fraction(v) for v in np.ravel(data)]), scale_bits, exact=True)


def _obj(seq) -> np.ndarray:
    arr = np.empty(len(seq), dtype=object)
    arr[:] = list(seq)
    return arr


def _quantize(x: Fraction, scale_bits: int) -> int:
    # round() on a Fraction is round-half-even
    return round(x * (1 << scale_bits))


def _rshift_round_even(m: int, bits: int) -> int:
    if bits <= 0:
        return m << -bits
    q, r = divmod(m, 1 << bits)
    half = 1 << (bits - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


_rshift = np.frompyfunc(_rshift_round_even, 2, 1)


def _const_values(graph: Ddg, node, slots: int, mode: str):
    value = node.value
    if value is None:
        raise BindingError(f"node {node.id} is a symbolic constant; lower with weights to evaluate")
    if isinstance(value, str):
        vec = graph.vectors.get(value)
        if vec is None:
            raise BindingError(f"node {node.id} references unknown vector {value!r}")
        if mode == EXACT:
            return _obj([Fraction(v) for v in vec])
        return _obj([_quantize(Fraction(v), node.scale_bits) for v in vec])
    value = Fraction(value)
    return value if mode == EXACT else _quantize(value, node.scale_bits)


def _coerce_input(name: str, data, node, slots: int, mode: str) -> SlotVector:
    if isinstance(data, SlotVector):
        vec = data
        if mode == EXACT and not vec.exact:
            vec = SlotVector(_obj(vec.to_fractions()), vec.scale_bits, exact=True)
        elif mode == QUANTIZED and vec.exact:
            vec = SlotVector.encode(vec.values, node.scale_bits)
        elif mode == QUANTIZED and vec.scale_bits != node.scale_bits:
            raise BindingError(f"input {name!r} has scale {vec.scale_bits}, graph expects {node.scale_bits}")
    else:
        flat = np.ravel(np.asarray(data, dtype=object))
        vec = SlotVector.exact_of(flat, node.scale_bits) if mode == EXACT else SlotVector.encode(flat, node.scale_bits)
    if len(vec) != slots:
        raise BindingError(f"input {name!r} has {len(vec)} slots, graph has {slots}")
    return vec


def eval_ddg(
    graph: Ddg,
    inputs: Mapping[str, Any],
    mode: str = QUANTIZED,
    headroom_bits: int = HEADROOM_BITS,
) -> dict[str, SlotVector]:
    """Evaluate ``graph`` on named inputs, returning one vector per output.

    ``inputs`` maps CipherInput names to SlotVectors or to raw slot arrays,
    which are encoded at the input's scale.

    Raises:
        BindingError: a missing or malformed input, or a symbolic constant.
        MantissaOverflow: a value exceeds ``2**headroom_bits`` in magnitude.
    """
    if mode not in (EXACT, QUANTIZED):
        raise ValueError(f"mode must be {EXACT!r} or {QUANTIZED!r}")
    nodes = graph.nodes
    slots = graph.slots
    remaining = [0] * len(nodes)
    for n in nodes:
        for op in n.operands:
            remaining[op] += 1
    vals: dict[int, Any] = {}
    scales: dict[int, int] = {}
    outputs: dict[str, SlotVector] = {}
    limit_shift = headroom_bits

    for nid in topological_order(graph):
        node = nodes[nid]
        kind = node.kind
        ops = node.operands
        if kind == CIPHER_INPUT:
            if node.name not in inputs:
                raise BindingError(f"missing input {node.name!r}")
            vec = _coerce_input(node.name, inputs[node.name], node, slots, mode)
            v, s = vec.values, node.scale_bits
        elif kind == PLAIN_CONST:
            v, s = _const_values(graph, node, slots, mode), node.scale_bits
        elif kind in (ADD, SUB):
            (a, sa), (b, sb) = (vals[ops[0]], scales[ops[0]]), (vals[ops[1]], scales[ops[1]])
            s = max(sa, sb)
            if mode == QUANTIZED:
                a = a << (s - sa) if sa < s else a
                b = b << (s - sb) if sb < s else b
            v = a + b if kind == ADD else a - b
        elif kind in (MUL_PLAIN, MUL_CIPHER):
            v = vals[ops[0]] * vals[ops[1]]
            s = scales[ops[0]] + scales[ops[1]]
        elif kind == ROTATE:
            v = np.roll(vals[ops[0]], -node.offset)
            s = scales[ops[0]]
        elif kind == RESCALE:
            src = scales[ops[0]]
            s = node.scale_bits
            v = vals[ops[0]] if mode == EXACT else _rshift(vals[ops[0]], src - s)
        elif kind == OUTPUT:
            v, s = vals[ops[0]], scales[ops[0]]
        else:
            raise BindingError(f"cannot evaluate node kind {kind}")

        if mode == QUANTIZED and kind != PLAIN_CONST:
            bound = 1 << (s + limit_shift)
            peak = max((abs(int(x)) for x in np.ravel(v)), default=0) if isinstance(v, np.ndarray) else abs(v)
            if peak >= bound:
                raise MantissaOverflow(
                    f"node {nid} ({kind}{', ' + node.role if node.role else ''}) overflowed: "
                    f"|value| >= 2^{limit_shift} at scale {s}"
                )
        if kind != PLAIN_CONST and not isinstance(v, np.ndarray):
            v = _obj([v] * slots)
        vals[nid], scales[nid] = v, s
        if kind == OUTPUT:
            outputs[node.name] = SlotVector(v, s, exact=(mode == EXACT))
        for op in ops:
            remaining[op] -= 1
            if remaining[op] == 0 and nodes[op].kind != OUTPUT:
                vals.pop(op, None)
    return outputs


def inputs_from_tensor(graph: Ddg, tensor) -> dict[str, np.ndarray]:
    """Pack a (C, H, W) tensor into per-channel slot arrays (HW batching)."""
    tensor = np.asarray(tensor)
    names = [graph.nodes[i].name for i in graph.input_ids]
    if tensor.ndim != 3 or tensor.shape[0] != len(names) or tensor.shape[1] * tensor.shape[2] != graph.slots:
        raise BindingError(f"input tensor shape {tensor.shape} does not match {len(names)} channels x {graph.slots} slots")
    return {name: tensor[i].reshape(-1) for i, name in enumerate(names)}


# --------------------------------------------------------------------------
# dense reference


def _conv_ref(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    o, i, k, _ = w.shape
    if x.shape[0] != i:
        raise BindingError(f"conv expects {i} channels, got {x.shape[0]}")
    _, h, wd = x.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for r in range(oh):
        for c in range(ow):
            patch = x[:, r * stride:r * stride + k, c * stride:c * stride + k]
            out[:, r, c] = np.tensordot(w, patch, axes=([1, 2, 3], [0, 1, 2]))
    return out


def _pool_ref(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    _, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((x.shape[0], oh, ow))
    for r in range(oh):
        for c in range(ow):
            out[:, r, c] = x[:, r * stride:r * stride + k, c * stride:c * stride + k].mean(axis=(1, 2))
    return out


def _act_ref(x: np.ndarray, coeffs) -> np.ndarray:
    a, b, c = (float(to_fraction(v)) for v in coeffs)
    return a * x * x + b * x + c


def _crop_cat(parts: list[np.ndarray]) -> np.ndarray:
    h = min(p.shape[1] for p in parts)
    w = min(p.shape[2] for p in parts)
    return np.concatenate([p[:, :h, :w] for p in parts], axis=0)


def _module_ref(x: np.ndarray, layer: LayerSpec, w: Mapping[str, Any]) -> np.ndarray:
    def inner(t):
        return t if layer.inner_act_coeffs is None else _act_ref(t, layer.inner_act_coeffs)

    if layer.kind == "FireModule":
        mid = inner(_conv_ref(x, np.asarray(w["squeeze"], float)))
        parts = []
        if layer.fire_expand1:
            parts.append(_conv_ref(mid, np.asarray(w["expand1"], float)))
        if layer.fire_expand3:
            parts.append(_conv_ref(mid, np.asarray(w["expand3"], float)))
        return _crop_cat(parts)
    o0, o1, o2, o3 = layer.inception_branch_channels
    parts = []
    if o0:
        parts.append(_conv_ref(x, np.asarray(w["b0"], float)))
    for width, name in ((o1, "b1"), (o2, "b2")):
        if width:
            mid = inner(_conv_ref(x, np.asarray(w[f"{name}_reduce"], float)))
            parts.append(_conv_ref(mid, np.asarray(w[name], float)))
    if o3:
        parts.append(_conv_ref(_pool_ref(x, 3, 1), np.asarray(w["b3"], float)))
    return _crop_cat(parts)


def eval_reference(spec: NetworkSpec, inputs, weights: Mapping[int, Any]) -> np.ndarray:
    """Float forward pass; returns ``(C, rows, cols)``, or ``(C, 1, 1)`` after a dense layer."""
    x = np.asarray(inputs, dtype=float)
    if x.shape != tuple(spec.input_shape):
        raise BindingError(f"input shape {x.shape} != network input {tuple(spec.input_shape)}")
    for pos, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind in ("Conv2D", "Dense", "FireModule", "InceptionModule") and pos not in weights:
            raise BindingError(f"no weights for layer {pos} ({layer.label})")
        if kind == "Conv2D":
            x = _conv_ref(x, np.asarray(weights[pos], float), layer.stride)
        elif kind in ("FireModule", "InceptionModule"):
            x = _module_ref(x, layer, weights[pos])
        elif kind == "Dense":
            w = np.asarray(weights[pos], float)
            if w.shape[1:] != x.shape:
                raise BindingError(f"dense weights {w.shape} do not match activations {x.shape}")
            x = np.tensordot(w, x, axes=3).reshape(-1, 1, 1)
        elif kind == "PolyActivation":
            x = _act_ref(x, layer.act_coeffs)
        elif kind == "BatchNorm":
            bn = fold_batchnorm(*layer.bn_stats)
            x = float(bn.d) * x + float(bn.e)
        elif kind == "AvgPool":
            x = _pool_ref(x, layer.kernel, layer.stride)
        else:
            raise BindingError(f"unsupported layer kind {kind}")
    return x


# --------------------------------------------------------------------------
# comparison


@dataclass
class EvalReport:
    outputs: dict[str, SlotVector]
    max_abs_err: float
    max_rel_err: float
    per_output_err: list[dict]
    tol_rel: float = DEFAULT_TOL_REL
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol_rel

    def to_dict(self, include_values: bool = False) -> dict:
        doc = {
            "passed": self.passed,
            "tol_rel": self.tol_rel,
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
            "per_output": self.per_output_err,
            **self.meta,
        }
        if include_values:
            doc["outputs"] = {k: v.to_float().tolist() for k, v in self.outputs.items()}
        return doc


def _live(vec, slots) -> np.ndarray:
    if isinstance(vec, SlotVector):
        vec = vec.to_float()
    vec = np.asarray(vec, dtype=float)
    return vec[list(slots)] if slots is not None else vec


def compare_outputs(
    got: Mapping[str, Any],
    reference,
    valid_slots: Mapping[str, tuple[int, ...]] | None = None,
    tol_rel: float = DEFAULT_TOL_REL,
) -> EvalReport:
    """Normwise error of ``got`` against ``reference`` on valid slots.

    ``reference`` is either a mapping with the same keys as ``got`` (slot
    vectors, compared through ``valid_slots``) or a tensor whose leading axis
    enumerates the outputs in order and whose remaining axes flatten
    row-major onto the valid slots. The relative error is
    ``max|got - ref| / max|ref|``, taken over all outputs together.
    """
    names = list(got)
    if isinstance(reference, Mapping):
        refs = {k: _live(reference[k], (valid_slots or {}).get(k)) for k in names}
    else:
        arr = np.asarray(reference, dtype=float).reshape(len(names), -1)
        refs = dict(zip(names, arr))
    per = []
    worst_abs, ref_peak = 0.0, 0.0
    for name in names:
        mine = _live(got[name], (valid_slots or {}).get(name))
        ref = refs[name]
        if mine.shape != ref.shape:
            raise BindingError(f"output {name!r}: {mine.size} live slots vs {ref.size} reference values")
        err = float(np.max(np.abs(mine - ref), initial=0.0))
        peak = float(np.max(np.abs(ref), initial=0.0))
        per.append({"name": name, "max_abs_err": err, "max_rel_err": _rel(err, peak)})
        worst_abs, ref_peak = max(worst_abs, err), max(ref_peak, peak)
    return EvalReport(dict(got), worst_abs, _rel(worst_abs, ref_peak), per, tol_rel)


def _rel(err: float, peak: float) -> float:
    if peak == 0.0:
        return 0.0 if err == 0.0 else math.inf
    return err / peak


# --------------------------------------------------------------------------
# seeded weights and tensor files


def _grid(rng: np.random.Generator, shape, bound: float, bits: int) -> np.ndarray:
    """Uniform draws in [-bound, bound] snapped to the ``2**-bits`` grid."""
    k = max(1, int(bound * (1 << bits)))
    return rng.integers(-k, k + 1, size=shape) / float(1 << bits)


def random_weights(
    spec: NetworkSpec,
    seed: int | np.random.Generator = 0,
    cfg: QuantConfig = QuantConfig(),
) -> dict[int, Any]:
    """Fan-in scaled weights lying exactly on the plaintext weight grid."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bits = cfg.weight_scale_bits
    out: dict[int, Any] = {}
    shape = spec.input_shape
    c, h, w = shape

    def conv(o, i, k):
        return _grid(rng, (o, i, k, k), 1.0 / (i * k * k) ** 0.5, bits)

    for pos, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "Conv2D":
            out[pos] = conv(layer.out_channels, layer.in_channels, layer.kernel)
            h, w = (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1
        elif kind == "FireModule":
            s = layer.fire_squeeze
            out[pos] = {"squeeze": conv(s, layer.in_channels, 1)}
            if layer.fire_expand1:
                out[pos]["expand1"] = conv(layer.fire_expand1, s, 1)
            if layer.fire_expand3:
                out[pos]["expand3"] = conv(layer.fire_expand3, s, 3)
                h, w = h - 2, w - 2
        elif kind == "InceptionModule":
            o0, o1, o2, o3 = layer.inception_branch_channels
            r1, r2 = layer.inception_reduce
            i = layer.in_channels
            ws = {}
            shrink = 0
            if o0:
                ws["b0"] = conv(o0, i, 1)
            if o1:
                ws["b1_reduce"], ws["b1"] = conv(r1, i, 1), conv(o1, r1, 3)
                shrink = max(shrink, 2)
            if o2:
                ws["b2_reduce"], ws["b2"] = conv(r2, i, 1), conv(o2, r2, 5)
                shrink = max(shrink, 4)
            if o3:
                ws["b3"] = conv(o3, i, 1)
                shrink = max(shrink, 2)
            out[pos] = ws
            h, w = h - shrink, w - shrink
        elif kind == "AvgPool":
            h, w = (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1
        elif kind == "Dense":
            out[pos] = _grid(rng, (layer.out_channels, layer.in_channels, h, w),
                             1.0 / (layer.in_channels * h * w) ** 0.5, bits)
            h = w = 1
    return out


def random_input(spec: NetworkSpec, seed: int | np.random.Generator = 0, bits: int = 10) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _grid(rng, tuple(spec.input_shape), 1.0, bits)


def tensor_to_dict(arr) -> dict:
    arr = np.asarray(arr, dtype=float)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def tensor_from_dict(doc) -> np.ndarray:
    if not isinstance(doc, dict) or "shape" not in doc or "data" not in doc:
        raise BindingError('tensor must be an object with "shape" and "data"')
    data = np.asarray(doc["data"], dtype=float).reshape(-1)
    shape = tuple(int(d) for d in doc["shape"])
    if math.prod(shape) != data.size:
        raise BindingError(f"tensor shape {list(shape)} needs {math.prod(shape)} values, got {data.size}")
    return data.reshape(shape)


def load_tensor(path) -> np.ndarray:
    return tensor_from_dict(json.loads(Path(path).read_text()))


def weights_to_dict(weights: Mapping[int, Any]) -> dict:
    doc = {}
    for pos, w in weights.items():
        doc[str(pos)] = {k: tensor_to_dict(v) for k, v in w.items()} if isinstance(w, Mapping) else tensor_to_dict(w)
    return doc


def weights_from_dict(doc: Mapping) -> dict[int, Any]:
    out: dict[int, Any] = {}
    for key, w in doc.items():
        try:
            pos = int(key)
        except ValueError:
            raise BindingError(f"weight keys must be layer positions, got {key!r}") from None
        if isinstance(w, Mapping) and "shape" not in w:
            out[pos] = {k: tensor_from_dict(v) for k, v in w.items()}
        else:
            out[pos] = tensor_from_dict(w)
    return out


def load_weights(path) -> dict[int, Any]:
    return weights_from_dict(json.loads(Path(path).read_text()))
