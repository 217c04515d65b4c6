"""Architecture description language for HE inference candidates.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries.
Coefficients (activation, batch norm) are kept as decimal strings so that a
document survives a parse/serialize round trip bit-exactly; they are only
turned into fixed-point values when a network is lowered.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from decimal import Decimal, getcontext
from fractions import Fraction
from importlib import resources
from typing import Any, Iterable

LAYER_KINDS = (
    "Conv2D",
    "FireModule",
    "InceptionModule",
    "PolyActivation",
    "BatchNorm",
    "AvgPool",
    "Dense",
)
MODULE_KINDS = ("FireModule", "InceptionModule")


class NetworkParseError(ValueError):
    """Malformed network document."""


class SchemaError(NetworkParseError):
    """Document is well-formed JSON but violates the network schema."""


class ModuleIndexError(IndexError):
    """Requested block is not a replaceable mobile module."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    fire_squeeze: int = 0
    fire_expand1: int = 0
    fire_expand3: int = 0
    inception_branch_channels: tuple[int, int, int, int] = (0, 0, 0, 0)
    # 1x1 reduction widths feeding the 3x3 and 5x5 inception branches
    inception_reduce: tuple[int, int] = (0, 0)
    act_coeffs: tuple[str, str, str] | None = None
    bn_stats: tuple[str, str, str, str, str] | None = None
    # optional activation between the stacked convs of a mobile module
    inner_act_coeffs: tuple[str, str, str] | None = None
    name: str = ""

    @property
    def is_module(self) -> bool:
        return self.kind in MODULE_KINDS

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    @property
    def block_indices(self) -> tuple[int, ...]:
        """1-based layer positions of the mobile modules, first to last."""
        return tuple(i + 1 for i, layer in enumerate(self.layers) if layer.is_module)


@dataclass(frozen=True)
class FoldedBn:
    d: Fraction
    e: Fraction


IDENTITY_BN = FoldedBn(Fraction(1), Fraction(0))


def to_fraction(value: Any) -> Fraction:
    """Exact rational value of a decimal string, int, float or Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(Decimal(value.strip()))
    return Fraction(value)


def _exact_sqrt(x: Fraction) -> Fraction:
    num, den = x.numerator, x.denominator
    rn, rd = math.isqrt(num), math.isqrt(den)
    if rn * rn == num and rd * rd == den:
        return Fraction(rn, rd)
    ctx = getcontext().copy()
    ctx.prec = 60
    root = ctx.sqrt(ctx.divide(Decimal(num), Decimal(den)))
    return Fraction(root)


def fold_batchnorm(gamma, beta, mu, sigma_sq, epsilon) -> FoldedBn:
    """Collapse batch norm statistics into the affine map ``d*y + e``.

    Perfect-square variances give exact results; anything else goes through
    a 60-digit decimal square root.
    """
    gamma, beta, mu = to_fraction(gamma), to_fraction(beta), to_fraction(mu)
    var = to_fraction(sigma_sq) + to_fraction(epsilon)
    if var <= 0:
        raise ValueError(f"batch norm variance must be positive, got {var}")
    root = _exact_sqrt(var)
    d = gamma / root
    return FoldedBn(d=d, e=beta - d * mu)


def folded_bn_of(layer: LayerSpec) -> FoldedBn:
    if layer.bn_stats is None:
        raise ValueError(f"layer {layer.label} carries no batch norm statistics")
    return fold_batchnorm(*layer.bn_stats)


# --------------------------------------------------------------------------
# shape arithmetic


def output_channels(layer: LayerSpec, in_channels: int) -> int:
    if layer.kind in ("PolyActivation", "BatchNorm", "AvgPool"):
        return in_channels
    return layer.out_channels


def output_hw(layer: LayerSpec, h: int, w: int) -> tuple[int, int]:
    """Spatial size after ``layer`` under valid (unpadded) convolution."""
    kind = layer.kind
    if kind in ("PolyActivation", "BatchNorm"):
        return h, w
    if kind == "Dense":
        return 1, 1
    if kind in ("Conv2D", "AvgPool"):
        k, s = layer.kernel, layer.stride
        return (h - k) // s + 1, (w - k) // s + 1
    if kind == "FireModule":
        shrink = 2 if layer.fire_expand3 > 0 else 0
        return h - shrink, w - shrink
    if kind == "InceptionModule":
        shrink = max(
            s
            for s, ch in zip((0, 2, 4, 2), layer.inception_branch_channels)
            if ch > 0
        )
        return h - shrink, w - shrink
    raise SchemaError(f"unknown layer kind {kind!r}")


def lowered_layer_count(spec: NetworkSpec) -> int:
    """Number of sequential HE layers: convs, pools and dense layers.

    Activations and batch norm are fused into the preceding layer; a mobile
    module counts as its two stacked convolution stages.
    """
    stages = {"Conv2D": 1, "AvgPool": 1, "Dense": 1, "FireModule": 2, "InceptionModule": 2}
    return sum(stages.get(layer.kind, 0) for layer in spec.layers)


# --------------------------------------------------------------------------
# validation


def _layer_violations(pos: int, layer: LayerSpec) -> list[str]:
    where = f"layer {pos} ({layer.label})"
    out = []
    if layer.kind not in LAYER_KINDS:
        return [f"{where}: unknown kind {layer.kind!r}"]
    if layer.kernel < 1:
        out.append(f"{where}: kernel must be >= 1")
    if layer.stride < 1:
        out.append(f"{where}: stride must be >= 1")
    if layer.in_channels < 1 or layer.out_channels < 1:
        out.append(f"{where}: channel counts must be >= 1")
    if layer.kind in ("PolyActivation", "BatchNorm", "AvgPool") and layer.in_channels != layer.out_channels:
        out.append(f"{where}: {layer.kind} must preserve the channel count")
    if layer.kind == "FireModule":
        if layer.fire_squeeze < 1:
            out.append(f"{where}: fire_squeeze must be >= 1")
        if layer.fire_expand1 + layer.fire_expand3 != layer.out_channels:
            out.append(
                f"{where}: fire_expand1 + fire_expand3 = "
                f"{layer.fire_expand1 + layer.fire_expand3} != out_channels {layer.out_channels}"
            )
        if min(layer.fire_expand1, layer.fire_expand3) < 0:
            out.append(f"{where}: negative fire expand width")
    if layer.kind == "InceptionModule":
        branches = layer.inception_branch_channels
        if len(branches) != 4 or min(branches) < 0:
            out.append(f"{where}: inception_branch_channels needs 4 non-negative counts")
        elif sum(branches) != layer.out_channels:
            out.append(f"{where}: sum of inception_branch_channels {sum(branches)} != out_channels {layer.out_channels}")
        for ch, red in zip(branches[1:3], layer.inception_reduce):
            if ch > 0 and red < 1:
                out.append(f"{where}: inception_reduce must be >= 1 for an active branch")
    if layer.kind == "PolyActivation" and layer.act_coeffs is None:
        out.append(f"{where}: PolyActivation requires act_coeffs")
    if layer.kind == "BatchNorm":
        if layer.bn_stats is None:
            out.append(f"{where}: BatchNorm requires bn_stats")
        else:
            _, _, _, var, eps = (to_fraction(v) for v in layer.bn_stats)
            if var + eps <= 0:
                out.append(f"{where}: sigma_sq + epsilon must be positive")
    return out


def validate_network(spec: NetworkSpec) -> list[str]:
    """Return every invariant violation of ``spec``; empty means valid."""
    violations = []
    channels, h, w = spec.input_shape
    if min(spec.input_shape) < 1:
        violations.append(f"input_shape {spec.input_shape} must be positive")
    for pos, layer in enumerate(spec.layers, start=1):
        own = _layer_violations(pos, layer)
        violations.extend(own)
        if own and any("unknown kind" in v for v in own):
            return violations
        where = f"layer {pos} ({layer.label})"
        if layer.in_channels != channels:
            violations.append(
                f"{where}: in_channels {layer.in_channels} != {channels} produced by the previous layer"
            )
        if layer.kind in ("Conv2D", "AvgPool"):
            if layer.kernel > min(h, w):
                violations.append(f"{where}: kernel {layer.kernel} exceeds spatial size {h}x{w}")
            elif layer.kind == "AvgPool" and (h % layer.stride or w % layer.stride):
                violations.append(f"{where}: pool stride {layer.stride} does not divide {h}x{w}")
            elif (h - layer.kernel) % layer.stride or (w - layer.kernel) % layer.stride:
                violations.append(f"{where}: stride {layer.stride} does not tile {h}x{w} with kernel {layer.kernel}")
        channels = output_channels(layer, layer.in_channels)
        h, w = output_hw(layer, h, w)
        if h < 1 or w < 1:
            violations.append(f"{where}: spatial size collapses to {h}x{w}")
            break
    return violations


# --------------------------------------------------------------------------
# editing


def replace_module(spec: NetworkSpec, i: int) -> NetworkSpec:
    """Swap the mobile module at 1-based layer position ``i`` for one conv.

    The kernel is 3 for any module with a 3x3 branch. It follows the module's
    spatial shrink otherwise (5 when an inception 5x5 branch is present), so
    the shapes downstream stay valid under unpadded convolution.
    """
    if i not in spec.block_indices:
        raise ModuleIndexError(f"layer position {i} is not a mobile module of {spec.name!r}")
    old = spec.layers[i - 1]
    probe = 16
    shrink = probe - output_hw(old, probe, probe)[0]
    conv = LayerSpec(
        kind="Conv2D",
        in_channels=old.in_channels,
        out_channels=old.out_channels,
        kernel=shrink + 1,
        stride=1,
        name=f"C({old.label})",
    )
    layers = spec.layers[: i - 1] + (conv,) + spec.layers[i:]
    return dataclasses.replace(spec, layers=layers)


# --------------------------------------------------------------------------
# JSON document format

_INT_FIELDS = ("in_channels", "out_channels", "kernel", "stride", "fire_squeeze", "fire_expand1", "fire_expand3")
_DEFAULTS = {f.name: f.default for f in dataclasses.fields(LayerSpec) if f.default is not dataclasses.MISSING}
_KNOWN_FIELDS = {f.name for f in dataclasses.fields(LayerSpec)}


def _coeffs(raw: Any, n: int, where: str) -> tuple[str, ...]:
    if not isinstance(raw, (list, tuple)) or len(raw) != n:
        raise SchemaError(f"{where}: expected a list of {n} decimal strings")
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (str, int, float)):
            raise SchemaError(f"{where}: coefficient {v!r} is not a decimal")
        text = v if isinstance(v, str) else repr(v)
        try:
            Decimal(text)
        except Exception as exc:  # decimal.InvalidOperation
            raise SchemaError(f"{where}: coefficient {v!r} is not a decimal") from exc
        out.append(text)
    return tuple(out)


def _int_tuple(raw: Any, n: int, where: str) -> tuple[int, ...]:
    if not isinstance(raw, (list, tuple)) or len(raw) != n or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in raw
    ):
        raise SchemaError(f"{where}: expected a list of {n} integers")
    return tuple(raw)


def layer_from_dict(raw: dict, pos: int, prev_channels: int | None = None) -> LayerSpec:
    where = f"layers[{pos}]"
    if not isinstance(raw, dict):
        raise SchemaError(f"{where}: expected an object")
    kind = raw.get("kind")
    if kind not in LAYER_KINDS:
        raise SchemaError(f"{where}.kind: unknown layer kind {kind!r}")
    unknown = set(raw) - _KNOWN_FIELDS
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")
    kw: dict[str, Any] = {"kind": kind}
    for name in _INT_FIELDS:
        if name in raw:
            v = raw[name]
            if not isinstance(v, int) or isinstance(v, bool):
                raise SchemaError(f"{where}.{name}: expected an integer, got {v!r}")
            kw[name] = v
    # shape-preserving layers may omit their channel count
    if kind in ("PolyActivation", "BatchNorm", "AvgPool") and prev_channels is not None:
        kw.setdefault("in_channels", prev_channels)
        kw.setdefault("out_channels", kw["in_channels"])
    if kind == "AvgPool":
        kw.setdefault("stride", kw.get("kernel", 1))
    for name in ("in_channels", "out_channels"):
        if name not in kw:
            raise SchemaError(f"{where}.{name}: required for {kind}")
    if "inception_branch_channels" in raw:
        kw["inception_branch_channels"] = _int_tuple(raw["inception_branch_channels"], 4, f"{where}.inception_branch_channels")
    if "inception_reduce" in raw:
        kw["inception_reduce"] = _int_tuple(raw["inception_reduce"], 2, f"{where}.inception_reduce")
    elif kind == "InceptionModule" and "inception_branch_channels" in kw:
        b = kw["inception_branch_channels"]
        kw["inception_reduce"] = (-(-b[1] // 2), -(-b[2] // 2))
    if raw.get("act_coeffs") is not None:
        kw["act_coeffs"] = _coeffs(raw["act_coeffs"], 3, f"{where}.act_coeffs")
    if raw.get("inner_act_coeffs") is not None:
        kw["inner_act_coeffs"] = _coeffs(raw["inner_act_coeffs"], 3, f"{where}.inner_act_coeffs")
    if raw.get("bn_stats") is not None:
        kw["bn_stats"] = _coeffs(raw["bn_stats"], 5, f"{where}.bn_stats")
    if "name" in raw:
        if not isinstance(raw["name"], str):
            raise SchemaError(f"{where}.name: expected a string")
        kw["name"] = raw["name"]
    layer = LayerSpec(**kw)
    own = _layer_violations(pos, layer)
    if own:
        raise SchemaError("; ".join(own))
    return layer


def network_from_dict(doc: Any) -> NetworkSpec:
    if not isinstance(doc, dict):
        raise SchemaError("network document must be a JSON object")
    for key in ("name", "input_shape", "layers"):
        if key not in doc:
            raise SchemaError(f"missing top-level field {key!r}")
    if not isinstance(doc["name"], str):
        raise SchemaError("name: expected a string")
    shape = _int_tuple(doc["input_shape"], 3, "input_shape")
    if not isinstance(doc["layers"], list):
        raise SchemaError("layers: expected a list")
    layers = []
    channels = shape[0]
    for pos, raw in enumerate(doc["layers"]):
        layer = layer_from_dict(raw, pos, channels)
        layers.append(layer)
        channels = output_channels(layer, layer.in_channels)
    return NetworkSpec(name=doc["name"], input_shape=shape, layers=tuple(layers))


def parse_network(text: str) -> NetworkSpec:
    """Parse a JSON network document into a :class:`NetworkSpec`.

    Raises:
        NetworkParseError: the text is not valid JSON (message carries line
            and column).
        SchemaError: unknown layer kinds, missing or mistyped fields, or a
            per-layer invariant violation such as a fire module whose expand
            widths do not sum to its output channels.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return network_from_dict(doc)


def layer_to_dict(layer: LayerSpec) -> dict:
    out: dict[str, Any] = {"kind": layer.kind}
    for f in dataclasses.fields(LayerSpec):
        if f.name == "kind":
            continue
        value = getattr(layer, f.name)
        if f.name in ("in_channels", "out_channels") or value != _DEFAULTS.get(f.name, object()):
            out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def network_to_dict(spec: NetworkSpec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "layers": [layer_to_dict(layer) for layer in spec.layers],
    }


def serialize_network(spec: NetworkSpec) -> str:
    return json.dumps(network_to_dict(spec), indent=2)


def load_network(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


BUNDLED = ("squeezenet", "squeezenet_desk", "inceptionnet", "inceptionnet_desk")


def bundled_network(name: str) -> NetworkSpec:
    """Load one of the network documents shipped with the package."""
    text = resources.files("ckksnet.data").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return parse_network(text)


def replaced_labels(spec: NetworkSpec) -> frozenset[str]:
    """Labels of modules that were swapped for convolutions by the search."""
    return frozenset(
        layer.name[2:-1] for layer in spec.layers if layer.name.startswith("C(") and layer.name.endswith(")")
    )


def with_layers(spec: NetworkSpec, layers: Iterable[LayerSpec]) -> NetworkSpec:
    return dataclasses.replace(spec, layers=tuple(layers))
