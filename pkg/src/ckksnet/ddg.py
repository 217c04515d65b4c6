"""HE data-dependency graphs: node model, rescale insertion and analyses.

Scales are tracked in bits. A multiplication adds the operand scales; a
rescale removes ``prime_bits``. Levels count the rescales still available to
a ciphertext: every input starts at the global budget ``r`` and each rescale
on a path spends one.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable

CIPHER_INPUT = "CipherInput"
PLAIN_CONST = "PlainConst"
ADD = "Add"
SUB = "Sub"
MUL_PLAIN = "MulPlain"
MUL_CIPHER = "MulCipher"
ROTATE = "Rotate"
RESCALE = "Rescale"
OUTPUT = "Output"

KINDS = (CIPHER_INPUT, PLAIN_CONST, ADD, SUB, MUL_PLAIN, MUL_CIPHER, ROTATE, RESCALE, OUTPUT)
MULTIPLICATIONS = (MUL_PLAIN, MUL_CIPHER)
# kinds that stand for real HE work (inputs, constants and outputs are terminals)
OP_KINDS = (ADD, SUB, MUL_PLAIN, MUL_CIPHER, ROTATE, RESCALE)
ARITY = {CIPHER_INPUT: 0, PLAIN_CONST: 0, ADD: 2, SUB: 2, MUL_PLAIN: 2, MUL_CIPHER: 2, ROTATE: 1, RESCALE: 1, OUTPUT: 1}

DEFAULT_PRIME_BITS = 60


class DdgError(ValueError):
    """Structural problem with a graph (cycles, dangling ids, missing levels)."""


class RescaleError(DdgError):
    """Scales cannot be brought under the waterline."""


@dataclass(slots=True)
class DdgNode:
    id: int
    kind: str
    operands: tuple[int, ...] = ()
    scale_bits: int = 0
    level: int | None = None
    offset: int = 0
    # PlainConst payload: a Fraction broadcast to every slot, the key of a
    # slot vector in ``Ddg.vectors``, or None for symbolic (cost-only) graphs
    value: Any = None
    name: str = ""
    layer: int = -1
    tag: int = -1
    role: str = ""


@dataclass
class Ddg:
    nodes: list[DdgNode]
    outputs: list[int]
    prime_bits: int = DEFAULT_PRIME_BITS
    input_scale_bits: int = 25
    slots: int = 1
    vectors: dict[str, tuple] = field(default_factory=dict)
    # block-tail records written by lowering, consumed by the merge pass
    tails: dict[int, dict] = field(default_factory=dict)
    layer_names: list[str] = field(default_factory=list)
    # per output name: physical slot indices that hold live values
    output_slots: dict[str, tuple[int, ...]] = field(default_factory=dict)
    lowered_layers: int = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, nid: int) -> DdgNode:
        return self.nodes[nid]

    @property
    def input_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.kind == CIPHER_INPUT]

    @property
    def output_names(self) -> list[str]:
        return [self.nodes[o].name for o in self.outputs]

    @property
    def is_leveled(self) -> bool:
        return all(n.level is not None for n in self.nodes)

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def consumers(self) -> list[list[int]]:
        users: list[list[int]] = [[] for _ in self.nodes]
        for n in self.nodes:
            for op in n.operands:
                if 0 <= op < len(users):
                    users[op].append(n.id)
        return users

    def derived(self, nodes: list[DdgNode], outputs: list[int], **changes) -> "Ddg":
        """Copy of the metadata around a new node list."""
        return replace(self, nodes=nodes, outputs=outputs, **changes)


class Builder:
    """Append-only node factory; ids are dense and follow creation order."""

    def __init__(self, **meta):
        self.nodes: list[DdgNode] = []
        self.outputs: list[int] = []
        self.meta = meta
        self.vectors: dict[str, tuple] = dict(meta.pop("vectors", {}))
        self.layer = -1
        self.tag = -1

    def emit(self, kind: str, operands: Iterable[int] = (), scale_bits: int = 0, **kw) -> int:
        nid = len(self.nodes)
        kw.setdefault("layer", self.layer)
        kw.setdefault("tag", self.tag)
        self.nodes.append(DdgNode(nid, kind, tuple(operands), scale_bits, **kw))
        return nid

    def scale(self, nid: int) -> int:
        return self.nodes[nid].scale_bits

    def cipher_input(self, name: str, scale_bits: int) -> int:
        return self.emit(CIPHER_INPUT, (), scale_bits, name=name)

    def const(self, value, scale_bits: int, role: str = "") -> int:
        return self.emit(PLAIN_CONST, (), scale_bits, value=value, role=role)

    def vector(self, key: str, values) -> str:
        if key not in self.vectors:
            self.vectors[key] = tuple(values)
        return key

    def add(self, a: int, b: int, role: str = "") -> int:
        return self.emit(ADD, (a, b), max(self.scale(a), self.scale(b)), role=role)

    def sub(self, a: int, b: int, role: str = "") -> int:
        return self.emit(SUB, (a, b), max(self.scale(a), self.scale(b)), role=role)

    def mul_plain(self, x: int, value, scale_bits: int, role: str = "") -> int:
        c = self.const(value, scale_bits, role=role)
        return self.emit(MUL_PLAIN, (x, c), self.scale(x) + scale_bits, role=role)

    def mul_cipher(self, a: int, b: int, role: str = "") -> int:
        return self.emit(MUL_CIPHER, (a, b), self.scale(a) + self.scale(b), role=role)

    def rotate(self, x: int, offset: int) -> int:
        return self.emit(ROTATE, (x,), self.scale(x), offset=offset)

    def output(self, x: int, name: str) -> int:
        nid = self.emit(OUTPUT, (x,), self.scale(x), name=name)
        self.outputs.append(nid)
        return nid

    def add_const(self, x: int, value, role: str = "") -> int:
        c = self.const(value, self.scale(x), role=role)
        return self.emit(ADD, (x, c), self.scale(x), role=role)

    def sum(self, terms: list[int]) -> int:
        """Left-to-right accumulation; ``terms`` must be non-empty."""
        acc = terms[0]
        for t in terms[1:]:
            acc = self.add(acc, t)
        return acc

    def build(self, **extra) -> Ddg:
        meta = dict(self.meta)
        meta.update(extra)
        return Ddg(nodes=self.nodes, outputs=list(self.outputs), vectors=self.vectors, **meta)


# --------------------------------------------------------------------------
# ordering helpers


def topological_order(graph: Ddg) -> list[int]:
    """Kahn order, smallest id first among ready nodes.

    Raises:
        DdgError: on dangling operand ids or a cycle.
    """
    n = len(graph.nodes)
    indeg = [0] * n
    users: list[list[int]] = [[] for _ in range(n)]
    for node in graph.nodes:
        for op in node.operands:
            if not 0 <= op < n:
                raise DdgError(f"node {node.id} references unknown id {op}")
            indeg[node.id] += 1
            users[op].append(node.id)
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != n:
        raise DdgError("graph contains a cycle")
    return order


def renumber(graph: Ddg) -> Ddg:
    """Reassign dense ids in topological order, dropping nothing."""
    order = topological_order(graph)
    if order == list(range(len(order))):
        return graph
    new_id = {old: new for new, old in enumerate(order)}
    nodes = []
    for old in order:
        node = graph.nodes[old]
        nodes.append(replace(node, id=new_id[old], operands=tuple(new_id[o] for o in node.operands)))
    tails = {t: _remap_tail(info, new_id) for t, info in graph.tails.items()}
    return graph.derived(nodes, [new_id[o] for o in graph.outputs], tails=tails)


def _remap_tail(info: dict, mapping: dict[int, int]) -> dict:
    out = dict(info)
    for key in ("x", "out"):
        if key in out and out[key] in mapping:
            out[key] = mapping[out[key]]
    return out


def prune(graph: Ddg, keep_outputs: Iterable[int] | None = None) -> Ddg:
    """Drop nodes that do not reach a kept output; ids are compacted."""
    keep_outputs = list(graph.outputs if keep_outputs is None else keep_outputs)
    live = set()
    stack = list(keep_outputs)
    while stack:
        i = stack.pop()
        if i in live:
            continue
        live.add(i)
        stack.extend(graph.nodes[i].operands)
    mapping = {}
    nodes = []
    for node in graph.nodes:
        if node.id in live:
            mapping[node.id] = len(nodes)
            nodes.append(replace(node, id=len(nodes), operands=tuple(mapping[o] for o in node.operands)))
    outputs = [mapping[o] for o in keep_outputs]
    names = {graph.nodes[o].name for o in keep_outputs}
    tails = {t: _remap_tail(i, mapping) for t, i in graph.tails.items() if i.get("out") in mapping}
    out = graph.derived(
        nodes,
        outputs,
        tails=tails,
        output_slots={k: v for k, v in graph.output_slots.items() if k in names},
    )
    return assign_levels(out) if graph.is_leveled else out


# --------------------------------------------------------------------------
# rescale insertion


def insert_rescales(graph: Ddg, waterline_bits: int | None = None) -> Ddg:
    """Insert rescales as late as possible and assign levels.

    ``waterline_bits`` is the size of each rescaling prime (defaults to the
    graph's ``prime_bits``). A ciphertext is rescaled only when it reaches
    ``input_scale_bits + waterline_bits`` at the point where it feeds a
    multiplication or an output, so chains of additions and rotations run at
    the higher scale. Add/Sub/MulCipher operands are brought to a common
    rescale count, and additions to a common scale, by raising the scale of
    plaintext coefficients (or, when no private coefficient is available, a
    multiplication by one), never by an extra rescale on the longer path.

    Raises:
        RescaleError: the graph already has rescales, or a single coefficient
            scale exceeds the waterline so no placement can satisfy it.
    """
    prime = waterline_bits or graph.prime_bits
    if any(n.kind == RESCALE for n in graph.nodes):
        raise RescaleError("graph already contains Rescale nodes")
    threshold = graph.input_scale_bits + prime
    old = graph.nodes
    for n in old:
        if n.kind == MUL_PLAIN:
            c = next((old[o] for o in n.operands if old[o].kind == PLAIN_CONST), None)
            if c is not None and c.scale_bits >= threshold:
                raise RescaleError(f"constant {c.id} scale {c.scale_bits} exceeds waterline {threshold}")
    uses = [0] * len(old)
    for n in old:
        for op in n.operands:
            uses[op] += 1

    nodes: list[DdgNode] = []
    k: list[int] = []  # rescales on the path to each new node
    private: list[bool] = []  # node feeds exactly one consumer
    mapped: dict[int, int] = {}
    rescaled: dict[int, int] = {}

    def emit(src: DdgNode, kind: str, operands: tuple, scale: int, depth: int, excl: bool, **kw) -> int:
        nid = len(nodes)
        kw.setdefault("layer", src.layer)
        kw.setdefault("tag", src.tag)
        nodes.append(DdgNode(nid, kind, operands, scale, **kw))
        k.append(depth)
        private.append(excl)
        return nid

    def const_for(old_id: int, scale: int | None, depth: int) -> int:
        c = old[old_id]
        return emit(
            c, PLAIN_CONST, (), c.scale_bits if scale is None else scale, depth, True,
            value=c.value, role=c.role, name=c.name,
        )

    def rescale(nid: int, excl: bool) -> int:
        src = nodes[nid]
        return emit(src, RESCALE, (nid,), src.scale_bits - prime, k[nid] + 1, excl)

    def lazy(nid: int) -> int:
        if nodes[nid].scale_bits < threshold:
            return nid
        if nid not in rescaled:
            cur = nid
            while nodes[cur].scale_bits >= threshold:
                cur = rescale(cur, False)
            rescaled[nid] = cur
        return rescaled[nid]

    def raise_scale(nid: int, rho: int) -> int:
        if rho == 0:
            return nid
        node = nodes[nid]
        if private[nid]:
            if node.kind in (ADD, SUB):
                node.operands = tuple(
                    _bump(op, rho) if nodes[op].kind == PLAIN_CONST else raise_scale(op, rho)
                    for op in node.operands
                )
                node.scale_bits += rho
                return nid
            if node.kind in (ROTATE, RESCALE):
                node.operands = (raise_scale(node.operands[0], rho),)
                node.scale_bits += rho
                return nid
            if node.kind == MUL_PLAIN:
                _bump(node.operands[1], rho)
                node.scale_bits += rho
                return nid
        one = emit(node, PLAIN_CONST, (), rho, k[nid], True, value=Fraction(1), role="ScaleRaise")
        return emit(node, MUL_PLAIN, (nid, one), node.scale_bits + rho, k[nid], True, role="ScaleRaise")

    def _bump(cid: int, rho: int) -> int:
        nodes[cid].scale_bits += rho
        return cid

    def drop_levels(nid: int, delta: int, floor: int) -> int:
        """Spend ``delta`` rescales on ``nid`` keeping its scale >= ``floor``."""
        if delta == 0:
            return nid
        nid = raise_scale(nid, max(0, floor + prime * delta - nodes[nid].scale_bits))
        for _ in range(delta):
            nid = rescale(nid, True)
        return nid

    def equalize_add(a: int, b: int) -> tuple[int, int]:
        swap = k[a] < k[b]
        if swap:
            a, b = b, a
        delta = k[a] - k[b]
        sa, sb = nodes[a].scale_bits, nodes[b].scale_bits
        target = max(sa, sb - prime * delta)
        a = raise_scale(a, target - sa)
        b = raise_scale(b, target - sb + prime * delta)
        for _ in range(delta):
            b = rescale(b, True)
        return (b, a) if swap else (a, b)

    for src in old:
        kind = src.kind
        excl = uses[src.id] == 1
        if kind == PLAIN_CONST:
            continue
        if kind == CIPHER_INPUT:
            nid = emit(src, kind, (), src.scale_bits, 0, excl, name=src.name, value=src.value)
        elif kind == ROTATE:
            x = mapped[src.operands[0]]
            nid = emit(src, kind, (x,), nodes[x].scale_bits, k[x], excl, offset=src.offset)
        elif kind == MUL_PLAIN:
            xo, co = src.operands
            if old[xo].kind == PLAIN_CONST:
                xo, co = co, xo
            x = lazy(mapped[xo])
            c = const_for(co, None, k[x])
            nid = emit(src, kind, (x, c), nodes[x].scale_bits + nodes[c].scale_bits, k[x], excl, role=src.role)
        elif kind == MUL_CIPHER:
            a, b = (lazy(mapped[o]) for o in src.operands)
            if a != b and k[a] != k[b]:
                if k[a] < k[b]:
                    a = drop_levels(a, k[b] - k[a], graph.input_scale_bits)
                else:
                    b = drop_levels(b, k[a] - k[b], graph.input_scale_bits)
            nid = emit(src, kind, (a, b), nodes[a].scale_bits + nodes[b].scale_bits, k[a], excl, role=src.role)
        elif kind in (ADD, SUB):
            xo, yo = src.operands
            xc, yc = old[xo].kind == PLAIN_CONST, old[yo].kind == PLAIN_CONST
            if xc and yc:
                raise RescaleError(f"node {src.id} adds two plaintexts")
            if xc or yc:
                cipher = mapped[yo if xc else xo]
                c = const_for(xo if xc else yo, nodes[cipher].scale_bits, k[cipher])
                ops = (c, cipher) if xc else (cipher, c)
            else:
                ops = equalize_add(mapped[xo], mapped[yo])
            cipher = ops[1] if xc else ops[0]
            nid = emit(src, kind, ops, nodes[cipher].scale_bits, k[cipher], excl, role=src.role)
        elif kind == OUTPUT:
            x = lazy(mapped[src.operands[0]])
            nid = emit(src, kind, (x,), nodes[x].scale_bits, k[x], excl, name=src.name)
        else:
            raise RescaleError(f"unexpected node kind {kind}")
        mapped[src.id] = nid

    budget = max(k, default=0)
    users = [[] for _ in nodes]
    for n in nodes:
        for op in n.operands:
            users[op].append(n.id)
    for n in nodes:
        if n.kind == PLAIN_CONST and users[n.id]:
            n.level = budget - k[users[n.id][0]]
        else:
            n.level = budget - k[n.id]
    out = graph.derived(
        nodes,
        [mapped[o] for o in graph.outputs],
        prime_bits=prime,
        tails={},
    )
    return renumber(out)


def assign_levels(graph: Ddg) -> Ddg:
    """Recompute levels from rescale counts (inputs at the global budget)."""
    order = topological_order(graph)
    k = [0] * len(graph.nodes)
    for i in order:
        node = graph.nodes[i]
        ops = [o for o in node.operands if graph.nodes[o].kind != PLAIN_CONST]
        k[i] = max((k[o] for o in ops), default=0) + (node.kind == RESCALE)
    users = graph.consumers()
    budget = max(k, default=0)
    nodes = []
    for node in graph.nodes:
        if node.kind == PLAIN_CONST and users[node.id]:
            lvl = budget - k[users[node.id][0]]
        else:
            lvl = budget - k[node.id]
        nodes.append(replace(node, level=lvl))
    return graph.derived(nodes, list(graph.outputs))


def eager_rescales(graph: Ddg, waterline_bits: int | None = None) -> Ddg:
    """Baseline placement: rescale right after every multiplication whose
    result reaches the waterline. Used to bound the lazy placement."""
    prime = waterline_bits or graph.prime_bits
    threshold = graph.input_scale_bits + prime
    b = Builder()
    mapped: dict[int, int] = {}
    for src in graph.nodes:
        ops = tuple(mapped[o] for o in src.operands)
        nid = b.emit(src.kind, ops, src.scale_bits, offset=src.offset, value=src.value,
                     name=src.name, layer=src.layer, tag=src.tag, role=src.role)
        if src.kind in MULTIPLICATIONS:
            b.nodes[nid].scale_bits = sum(b.scale(o) for o in ops)
            while b.scale(nid) >= threshold:
                nid = b.emit(RESCALE, (nid,), b.scale(nid) - prime, layer=src.layer)
        elif src.kind in (ROTATE, OUTPUT):
            b.nodes[nid].scale_bits = b.scale(ops[0])
        elif src.kind in (ADD, SUB):
            b.nodes[nid].scale_bits = max(b.scale(o) for o in ops)
        mapped[src.id] = nid
    out = graph.derived(b.nodes, [mapped[o] for o in graph.outputs], prime_bits=prime, tails={})
    return assign_levels(out)


# --------------------------------------------------------------------------
# analyses


@dataclass(frozen=True)
class DepthReport:
    multiplicative_depth: int
    rescale_count_r: int
    critical_path: tuple[int, ...]


def multiplicative_depth(graph: Ddg) -> DepthReport:
    """Longest multiplication chain and largest rescale count over all
    input-to-output paths.

    Raises:
        DdgError: if the graph is cyclic or has dangling operands.
    """
    order = topological_order(graph)
    nodes = graph.nodes
    depth = [-1] * len(nodes)  # -1: not reachable from a ciphertext input
    resc = [0] * len(nodes)
    best_pred = [-1] * len(nodes)
    for i in order:
        node = nodes[i]
        if node.kind == CIPHER_INPUT:
            depth[i] = 0
            continue
        best = None
        for op in node.operands:
            if depth[op] < 0:
                continue
            key = (depth[op], resc[op], -op)
            if best is None or key > best[0]:
                best = (key, op)
        if best is None:
            continue
        op = best[1]
        best_pred[i] = op
        depth[i] = depth[op] + (node.kind in MULTIPLICATIONS)
        resc[i] = max(resc[o] for o in node.operands if depth[o] >= 0) + (node.kind == RESCALE)
    reached = [o for o in graph.outputs if depth[o] >= 0]
    if not reached:
        return DepthReport(0, 0, ())
    end = max(reached, key=lambda o: (depth[o], resc[o], -o))
    path = [end]
    while best_pred[path[-1]] >= 0:
        path.append(best_pred[path[-1]])
    path.reverse()
    return DepthReport(depth[end], max(resc[o] for o in reached), tuple(path))


def validate_ddg(graph: Ddg) -> list[str]:
    """List structural, scale and level violations; empty means valid."""
    out: list[str] = []
    nodes = graph.nodes
    n = len(nodes)
    if not graph.outputs:
        out.append("graph has no outputs")
    for idx, node in enumerate(nodes):
        if node.id != idx:
            out.append(f"node at position {idx} carries id {node.id}")
        if node.kind not in KINDS:
            out.append(f"node {node.id}: unknown kind {node.kind!r}")
            continue
        if len(node.operands) != ARITY[node.kind]:
            out.append(f"node {node.id}: {node.kind} expects {ARITY[node.kind]} operands, has {len(node.operands)}")
        for op in node.operands:
            if not 0 <= op < n:
                out.append(f"node {node.id}: operand {op} does not resolve")
    for o in graph.outputs:
        if not 0 <= o < n or nodes[o].kind != OUTPUT:
            out.append(f"output id {o} is not an Output node")
    if out:
        return out
    try:
        topological_order(graph)
    except DdgError as exc:
        return [str(exc)]

    prime = graph.prime_bits
    for node in nodes:
        ops = [nodes[o] for o in node.operands]
        kind = node.kind
        if kind in (ADD, SUB):
            if ops[0].scale_bits != ops[1].scale_bits:
                out.append(f"node {node.id}: {kind} operand scales {ops[0].scale_bits} != {ops[1].scale_bits}")
            elif node.scale_bits != ops[0].scale_bits:
                out.append(f"node {node.id}: {kind} result scale {node.scale_bits} != operand scale {ops[0].scale_bits}")
        elif kind in MULTIPLICATIONS:
            want = ops[0].scale_bits + ops[1].scale_bits
            if node.scale_bits != want:
                out.append(f"node {node.id}: {kind} scale {node.scale_bits} != sum of operands {want}")
            if kind == MUL_PLAIN and sum(o.kind == PLAIN_CONST for o in ops) != 1:
                out.append(f"node {node.id}: MulPlain needs exactly one PlainConst operand")
        elif kind == RESCALE:
            if node.scale_bits != ops[0].scale_bits - prime:
                out.append(f"node {node.id}: Rescale scale {node.scale_bits} != {ops[0].scale_bits} - {prime}")
            if node.scale_bits < 1:
                out.append(f"node {node.id}: Rescale drives scale to {node.scale_bits}")
        elif kind in (ROTATE, OUTPUT):
            if node.scale_bits != ops[0].scale_bits:
                out.append(f"node {node.id}: {kind} changes scale {ops[0].scale_bits} -> {node.scale_bits}")
        elif kind == CIPHER_INPUT and node.scale_bits < 1:
            out.append(f"node {node.id}: input scale must be positive")
        if kind == PLAIN_CONST and node.scale_bits < 1:
            out.append(f"node {node.id}: constant scale must be positive")

        if node.level is None or kind == PLAIN_CONST:
            continue
        cipher_ops = [o for o in ops if o.kind != PLAIN_CONST]
        for o in cipher_ops:
            if o.level is None:
                continue
            want = o.level - 1 if kind == RESCALE else o.level
            if node.level != want:
                out.append(f"node {node.id}: level {node.level} != expected {want} from operand {o.id}")
        if node.level < 0:
            out.append(f"node {node.id}: negative level {node.level}")

    reach = [False] * n
    for node in nodes:
        if node.kind == CIPHER_INPUT or any(reach[o] for o in node.operands if nodes[o].kind != PLAIN_CONST):
            reach[node.id] = node.kind != PLAIN_CONST
    for o in graph.outputs:
        if not reach[o]:
            out.append(f"output {o} is not reachable from a ciphertext input")
    return out


def op_histogram(graph: Ddg) -> Counter:
    """Counts of HE operations keyed by ``(kind, level)``.

    Inputs, constants and outputs are terminals and are not counted.

    Raises:
        DdgError: if any operation has no level assigned.
    """
    hist: Counter = Counter()
    for node in graph.nodes:
        if node.kind not in OP_KINDS:
            continue
        if node.level is None:
            raise DdgError(f"node {node.id} has no level; run insert_rescales first")
        hist[(node.kind, node.level)] += 1
    return hist


def kind_counts(graph: Ddg) -> Counter:
    return Counter(n.kind for n in graph.nodes)


# --------------------------------------------------------------------------
# dump format


def _encode_value(value):
    if value is None or isinstance(value, str):
        return value
    return str(Fraction(value))


def ddg_to_dict(graph: Ddg, include_vectors: bool = True) -> dict:
    nodes = []
    for n in graph.nodes:
        rec: dict[str, Any] = {
            "id": n.id,
            "kind": n.kind,
            "operands": list(n.operands),
            "scale_bits": n.scale_bits,
            "level": n.level,
        }
        if n.kind == ROTATE:
            rec["offset"] = n.offset
        if n.kind == PLAIN_CONST:
            rec["value"] = _encode_value(n.value)
        if n.name:
            rec["name"] = n.name
        if n.role:
            rec["role"] = n.role
        if n.layer >= 0:
            rec["layer"] = n.layer
        nodes.append(rec)
    doc = {
        "prime_bits": graph.prime_bits,
        "input_scale_bits": graph.input_scale_bits,
        "slots": graph.slots,
        "outputs": list(graph.outputs),
        "nodes": nodes,
    }
    if include_vectors:
        doc["vectors"] = {k: [str(Fraction(v)) for v in vals] for k, vals in sorted(graph.vectors.items())}
    return doc


def ddg_from_dict(doc: dict) -> Ddg:
    nodes = []
    for rec in doc["nodes"]:
        value = rec.get("value")
        if isinstance(value, str) and value not in doc.get("vectors", {}):
            value = Fraction(value)
        nodes.append(
            DdgNode(
                id=rec["id"],
                kind=rec["kind"],
                operands=tuple(rec["operands"]),
                scale_bits=rec["scale_bits"],
                level=rec["level"],
                offset=rec.get("offset", 0),
                value=value,
                name=rec.get("name", ""),
                layer=rec.get("layer", -1),
                role=rec.get("role", ""),
            )
        )
    vectors = {k: tuple(Fraction(v) for v in vals) for k, vals in doc.get("vectors", {}).items()}
    return Ddg(
        nodes=nodes,
        outputs=list(doc["outputs"]),
        prime_bits=doc["prime_bits"],
        input_scale_bits=doc["input_scale_bits"],
        slots=doc.get("slots", 1),
        vectors=vectors,
    )


def dump_ddg(graph: Ddg, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ddg_to_dict(graph), fh, separators=(",", ":"), sort_keys=False)
        fh.write("\n")
