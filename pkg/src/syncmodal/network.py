"""Interconnected-system assembly.

This module joins per-converter small-signal blocks with the passive
network they feed.  Nodes carry dq (width 2), dc (width 1), or sync
(width 1) signals; passive elements stamp a node-admittance matrix
exactly like a classic nodal analysis, and each converter contributes
its four-port feedback block plus the forward path of its
synchronization loop.  The system splits into

* ``z_net``  -- the network seen by the converter feedback ports, the
  inverse of the stamped node admittance with the *negative* sync
  forward admittance on each sync diagonal, and
* ``y_con``  -- the block-diagonal converter feedback, permuted into
  the global node ordering.

The product of their per-unit forms is the voltage-loop gain whose
-1 crossings are the oscillatory modes of the interconnected system.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .lti import (DEFAULT_COND_CAP, DimensionMismatch, TransferMatrix as TM,
                  _inv_checked)
from .converter import (ConverterSpec, FourPortEim, OperatingPoint,
                        EIM_PARTITIONS, build_eim, dq_rl_admittance)

__all__ = [
    "NODE_WIDTHS",
    "Node",
    "NodeTable",
    "Shunt",
    "Branch",
    "ac_grid_shunt",
    "dc_capacitor",
    "dc_line",
    "Attachment",
    "attach_converter",
    "EinSystem",
    "stamped_admittance",
    "assemble_znet",
    "assemble_ycon",
    "per_unit",
    "loop_gain",
    "closed_loop_voltage",
]


NODE_WIDTHS = {"sync": 1, "ac": 2, "dc": 1}


@dataclass(frozen=True)
class Node:
    """One node of the interconnected system.

    ``kind`` fixes the signal width: ac nodes carry a dq voltage pair,
    dc nodes a single voltage, sync nodes the frequency deviation of
    one converter's synchronization loop.
    """

    node_id: int
    kind: Literal["sync", "ac", "dc"]
    label: str = ""

    def __post_init__(self):
        if self.kind not in NODE_WIDTHS:
            raise ValueError(f"unknown node kind {self.kind!r}")

    @property
    def width(self) -> int:
        return NODE_WIDTHS[self.kind]

    @property
    def name(self) -> str:
        return self.label or f"node{self.node_id}"


class NodeTable:
    """Ordered node set; global signal indices ascend with node id.

    An ac node occupies two adjacent indices (d before q).
    """

    def __init__(self, nodes: Sequence[Node]):
        nodes = sorted(nodes, key=lambda n: n.node_id)
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate node ids in {ids}")
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self._by_id = {n.node_id: n for n in nodes}
        self._offset: dict[int, int] = {}
        pos = 0
        for n in nodes:
            self._offset[n.node_id] = pos
            pos += n.width
        self.total_width = pos

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._by_id

    def node(self, node_id: int) -> Node:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise KeyError(f"no node with id {node_id}") from None

    def offset(self, node_id: int) -> int:
        self.node(node_id)
        return self._offset[node_id]

    def span(self, node_id: int) -> list[int]:
        n = self.node(node_id)
        off = self._offset[node_id]
        return list(range(off, off + n.width))

    def signal_labels(self) -> list[str]:
        """One label per global index, for report and CSV headers."""
        out: list[str] = []
        for n in self.nodes:
            if n.kind == "ac":
                out.extend([f"{n.name}_d", f"{n.name}_q"])
            else:
                out.append(n.name)
        return out


# ---------------------------------------------------------------------------
# Passive elements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Shunt:
    """Admittance from one node to the reference."""

    label: str
    node_id: int
    y: TM
    group: str = ""


@dataclass(frozen=True)
class Branch:
    """Admittance between two nodes of equal width."""

    label: str
    node_a: int
    node_b: int
    y: TM
    group: str = ""


def ac_grid_shunt(label: str, node_id: int, r: float, l: float,
                  w_nom: float, group: str = "") -> Shunt:
    """Stiff source behind an R-L link, as a dq shunt admittance.

    With the ideal source grounded for small signals the link appears
    as a 2x2 shunt at the connection node.
    """
    if l <= 0 or r < 0:
        raise ValueError("grid link needs l > 0 and r >= 0")
    return Shunt(label, node_id, dq_rl_admittance(r, l, w_nom), group)


def dc_capacitor(label: str, node_id: int, c: float, group: str = "") -> Shunt:
    if c <= 0:
        raise ValueError("capacitance must be positive")
    return Shunt(label, node_id, TM.rational([c, 0.0], [1.0]), group)


def dc_line(label: str, node_a: int, node_b: int, r: float, l: float,
            group: str = "") -> Branch:
    if l <= 0 or r < 0:
        raise ValueError("dc line needs l > 0 and r >= 0")
    return Branch(label, node_a, node_b, TM.rational([1.0], [l, r]), group)


# ---------------------------------------------------------------------------
# Converter attachment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Attachment:
    """One converter bound to its (sync, ac, dc) nodes."""

    label: str
    spec: ConverterSpec
    eim: FourPortEim
    sync_node: int
    ac_node: int
    dc_node: int


def attach_converter(label: str, spec: ConverterSpec, op: OperatingPoint, *,
                     sync_node: int, ac_node: int, dc_node: int,
                     cond_cap: float = DEFAULT_COND_CAP) -> Attachment:
    """Build the converter block at ``op`` and bind it to its nodes."""
    eim = build_eim(spec, op, cond_cap)
    return Attachment(label, spec, eim, sync_node, ac_node, dc_node)


# ---------------------------------------------------------------------------
# Stamping
# ---------------------------------------------------------------------------

def _element_spans(table: NodeTable, el) -> list[list[int]]:
    if isinstance(el, Shunt):
        return [table.span(el.node_id)]
    return [table.span(el.node_a), table.span(el.node_b)]


def stamped_admittance(table: NodeTable, elements: Sequence,
                       converters: Sequence[Attachment] = ()) -> TM:
    """Node-admittance matrix of the passive network.

    Shunts add on their diagonal block; branches add the usual
    (+y, +y, -y, -y) pattern.  Each converter stamps the *negative* of
    its sync forward admittance on its sync diagonal, which closes the
    synchronization loop once the converter feedback block is wired in.
    """
    n = table.total_width
    plan: list[tuple] = []
    for el in elements:
        spans = _element_spans(table, el)
        w = el.y.shape[0]
        if el.y.shape != (w, w):
            raise DimensionMismatch(f"element {el.label!r} admittance must be "
                                    f"square, got {el.y.shape}")
        for sp in spans:
            if len(sp) != w:
                raise DimensionMismatch(
                    f"element {el.label!r} (width {w}) does not match node "
                    f"width {len(sp)}")
        if isinstance(el, Shunt):
            plan.append((el.y, [(spans[0], spans[0], 1.0)]))
        else:
            sa, sb = spans
            plan.append((el.y, [(sa, sa, 1.0), (sb, sb, 1.0),
                                (sa, sb, -1.0), (sb, sa, -1.0)]))
    sync_plan = [(table.offset(c.sync_node), c.eim.z_sync_fo)
                 for c in converters]

    def fn(s: complex) -> np.ndarray:
        m = np.zeros((n, n), dtype=complex)
        for tm, places in plan:
            y = tm.eval(s)
            for rows, cols, sgn in places:
                m[np.ix_(rows, cols)] += sgn * y
        for pos, z_fo in sync_plan:
            m[pos, pos] -= 1.0 / z_fo.eval(s)[0, 0]
        return m

    return TM.from_callable(n, n, fn)


def _global_ports(table: NodeTable, conv: Attachment) -> list[int]:
    """Global indices of the converter's (sync, ac_d, ac_q, dc) ports."""
    ac = table.span(conv.ac_node)
    return [table.offset(conv.sync_node), ac[0], ac[1],
            table.offset(conv.dc_node)]


# ---------------------------------------------------------------------------
# Assembled system
# ---------------------------------------------------------------------------

class EinSystem:
    """Converters plus passive network, ready for modal analysis.

    Validation enforces the structural rules: sync nodes carry exactly
    one converter and no passive element, converter ports land on nodes
    of the matching kind, and every node has a consistent per-unit base
    (from its converters, or from ``extra_bases`` for nodes no
    converter touches).
    """

    def __init__(self, nodes: NodeTable | Sequence[Node],
                 elements: Sequence = (),
                 converters: Sequence[Attachment] = (),
                 extra_bases: dict[int, tuple[float, float]] | None = None,
                 cond_cap: float = DEFAULT_COND_CAP):
        table = nodes if isinstance(nodes, NodeTable) else NodeTable(nodes)
        self.nodes = table
        self.elements = tuple(elements)
        self.converters = tuple(converters)
        self.cond_cap = cond_cap

        labels = [c.label for c in self.converters]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate converter labels in {labels}")
        sync_ids = set()
        for el in self.elements:
            ids = ([el.node_id] if isinstance(el, Shunt)
                   else [el.node_a, el.node_b])
            for nid in ids:
                if table.node(nid).kind == "sync":
                    raise ValueError(
                        f"element {el.label!r} touches sync node {nid}; "
                        f"sync nodes carry only their converter")
            _element_spans(table, el)
        for c in self.converters:
            for nid, kind in ((c.sync_node, "sync"), (c.ac_node, "ac"),
                              (c.dc_node, "dc")):
                if table.node(nid).kind != kind:
                    raise ValueError(
                        f"converter {c.label!r} binds its {kind} port to "
                        f"node {nid} of kind {table.node(nid).kind!r}")
            if c.sync_node in sync_ids:
                raise ValueError(f"sync node {c.sync_node} used twice")
            sync_ids.add(c.sync_node)

        self.u_base, self.i_base = self._bases(extra_bases or {})
        self.y_stamp = stamped_admittance(table, self.elements,
                                          self.converters)
        self.z_net = self.y_stamp.inv(cond_cap)
        self.y_con = self._assemble_ycon()
        d_u = TM.constant(np.diag(self.u_base))
        d_u_inv = TM.constant(np.diag(1.0 / self.u_base))
        d_i = TM.constant(np.diag(self.i_base))
        d_i_inv = TM.constant(np.diag(1.0 / self.i_base))
        self.z_net_pu = d_u_inv @ self.z_net @ d_i
        self.y_con_pu = d_i_inv @ self.y_con @ d_u
        self.loop = self.z_net_pu @ self.y_con_pu
        self.z_components = self._z_components()
        self.y_components = self._y_components()

    # -- bases ------------------------------------------------------------

    def _bases(self, extra: dict[int, tuple[float, float]]
               ) -> tuple[np.ndarray, np.ndarray]:
        n = self.nodes.total_width
        u_b = np.zeros(n)
        i_b = np.zeros(n)

        def put(nid: int, ub: float, ib: float, who: str):
            for k in self.nodes.span(nid):
                if u_b[k] != 0.0 and not (
                        np.isclose(u_b[k], ub, rtol=1e-9)
                        and np.isclose(i_b[k], ib, rtol=1e-9)):
                    raise ValueError(
                        f"conflicting per-unit bases at node {nid} ({who})")
                u_b[k], i_b[k] = ub, ib

        for c in self.converters:
            base = c.spec.base
            w_b, sync_i = c.spec.sync_bases()
            put(c.sync_node, w_b, sync_i, c.label)
            put(c.ac_node, base.v_ac, base.i_ac, c.label)
            put(c.dc_node, base.v_dc, base.i_dc, c.label)
        for nid, (ub, ib) in extra.items():
            put(nid, ub, ib, "extra_bases")
        if np.any(u_b == 0.0) or np.any(i_b == 0.0):
            missing = [n.node_id for n in self.nodes.nodes
                       if any(u_b[k] == 0.0 for k in self.nodes.span(n.node_id))]
            raise ValueError(f"no per-unit base for nodes {missing}; attach a "
                             f"converter or pass extra_bases")
        return u_b, i_b

    # -- converter feedback ------------------------------------------------

    def _assemble_ycon(self) -> TM:
        n = self.nodes.total_width
        scatter = [(np.array(_global_ports(self.nodes, c)), c.eim.y)
                   for c in self.converters]

        def fn(s: complex) -> np.ndarray:
            m = np.zeros((n, n), dtype=complex)
            for gidx, tm in scatter:
                m[np.ix_(gidx, gidx)] += tm.eval(s)
            return m

        return TM.from_callable(n, n, fn)

    # -- named component footprints -----------------------------------------

    def _z_components(self) -> dict[str, list[tuple[int, int]]]:
        comps: list[tuple[int, str, list[tuple[int, int]]]] = []
        for c in self.converters:
            p = self.nodes.offset(c.sync_node)
            comps.append((p, f"z_sync_{c.label}", [(p, p)]))

        # Electrically connected elements form one component each: their
        # entries cannot be perturbed independently of one another.
        parent: dict[int, int] = {}

        def find(a: int) -> int:
            while parent.setdefault(a, a) != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a: int, b: int):
            parent[find(a)] = find(b)

        el_nodes: list[list[int]] = []
        for el in self.elements:
            ids = ([el.node_id] if isinstance(el, Shunt)
                   else [el.node_a, el.node_b])
            el_nodes.append(ids)
            for nid in ids:
                find(nid)
            for nid in ids[1:]:
                union(ids[0], nid)
        groups: dict[int, dict] = {}
        for el, ids in zip(self.elements, el_nodes):
            root = find(ids[0])
            g = groups.setdefault(root, {"nodes": set(), "tags": [],
                                         "labels": []})
            g["nodes"].update(ids)
            if el.group:
                g["tags"].append(el.group)
            g["labels"].append(el.label)
        for g in groups.values():
            names = sorted(set(g["tags"])) or sorted(set(g["labels"]))
            name = "+".join(names)
            idx = sorted(k for nid in g["nodes"]
                         for k in self.nodes.span(nid))
            entries = [(i, j) for i in idx for j in idx]
            comps.append((idx[0], f"z_{name}", entries))

        comps.sort(key=lambda c: (c[0], c[1]))
        out: dict[str, list[tuple[int, int]]] = {}
        for _, name, entries in comps:
            if name in out:
                raise ValueError(f"duplicate component name {name!r}")
            out[name] = entries
        return out

    def _y_components(self) -> dict[str, list[tuple[int, int]]]:
        comps: list[tuple[int, str, list[tuple[int, int]]]] = []
        for c in self.converters:
            gidx = _global_ports(self.nodes, c)
            for part, (rows, cols) in EIM_PARTITIONS.items():
                entries = [(gidx[r], gidx[c2]) for r in rows for c2 in cols]
                first = min(min(i, j) for i, j in entries)
                comps.append((first, f"{part}_{c.label}", entries))
        comps.sort(key=lambda c: (c[0], c[1]))
        return {name: entries for _, name, entries in comps}


# ---------------------------------------------------------------------------
# Spec-level operations
# ---------------------------------------------------------------------------

def assemble_znet(sys: EinSystem) -> TM:
    """Network matrix mapping injected node currents to node voltages."""
    return sys.z_net


def assemble_ycon(sys: EinSystem) -> TM:
    """Converter feedback mapping node voltages to drawn currents."""
    return sys.y_con


def per_unit(sys: EinSystem, z: TM | None = None,
             y: TM | None = None) -> tuple[TM, TM]:
    """Base-scaled ``(U_b^-1 z I_b, I_b^-1 y U_b)``.

    Defaults to the system's own network and converter matrices; their
    scaled product is the dimensionless loop gain.
    """
    if z is None and y is None:
        return sys.z_net_pu, sys.y_con_pu
    z = sys.z_net if z is None else z
    y = sys.y_con if y is None else y
    d_u = TM.constant(np.diag(sys.u_base))
    d_u_inv = TM.constant(np.diag(1.0 / sys.u_base))
    d_i = TM.constant(np.diag(sys.i_base))
    d_i_inv = TM.constant(np.diag(1.0 / sys.i_base))
    return d_u_inv @ z @ d_i, d_i_inv @ y @ d_u


def loop_gain(sys: EinSystem) -> TM:
    """Voltage-loop gain ``z_net_pu @ y_con_pu``."""
    return sys.loop


def closed_loop_voltage(sys: EinSystem, i_node: np.ndarray,
                        s: complex) -> np.ndarray:
    """Node-voltage response ``[I + Z Y]^-1 Z i_node`` (SI units).

    Raises :class:`SingularAtS` when ``s`` sits on (or numerically at)
    a mode of the interconnected system.
    """
    i_vec = np.asarray(i_node, dtype=complex).reshape(-1)
    n = sys.nodes.total_width
    if i_vec.size != n:
        raise DimensionMismatch(f"need {n} injection entries, got {i_vec.size}")
    z = sys.z_net.eval(s)
    y = sys.y_con.eval(s)
    a = np.eye(n, dtype=complex) + z @ y
    return _inv_checked(a, s, sys.cond_cap) @ (z @ i_vec)
