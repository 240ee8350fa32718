"""Strict text configuration for two-terminal converter link studies.

A config file describes one grid-forming/grid-following pair joined by
a dc line, the ac grids behind them, and the analysis/scan settings.
``cases`` lists named single-value overrides (dotted paths into the
baseline tree), so one file carries a baseline and its what-if studies.

The schema is closed: unknown keys fail with their dotted path, every
physical quantity is checked for the right sign, and each converter
carries exactly one ``sync`` section whose keys must match its kind.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import yaml

from .converter import (
    BaseValues,
    ConverterSpec,
    GflControl,
    GfmControl,
    PiGains,
    TerminalConditions,
)
from .network import (
    EinSystem,
    Node,
    ac_grid_shunt,
    attach_converter,
    dc_capacitor,
    dc_line,
)
from .simlab import DcLink, GridThevenin, build_consistent_hvdc

__all__ = [
    "ConfigError",
    "CaseConfig",
    "LinkSystem",
    "load_config",
    "loads_config",
    "default_config_text",
    "validate_tree",
    "scr_to_rl",
    "build_link",
]

BUNDLED_CONFIG = "testcase.yaml"


class ConfigError(ValueError):
    """A config file violated the schema; ``path`` is the dotted key."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# ---------------------------------------------------------------------------
# schema primitives
# ---------------------------------------------------------------------------

def _section(tree: dict, path: str, key: str) -> dict:
    try:
        sub = tree[key]
    except KeyError:
        raise ConfigError(_join(path, key), "missing required section")
    if not isinstance(sub, dict):
        raise ConfigError(_join(path, key), "expected a table of keys")
    return sub


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _no_extras(tree: dict, path: str, allowed: set[str]):
    for key in tree:
        if key not in allowed:
            raise ConfigError(_join(path, str(key)), "unknown key")


def _num(tree: dict, path: str, key: str, *, positive=False,
         nonnegative=False) -> float:
    if key not in tree:
        raise ConfigError(_join(path, key), "missing required value")
    val = tree[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(_join(path, key), f"expected a number, got {val!r}")
    val = float(val)
    if not math.isfinite(val):
        raise ConfigError(_join(path, key), "must be finite")
    if positive and val <= 0:
        raise ConfigError(_join(path, key), f"must be > 0, got {val}")
    if nonnegative and val < 0:
        raise ConfigError(_join(path, key), f"must be >= 0, got {val}")
    return val


def _int(tree: dict, path: str, key: str, *, minimum: int) -> int:
    if key not in tree:
        raise ConfigError(_join(path, key), "missing required value")
    val = tree[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(_join(path, key),
                          f"expected an integer, got {val!r}")
    if val < minimum:
        raise ConfigError(_join(path, key), f"must be >= {minimum}, got {val}")
    return val


def _name(tree: dict, path: str, key: str, choices=None) -> str:
    if key not in tree:
        raise ConfigError(_join(path, key), "missing required value")
    val = tree[key]
    if not isinstance(val, str) or not val:
        raise ConfigError(_join(path, key), f"expected a name, got {val!r}")
    if choices is not None and val not in choices:
        raise ConfigError(_join(path, key),
                          f"must be one of {sorted(choices)}, got {val!r}")
    return val


# ---------------------------------------------------------------------------
# tree validation
# ---------------------------------------------------------------------------

_SYNC_KEYS = {"gfm": {"j_pu", "d_pu"}, "gfl": {"f_pll_hz", "zeta_pll"}}
_CONTROL_KEYS = {"gfm": {"r_vir_pu", "l_vir_pu"},
                 "gfl": {"dc_kp", "dc_ki", "pq_kp", "pq_ki"}}


def _validate_converter(tree: dict, path: str):
    _no_extras(tree, path, {"kind", "p_set_pu", "q_set_pu", "circuit",
                            "current", "sync", "control"})
    kind = _name(tree, path, "kind", choices={"gfm", "gfl"})
    _num(tree, path, "p_set_pu")
    _num(tree, path, "q_set_pu")

    circuit = _section(tree, path, "circuit")
    cpath = _join(path, "circuit")
    _no_extras(circuit, cpath, {"r_filter_pu", "l_filter_pu", "t_delay_s"})
    _num(circuit, cpath, "r_filter_pu", nonnegative=True)
    _num(circuit, cpath, "l_filter_pu", positive=True)
    _num(circuit, cpath, "t_delay_s", nonnegative=True)

    current = _section(tree, path, "current")
    upath = _join(path, "current")
    _no_extras(current, upath, {"bandwidth_hz", "zero_hz"})
    _num(current, upath, "bandwidth_hz", positive=True)
    _num(current, upath, "zero_hz", positive=True)

    sync = _section(tree, path, "sync")
    spath = _join(path, "sync")
    _no_extras(sync, spath, _SYNC_KEYS[kind])
    for key in sorted(_SYNC_KEYS[kind]):
        _num(sync, spath, key, positive=True)

    control = _section(tree, path, "control")
    kpath = _join(path, "control")
    _no_extras(control, kpath, _CONTROL_KEYS[kind])
    for key in sorted(_CONTROL_KEYS[kind]):
        _num(control, kpath, key, nonnegative=True)


def _validate_grid(tree: dict, path: str, converters: set[str]):
    _no_extras(tree, path, {"converter", "scr", "x_over_r", "r_ohm", "l_h"})
    _name(tree, path, "converter", choices=converters)
    by_scr = "scr" in tree or "x_over_r" in tree
    by_rl = "r_ohm" in tree or "l_h" in tree
    if by_scr == by_rl:
        raise ConfigError(path, "give either scr (+ optional x_over_r) "
                                "or r_ohm and l_h, not both")
    if by_scr:
        _num(tree, path, "scr", positive=True)
        if "x_over_r" in tree:
            _num(tree, path, "x_over_r", positive=True)
    else:
        _num(tree, path, "r_ohm", nonnegative=True)
        _num(tree, path, "l_h", positive=True)


def _validate_tree(tree: dict):
    if not isinstance(tree, dict):
        raise ConfigError("", "top level must be a mapping")
    _no_extras(tree, "", {"base", "converters", "network", "analysis",
                          "scan", "cases"})

    base = _section(tree, "", "base")
    _no_extras(base, "base", {"s_rated_va", "v_ac_ll_rms", "v_dc",
                              "f_nom_hz"})
    for key in ("s_rated_va", "v_ac_ll_rms", "v_dc", "f_nom_hz"):
        _num(base, "base", key, positive=True)

    convs = _section(tree, "", "converters")
    if len(convs) != 2:
        raise ConfigError("converters",
                          f"expected exactly 2 converters, got {len(convs)}")
    for name, sub in convs.items():
        if not isinstance(sub, dict):
            raise ConfigError(_join("converters", name),
                              "expected a table of keys")
        _validate_converter(sub, _join("converters", name))
    names = set(convs)

    net = _section(tree, "", "network")
    _no_extras(net, "network", {"ac_grid_1", "ac_grid_2", "dc_link"})
    g1 = _section(net, "network", "ac_grid_1")
    g2 = _section(net, "network", "ac_grid_2")
    _validate_grid(g1, "network.ac_grid_1", names)
    _validate_grid(g2, "network.ac_grid_2", names)
    if g1["converter"] == g2["converter"]:
        raise ConfigError("network.ac_grid_2.converter",
                          "both ac grids feed the same converter")
    dc = _section(net, "network", "dc_link")
    _no_extras(dc, "network.dc_link", {"send", "recv", "c_send_f",
                                       "c_recv_f", "r_line_ohm", "l_line_h"})
    send = _name(dc, "network.dc_link", "send", choices=names)
    recv = _name(dc, "network.dc_link", "recv", choices=names)
    if send == recv:
        raise ConfigError("network.dc_link.recv",
                          "send and recv must differ")
    _num(dc, "network.dc_link", "c_send_f", positive=True)
    _num(dc, "network.dc_link", "c_recv_f", positive=True)
    _num(dc, "network.dc_link", "r_line_ohm", nonnegative=True)
    _num(dc, "network.dc_link", "l_line_h", positive=True)

    ana = _section(tree, "", "analysis")
    _no_extras(ana, "analysis", {"f_min_hz", "f_max_hz", "grid_points",
                                 "capture_radius", "increment"})
    f_lo = _num(ana, "analysis", "f_min_hz", positive=True)
    f_hi = _num(ana, "analysis", "f_max_hz", positive=True)
    if f_hi <= f_lo:
        raise ConfigError("analysis.f_max_hz",
                          f"must exceed f_min_hz, got {f_hi} <= {f_lo}")
    _int(ana, "analysis", "grid_points", minimum=2)
    _num(ana, "analysis", "capture_radius", positive=True)
    if "increment" in ana:
        inc = _num(ana, "analysis", "increment", positive=True)
        if inc > 0.2:
            raise ConfigError("analysis.increment",
                              f"must be <= 0.2, got {inc}")

    scan = _section(tree, "", "scan")
    _no_extras(scan, "scan", {"f_min_hz", "f_max_hz", "points", "amp_rel"})
    s_lo = _num(scan, "scan", "f_min_hz", positive=True)
    s_hi = _num(scan, "scan", "f_max_hz", positive=True)
    if s_hi < s_lo:
        raise ConfigError("scan.f_max_hz",
                          f"must be >= f_min_hz, got {s_hi} < {s_lo}")
    _int(scan, "scan", "points", minimum=1)
    _num(scan, "scan", "amp_rel", nonnegative=True)

    cases = tree.get("cases", {})
    if not isinstance(cases, dict):
        raise ConfigError("cases", "expected a table of named cases")
    for cname, overrides in cases.items():
        cpath = _join("cases", str(cname))
        if not isinstance(overrides, dict) or not overrides:
            raise ConfigError(cpath, "expected a non-empty table of "
                                     "dotted-path overrides")
        for dotted, value in overrides.items():
            _check_override(tree, cpath, str(dotted), value)


def _check_override(tree: dict, cpath: str, dotted: str, value):
    """An override must point at an existing scalar of matching type."""
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(_join(cpath, dotted),
                              "path not found in the baseline")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(_join(cpath, dotted),
                          "path not found in the baseline")
    old = node[leaf]
    if isinstance(old, dict):
        raise ConfigError(_join(cpath, dotted),
                          "override must target a scalar, not a section")
    if isinstance(old, bool) or isinstance(value, bool):
        raise ConfigError(_join(cpath, dotted), "booleans are not overridable")
    if isinstance(old, (int, float)):
        if not isinstance(value, (int, float)):
            raise ConfigError(_join(cpath, dotted),
                              f"expected a number, got {value!r}")
    elif not isinstance(value, type(old)):
        raise ConfigError(_join(cpath, dotted),
                          f"expected {type(old).__name__}, got {value!r}")


def validate_tree(tree: dict):
    """Re-check a tree after programmatic edits (e.g. command-line flags)."""
    _validate_tree(tree)


def _apply_overrides(tree: dict, overrides: dict) -> dict:
    out = copy.deepcopy(tree)
    out.pop("cases", None)
    for dotted, value in overrides.items():
        node = out
        parts = str(dotted).split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    _validate_tree(out)
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseConfig:
    """A validated baseline tree plus its named override cases."""

    tree: dict
    cases: dict[str, dict]

    def case_names(self) -> list[str]:
        return list(self.cases)

    def resolve(self, case: str | None = None) -> dict:
        """Baseline tree (``None``) or a case tree with overrides applied."""
        if case is None:
            out = copy.deepcopy(self.tree)
            out.pop("cases", None)
            return out
        if case not in self.cases:
            raise ConfigError(_join("cases", case), "no such case")
        return _apply_overrides(self.tree, self.cases[case])


def loads_config(text: str) -> CaseConfig:
    """Parse and validate config text."""
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError("", f"not valid YAML{where}: {exc}") from exc
    if tree is None:
        raise ConfigError("", "empty config")
    _validate_tree(tree)
    cases = {str(k): dict(v) for k, v in tree.get("cases", {}).items()}
    return CaseConfig(tree=tree, cases=cases)


def load_config(path: str) -> CaseConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_config(fh.read())


def default_config_text() -> str:
    """Text of the bundled testcase config."""
    return (resources.files("syncmodal") / "data"
            / BUNDLED_CONFIG).read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# physical construction
# ---------------------------------------------------------------------------

def scr_to_rl(v_ll_rms: float, s_rated: float, w_nom: float, scr: float,
              x_over_r: float = 10.0) -> tuple[float, float]:
    """Grid Thevenin (R, L) from a short-circuit ratio at the rated bus."""
    z = v_ll_rms * v_ll_rms / (scr * s_rated)
    x = z * x_over_r / math.hypot(1.0, x_over_r)
    return x / x_over_r, x / w_nom


def _grid_rl(gtree: dict, base: BaseValues) -> tuple[float, float]:
    if "scr" in gtree:
        v_ll = base.v_ac * math.sqrt(1.5)
        return scr_to_rl(v_ll, base.s_rated, base.w_nom, gtree["scr"],
                         gtree.get("x_over_r", 10.0))
    return float(gtree["r_ohm"]), float(gtree["l_h"])


def _base_values(tree: dict) -> BaseValues:
    b = tree["base"]
    v_peak = b["v_ac_ll_rms"] * math.sqrt(2.0 / 3.0)
    i_peak = 2.0 * b["s_rated_va"] / (3.0 * v_peak)
    return BaseValues(v_ac=v_peak, i_ac=i_peak, v_dc=b["v_dc"],
                      i_dc=b["s_rated_va"] / b["v_dc"],
                      s_rated=b["s_rated_va"],
                      w_nom=2.0 * math.pi * b["f_nom_hz"])


def _converter_spec(ctree: dict, base: BaseValues) -> ConverterSpec:
    z_b = base.v_ac / base.i_ac
    l_f = ctree["circuit"]["l_filter_pu"] * z_b / base.w_nom
    kp_cc = 2.0 * math.pi * ctree["current"]["bandwidth_hz"] * l_f
    cc = PiGains(kp=kp_cc,
                 ki=kp_cc * 2.0 * math.pi * ctree["current"]["zero_hz"])
    sync, ctl = ctree["sync"], ctree["control"]
    if ctree["kind"] == "gfm":
        control = GfmControl(
            j_sync=sync["j_pu"] * base.s_rated / base.w_nom,
            d_sync=sync["d_pu"] * base.s_rated / base.w_nom,
            r_vir=ctl["r_vir_pu"] * z_b,
            l_vir=ctl["l_vir_pu"] * z_b / base.w_nom)
    else:
        wn = 2.0 * math.pi * sync["f_pll_hz"]
        control = GflControl(
            pll=PiGains(kp=2.0 * sync["zeta_pll"] * wn / base.v_ac,
                        ki=wn * wn / base.v_ac),
            dc_loop=PiGains(kp=ctl["dc_kp"], ki=ctl["dc_ki"]),
            pq_loop=PiGains(kp=ctl["pq_kp"], ki=ctl["pq_ki"]))
    return ConverterSpec(
        kind=ctree["kind"],
        r_f=ctree["circuit"]["r_filter_pu"] * z_b,
        l_f=l_f,
        t_delay=ctree["circuit"]["t_delay_s"],
        current_loop=cc,
        control=control,
        base=base)


def _terminal(ctree: dict, base: BaseValues) -> TerminalConditions:
    return TerminalConditions(u_mag=base.v_ac,
                              p=ctree["p_set_pu"] * base.s_rated,
                              q=ctree["q_set_pu"] * base.s_rated,
                              v_dc=base.v_dc)


@dataclass(frozen=True)
class LinkSystem:
    """Everything built from one resolved config tree."""

    model: object
    x_eq: np.ndarray
    system: EinSystem
    specs: dict[str, ConverterSpec]
    ops: dict[str, object]
    order: tuple[str, str]


def build_link(tree: dict) -> LinkSystem:
    """Self-consistent link model and its small-signal network."""
    base = _base_values(tree)
    net = tree["network"]
    send = net["dc_link"]["send"]
    recv = net["dc_link"]["recv"]
    specs = {name: _converter_spec(sub, base)
             for name, sub in tree["converters"].items()}
    terms = {name: _terminal(sub, base)
             for name, sub in tree["converters"].items()}
    grid_of = {net["ac_grid_1"]["converter"]: (net["ac_grid_1"], "ac_grid_1"),
               net["ac_grid_2"]["converter"]: (net["ac_grid_2"], "ac_grid_2")}
    r_s, l_s = _grid_rl(grid_of[send][0], base)
    r_r, l_r = _grid_rl(grid_of[recv][0], base)
    dc = net["dc_link"]
    model, x_eq = build_consistent_hvdc(
        specs[send], specs[recv], terms[send], terms[recv],
        GridThevenin(r=r_s, l=l_s), GridThevenin(r=r_r, l=l_r),
        DcLink(c_send=dc["c_send_f"], c_recv=dc["c_recv_f"],
               r_line=dc["r_line_ohm"], l_line=dc["l_line_h"]))
    op_send, op_recv = model.operating_points(x_eq)
    ops = {send: op_send, recv: op_recv}

    nodes = [Node(1, "sync", f"{send}_sync"), Node(2, "ac", f"{send}_ac"),
             Node(3, "dc", f"{send}_dc"), Node(4, "dc", f"{recv}_dc"),
             Node(5, "ac", f"{recv}_ac"), Node(6, "sync", f"{recv}_sync")]
    elements = [
        ac_grid_shunt(grid_of[send][1], 2, r_s, l_s, base.w_nom),
        dc_capacitor("cap_send", 3, dc["c_send_f"], group="dc_link"),
        dc_line("line", 3, 4, dc["r_line_ohm"], dc["l_line_h"],
                group="dc_link"),
        dc_capacitor("cap_recv", 4, dc["c_recv_f"], group="dc_link"),
        ac_grid_shunt(grid_of[recv][1], 5, r_r, l_r, base.w_nom),
    ]
    system = EinSystem(nodes, elements, [
        attach_converter(send, specs[send], op_send,
                         sync_node=1, ac_node=2, dc_node=3),
        attach_converter(recv, specs[recv], op_recv,
                         sync_node=6, ac_node=5, dc_node=4),
    ])
    return LinkSystem(model=model, x_eq=x_eq, system=system, specs=specs,
                      ops=ops, order=(send, recv))
