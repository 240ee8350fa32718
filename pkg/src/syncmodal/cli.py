"""Command-line front end for link studies driven by a config file.

Four subcommands cover the workflow end to end:

``build``
    Evaluate each converter's four-port admittance on a frequency grid
    and write magnitude/phase tables in both the dq and the modified
    sequence frames.
``scan``
    Measure the same four-port admittance by simulated injection
    experiments and write measured-versus-model overlay tables plus a
    worst-error summary per entry.
``analyze``
    Search the interconnection for modes; report verdict, frequency and
    damping per mode, the per-node participation table, and the
    component sensitivity table (with prediction-versus-perturbation
    validation when an increment is configured).
``oracle``
    Cross-check the mode analysis against a state-space linearization
    and a nonlinear time simulation; disagreement exits nonzero.

All file outputs are deterministic: fixed float formats, no
timestamps.  Exit codes: 0 success, 2 config error, 3 oracle
disagreement, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (
    CaseConfig,
    ConfigError,
    build_link,
    default_config_text,
    load_config,
    loads_config,
    validate_tree,
)
from .converter import dq_to_modified_sequence
from .lti import DefectiveMatrix, SingularAtS
from .modal import (
    EigenTrackLost,
    ModalOptions,
    NewtonDiverged,
    NoCapture,
    analyze_mode,
    find_modes,
)
from .scan import (
    SCAN_PORT_ORDER_DQ,
    SCAN_PORT_ORDER_SEQ,
    AmplitudeZero,
    IllConditionedScan,
    ScanOptions,
    eim_to_scan_order,
    scan_eim,
)
from .simlab import NoConvergence, NumericalBlowup, linearize_ss, simulate

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_NUMERIC = 4

_NUMERIC_ERRORS = (AmplitudeZero, IllConditionedScan, NewtonDiverged,
                   EigenTrackLost, DefectiveMatrix, SingularAtS,
                   NumericalBlowup, NoConvergence)

# Time step and horizon of the oracle simulation.  The step clears the
# stability bound of the delay approximation poles with margin; the
# horizon gives sub-3% frequency resolution at the slowest modes of
# interest while staying in the small-signal regime for typical growth
# rates.
SIM_DT = 2.5e-5
SIM_T_END = 0.6
SIM_KICK = 1e-6


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(f"wrote {path}")
    return path


def _csv(header: list[str], rows: list[list[str]]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _load(args) -> CaseConfig:
    if args.config is None:
        return loads_config(default_config_text())
    return load_config(args.config)


def _apply_flags(tree: dict, args, section: str):
    """Fold command-line overrides into one settings section."""
    sec = tree[section]
    if args.freq_min is not None:
        sec["f_min_hz"] = args.freq_min
    if args.freq_max is not None:
        sec["f_max_hz"] = args.freq_max
    if args.grid_points is not None:
        sec["grid_points" if section == "analysis" else "points"] = \
            args.grid_points
    if section == "analysis" and args.increment is not None:
        sec["increment"] = args.increment
    validate_tree(tree)


def _case_list(cfg: CaseConfig) -> list[str | None]:
    return [None] + cfg.case_names()


def _case_tag(case: str | None) -> str:
    return case if case is not None else "baseline"


# ---------------------------------------------------------------------------
# build: model frequency responses
# ---------------------------------------------------------------------------

def _eval_fourport(link, label: str, freqs: np.ndarray) -> np.ndarray:
    """Four-port admittance per frequency, in (d, q, dc, sync) order."""
    att = {c.label: c for c in link.system.converters}[label]
    out = np.empty((freqs.size, 4, 4), dtype=complex)
    for k, f in enumerate(freqs):
        out[k] = eim_to_scan_order(att.eim.y.eval(2j * np.pi * f))
    return out


def _magphase_csv(freqs: np.ndarray, y: np.ndarray, ports) -> str:
    header = ["f_hz"]
    for r in ports:
        for c in ports:
            header += [f"y_{r}_{c}_mag", f"y_{r}_{c}_phase_deg"]
    rows = []
    for k, f in enumerate(freqs):
        row = [_fmt(f)]
        for entry in y[k].reshape(-1):
            row += [_fmt(abs(entry)), _fmt(np.degrees(np.angle(entry)))]
        rows.append(row)
    return _csv(header, rows)


def cmd_build(args) -> int:
    cfg = _load(args)
    tree = cfg.resolve(None)
    _apply_flags(tree, args, "analysis")
    ana = tree["analysis"]
    freqs = np.geomspace(ana["f_min_hz"], ana["f_max_hz"],
                         ana["grid_points"])
    link = build_link(tree)
    out = Path(args.out)
    for label in link.order:
        y_dq = _eval_fourport(link, label, freqs)
        y_seq = np.array([dq_to_modified_sequence(m) for m in y_dq])
        _write(out, f"build_{label}_dq.csv",
               _magphase_csv(freqs, y_dq, SCAN_PORT_ORDER_DQ))
        _write(out, f"build_{label}_seq.csv",
               _magphase_csv(freqs, y_seq, SCAN_PORT_ORDER_SEQ))
        sync_dc = float(np.max(np.abs(y_dq[:, 3, 2])))
        kind = link.specs[label].kind
        print(f"{label} ({kind}): max |sync response to dc voltage| "
              f"over grid = {sync_dc:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# scan: measured-versus-model equivalence
# ---------------------------------------------------------------------------

def _overlay_csv(freqs, y_meas, y_model, ports) -> str:
    header = ["f_hz"]
    for r in ports:
        for c in ports:
            tag = f"y_{r}_{c}"
            header += [f"{tag}_meas_re", f"{tag}_meas_im",
                       f"{tag}_model_re", f"{tag}_model_im"]
    rows = []
    for k, f in enumerate(freqs):
        row = [_fmt(f)]
        for i in range(4):
            for j in range(4):
                row += [_fmt(y_meas[k, i, j].real), _fmt(y_meas[k, i, j].imag),
                        _fmt(y_model[k, i, j].real),
                        _fmt(y_model[k, i, j].imag)]
        rows.append(row)
    return _csv(header, rows)


def _scan_summary_csv(freqs, y_meas, y_model, ports) -> str:
    global_scale = float(np.max(np.abs(y_model)))
    header = ["entry", "max_abs_err", "worst_rel_err", "f_hz_at_worst"]
    rows = []
    for i, r in enumerate(ports):
        for j, c in enumerate(ports):
            err = np.abs(y_meas[:, i, j] - y_model[:, i, j])
            denom = np.maximum(np.abs(y_model[:, i, j]),
                               1e-6 * max(global_scale, 1e-300))
            rel = err / denom
            k = int(np.argmax(rel))
            rows.append([f"y_{r}_{c}", _fmt(err.max()), _fmt(rel[k]),
                         _fmt(freqs[k])])
    return _csv(header, rows)


def cmd_scan(args) -> int:
    cfg = _load(args)
    tree = cfg.resolve(None)
    _apply_flags(tree, args, "scan")
    sc = tree["scan"]
    freqs = np.geomspace(sc["f_min_hz"], sc["f_max_hz"], sc["points"]) \
        if sc["points"] > 1 else np.array([sc["f_min_hz"]])
    link = build_link(tree)
    out = Path(args.out)
    options = ScanOptions(amp_rel=sc["amp_rel"])
    for label in link.order:
        measured = scan_eim(link.specs[label], link.ops[label], freqs,
                            options)
        y_model_dq = _eval_fourport(link, label, freqs)
        y_model_seq = np.array([dq_to_modified_sequence(m)
                                for m in y_model_dq])
        _write(out, f"scan_{label}_dq.csv",
               _overlay_csv(freqs, measured.y_dq, y_model_dq,
                            SCAN_PORT_ORDER_DQ))
        _write(out, f"scan_{label}_seq.csv",
               _overlay_csv(freqs, measured.y_seq, y_model_seq,
                            SCAN_PORT_ORDER_SEQ))
        _write(out, f"scan_{label}_summary.csv",
               _scan_summary_csv(freqs, measured.y_dq, y_model_dq,
                                 SCAN_PORT_ORDER_DQ))
        worst = float(np.max(np.abs(measured.y_dq - y_model_dq)))
        print(f"{label}: scanned {freqs.size} frequencies, "
              f"max |measured - model| = {worst:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze: modes, participation, sensitivities
# ---------------------------------------------------------------------------

def _pf_table(report) -> str:
    lines = ["  node participation:",
             f"    {'node':<12} {'|pf|':>10} {'re':>11} {'im':>11}"]
    order = np.argsort([-abs(p) for p in report.node_pf])
    for idx in order:
        label = report.node_labels[idx]
        p = report.node_pf[idx]
        lines.append(f"    {label:<12} {abs(p):>10.4f} "
                     f"{p.real:>11.4f} {p.imag:>11.4f}")
    return "\n".join(lines)


def _sens_table(report) -> str:
    mags = report.component_magnitudes()
    lines = ["  sensitivity magnitude, largest entry per component:",
             f"    {'component':<20} {'max |S|':>12}"]
    for name in sorted(mags, key=lambda n: -mags[n]):
        lines.append(f"    {name:<20} {mags[name]:>12.5g}")
    return "\n".join(lines)


def _validation_table(rows, increment: float) -> str:
    lines = [f"  sensitivity validation at +{100.0 * increment:g}% "
             f"per entry:",
             f"    {'component':<16} {'entry':<8} {'|predicted|':>12} "
             f"{'|actual|':>12} {'error %':>9}  status"]
    for row in rows:
        i, j = row.entry
        err = "    n/a" if np.isnan(row.error) else f"{100 * row.error:7.3f}"
        lines.append(f"    {row.component:<16} ({i},{j})  "
                     f"{abs(row.predicted):>12.5g} {abs(row.actual):>12.5g} "
                     f"{err:>9}  {row.status}")
    return "\n".join(lines)


def _mode_block(idx: int, report, increment) -> str:
    m = report.mode
    head = (f"mode {idx}: {report.verdict}, f = {m.f_hz:.4f} Hz, "
            f"damping = {m.damping:.5f}, "
            f"s = {m.s.real:+.6g} {m.s.imag:+.6g}j rad/s")
    parts = [head, _pf_table(report), _sens_table(report)]
    if report.validation is not None:
        parts.append(_validation_table(report.validation, increment))
    return "\n".join(parts)


def _analyze_case(link, ana: dict, increment):
    """Mode reports for one built case; None payload means stable."""
    opts = ModalOptions(grid_points=ana["grid_points"],
                        capture_radius=ana["capture_radius"])
    f_range = (ana["f_min_hz"], ana["f_max_hz"])
    try:
        modes = find_modes(link.system.loop, f_range, opts)
    except NoCapture as stable:
        return None, stable.margin
    return [analyze_mode(link.system, m, increment) for m in modes], None


def _modes_csv(reports) -> str:
    header = ["mode", "verdict", "f_hz", "damping", "s_re", "s_im",
              "residual"]
    rows = []
    for idx, rep in enumerate(reports or [], start=1):
        m = rep.mode
        rows.append([str(idx), rep.verdict, _fmt(m.f_hz), _fmt(m.damping),
                     _fmt(m.s.real), _fmt(m.s.imag), _fmt(m.residual)])
    return _csv(header, rows)


def _pf_csv(reports) -> str:
    header = ["mode", "node", "pf_re", "pf_im", "pf_mag"]
    rows = []
    for idx, rep in enumerate(reports or [], start=1):
        for label, p in zip(rep.node_labels, rep.node_pf):
            rows.append([str(idx), label, _fmt(p.real), _fmt(p.imag),
                         _fmt(abs(p))])
    return _csv(header, rows)


def _sens_csv(reports) -> str:
    header = ["mode", "component", "row", "col", "sens_re", "sens_im",
              "sens_mag"]
    rows = []
    for idx, rep in enumerate(reports or [], start=1):
        for name in sorted(rep.sensitivities):
            for (i, j), v in sorted(rep.sensitivities[name].items()):
                rows.append([str(idx), name, str(i), str(j), _fmt(v.real),
                             _fmt(v.imag), _fmt(abs(v))])
    return _csv(header, rows)


def _validation_csv(reports) -> str:
    header = ["mode", "component", "row", "col", "value_re", "value_im",
              "sens_re", "sens_im", "predicted_re", "predicted_im",
              "actual_re", "actual_im", "rel_error", "status"]
    rows = []
    for idx, rep in enumerate(reports or [], start=1):
        for row in rep.validation or []:
            i, j = row.entry
            rows.append([str(idx), row.component, str(i), str(j),
                         _fmt(row.value.real), _fmt(row.value.imag),
                         _fmt(row.sensitivity.real),
                         _fmt(row.sensitivity.imag),
                         _fmt(row.predicted.real), _fmt(row.predicted.imag),
                         _fmt(row.actual.real), _fmt(row.actual.imag),
                         _fmt(row.error), row.status])
    return _csv(header, rows)


def cmd_analyze(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    for case in _case_list(cfg):
        tag = _case_tag(case)
        tree = cfg.resolve(case)
        _apply_flags(tree, args, "analysis")
        ana = tree["analysis"]
        increment = ana.get("increment")
        link = build_link(tree)
        reports, margin = _analyze_case(link, ana, increment)

        lines = [f"== case: {tag} =="]
        if reports is None:
            lines.append(f"stable, margin = {margin:.6g}")
        else:
            for idx, rep in enumerate(reports, start=1):
                lines.append(_mode_block(idx, rep, increment))
        text = "\n".join(lines) + "\n"
        print(text, end="")
        _write(out, f"analyze_{tag}.txt", text)
        _write(out, f"analyze_{tag}_modes.csv", _modes_csv(reports))
        _write(out, f"analyze_{tag}_pf.csv", _pf_csv(reports))
        _write(out, f"analyze_{tag}_sens.csv", _sens_csv(reports))
        if increment is not None and reports:
            _write(out, f"analyze_{tag}_validation.csv",
                   _validation_csv(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle: three independent stability verdicts must agree
# ---------------------------------------------------------------------------

def _sim_verdict(link, seed: int):
    """Kick the equilibrium and watch the scaled deviation.

    Returns (grew, growth_ratio, f_peak_hz).  The frequency comes from
    the magnitude-squared spectrum summed over all scaled states, with
    parabolic interpolation around the peak bin; exponential growth
    shifts no energy off the underlying line, so the peak tracks the
    unstable mode's frequency.
    """
    scale = link.model.state_scale()
    rng = np.random.default_rng(seed)
    x0 = link.x_eq + SIM_KICK * scale * rng.standard_normal(scale.size)
    result = simulate(link.model, x0, t_end=SIM_T_END, dt=SIM_DT,
                      record_every=1, raise_on_blowup=False)
    dev = (np.asarray(result.x_rec) - link.x_eq) / scale
    d0 = float(np.linalg.norm(dev[0]))
    d1 = float(np.linalg.norm(dev[-1]))
    blew_up = result.blowup_t is not None
    growth = d1 / d0 if d0 > 0 else np.inf
    grew = blew_up or growth > 10.0

    n = dev.shape[0]
    window = np.hanning(n)[:, None]
    spec = np.sum(np.abs(np.fft.rfft(dev * window, axis=0)) ** 2, axis=1)
    f_bins = np.fft.rfftfreq(n, d=SIM_DT)
    lo = int(np.searchsorted(f_bins, 1.5))
    k = lo + int(np.argmax(spec[lo:]))
    f_peak = float(f_bins[k])
    if 0 < k < spec.size - 1:
        a, b, c = np.log(spec[k - 1: k + 2])
        denom = a - 2.0 * b + c
        if denom < 0:
            f_peak += 0.5 * (a - c) / denom * (f_bins[1] - f_bins[0])
    return grew, growth, f_peak


def _oracle_case(link, ana: dict, seed: int):
    opts = ModalOptions(grid_points=ana["grid_points"],
                        capture_radius=ana["capture_radius"])
    try:
        modes = find_modes(link.system.loop,
                           (ana["f_min_hz"], ana["f_max_hz"]), opts)
        unstable = [m for m in modes if m.s.real > 0]
        ein_bad = bool(unstable)
        top = max(unstable, key=lambda m: m.s.real) if unstable else None
        ein_f = top.f_hz if top else float("nan")
        ein_margin = float("nan")
    except NoCapture as stable:
        ein_bad, ein_f, ein_margin = False, float("nan"), stable.margin

    lin = linearize_ss(link.model, link.x_eq)
    ss_bad = lin.max_real > 0.0
    ss_top = lin.eigenvalues[0]
    ss_f = abs(ss_top.imag) / (2.0 * np.pi)

    sim_bad, growth, sim_f = _sim_verdict(link, seed)
    return dict(ein_bad=ein_bad, ein_f=ein_f, ein_margin=ein_margin,
                ss_bad=ss_bad, ss_re=lin.max_real, ss_f=ss_f,
                sim_bad=sim_bad, growth=growth, sim_f=sim_f)


def _oracle_mismatches(tag: str, r: dict) -> list[str]:
    msgs = []
    verdicts = (r["ein_bad"], r["ss_bad"], r["sim_bad"])
    if len(set(verdicts)) != 1:
        msgs.append(f"{tag}: verdicts disagree (mode analysis "
                    f"{'unstable' if r['ein_bad'] else 'stable'}, "
                    f"state space {'unstable' if r['ss_bad'] else 'stable'}, "
                    f"simulation {'unstable' if r['sim_bad'] else 'stable'})")
        return msgs
    if r["ein_bad"]:
        if abs(r["ein_f"] - r["ss_f"]) > 0.01 * r["ss_f"]:
            msgs.append(f"{tag}: mode frequency {r['ein_f']:.3f} Hz is not "
                        f"within 1% of state-space {r['ss_f']:.3f} Hz")
        if abs(r["sim_f"] - r["ein_f"]) > 0.05 * r["ein_f"]:
            msgs.append(f"{tag}: simulated spectrum peak {r['sim_f']:.3f} Hz "
                        f"is not within 5% of mode {r['ein_f']:.3f} Hz")
    return msgs


def cmd_oracle(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    header = ["case", "modal_verdict", "modal_f_hz", "modal_margin",
              "ss_verdict", "ss_max_re", "ss_f_hz", "sim_verdict",
              "sim_growth", "sim_f_hz", "agree"]
    rows = []
    failures: list[str] = []
    for case in _case_list(cfg):
        tag = _case_tag(case)
        tree = cfg.resolve(case)
        _apply_flags(tree, args, "analysis")
        link = build_link(tree)
        r = _oracle_case(link, tree["analysis"], args.seed)
        msgs = _oracle_mismatches(tag, r)
        failures.extend(msgs)
        verdict = lambda bad: "unstable" if bad else "stable"
        rows.append([tag, verdict(r["ein_bad"]), _fmt(r["ein_f"]),
                     _fmt(r["ein_margin"]), verdict(r["ss_bad"]),
                     _fmt(r["ss_re"]), _fmt(r["ss_f"]),
                     verdict(r["sim_bad"]), _fmt(r["growth"]),
                     _fmt(r["sim_f"]), "yes" if not msgs else "no"])
        line = (f"{tag}: modal {verdict(r['ein_bad'])}, state-space "
                f"{verdict(r['ss_bad'])} (max Re {r['ss_re']:+.3f}), "
                f"simulation {verdict(r['sim_bad'])} "
                f"(growth {r['growth']:.3g})")
        if r["ein_bad"]:
            line += (f"; f: modal {r['ein_f']:.2f} Hz, state-space "
                     f"{r['ss_f']:.2f} Hz, simulated {r['sim_f']:.2f} Hz")
        print(line)
    _write(out, "oracle_summary.csv", _csv(header, rows))
    if failures:
        for msg in failures:
            print(f"oracle mismatch: {msg}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="config file (default: bundled testcase)")
    common.add_argument("--out", default="syncmodal_out",
                        help="output directory (default: %(default)s)")
    common.add_argument("--freq-min", type=float, default=None,
                        metavar="HZ", help="override lower frequency bound")
    common.add_argument("--freq-max", type=float, default=None,
                        metavar="HZ", help="override upper frequency bound")
    common.add_argument("--grid-points", type=int, default=None,
                        metavar="N", help="override frequency grid size")
    common.add_argument("--increment", type=float, default=None,
                        metavar="FRAC",
                        help="sensitivity validation increment, e.g. 0.05")
    common.add_argument("--seed", type=int, default=0,
                        help="seed for randomized checks (default: 0)")

    parser = argparse.ArgumentParser(
        prog="syncmodal",
        description="Small-signal stability studies of converter links.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build", parents=[common],
                   help="write model frequency responses").set_defaults(
        func=cmd_build)
    sub.add_parser("scan", parents=[common],
                   help="measure admittances by simulated injection"
                   ).set_defaults(func=cmd_scan)
    sub.add_parser("analyze", parents=[common],
                   help="find modes, participation, sensitivities"
                   ).set_defaults(func=cmd_analyze)
    sub.add_parser("oracle", parents=[common],
                   help="cross-check analysis against simulation"
                   ).set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
