"""Time-domain frequency scanning of converter port admittances.

Reproduces the four-port admittance of a converter purely from
simulated injection experiments against stiff sources: two ac voltage
injections (one per rotation sense), a series dc voltage injection, and
an additive injection into the synchronization feedback signal.  The
four steady-state response phasor sets are combined in a single 4x4
solve per frequency, so cross-coupling between all ports is captured
without assuming any structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .converter import (
    ConverterSpec,
    OperatingPoint,
    dq_to_modified_sequence,
)
from .simlab import ConverterRig, DftAccumulator, newton_equilibrium, simulate

__all__ = [
    "AmplitudeZero",
    "IllConditionedScan",
    "ScanOptions",
    "ScanResult",
    "scan_eim",
    "scan_csv",
    "SCAN_PORT_ORDER_DQ",
    "SCAN_PORT_ORDER_SEQ",
    "eim_to_scan_order",
]

# Port order of scan results; the sequence set replaces (d, q) by (p, n).
SCAN_PORT_ORDER_DQ = ("ac_d", "ac_q", "dc", "sync")
SCAN_PORT_ORDER_SEQ = ("ac_p", "ac_n", "dc", "sync")

# Row/column permutation from the canonical model order (sync, d, q, dc)
# to the scan-result order (d, q, dc, sync).
_EIM_TO_SCAN = np.array([1, 2, 3, 0])


def eim_to_scan_order(y4: np.ndarray) -> np.ndarray:
    """Reorder a canonical (sync, d, q, dc) matrix to scan order."""
    y4 = np.asarray(y4)
    return y4[np.ix_(_EIM_TO_SCAN, _EIM_TO_SCAN)]


class IllConditionedScan(RuntimeError):
    """The four injection experiments were not linearly independent."""

    def __init__(self, freq_hz: float, cond: float):
        self.freq_hz = freq_hz
        self.cond = cond
        super().__init__(
            f"experiment matrix condition {cond:.3e} at {freq_hz:g} Hz")


class AmplitudeZero(ValueError):
    """An injection amplitude is zero, so no response can be measured."""

    def __init__(self, port: str):
        self.port = port
        super().__init__(f"zero injection amplitude at port {port!r}")


@dataclass(frozen=True)
class ScanOptions:
    """Tuning of the injection experiments.

    Amplitudes default to ``amp_rel`` times the respective base
    quantities.  ``dt_max`` is an upper bound on the step; the actual
    step divides the injection period exactly (at least
    ``min_samples_per_period`` samples) so the DFT windows hold an
    integer number of periods.  Each injection turns on through a
    raised-cosine ramp sized by the larger of the two ``ramp_*``
    settings, then dwells for the larger of the two ``settle_*``
    settings before the measurement window opens; the ramp keeps the
    turn-on from kicking lightly damped modes near the fundamental
    and below, which would otherwise leak into short windows.
    """

    amp_rel: float = 0.01
    n_periods: int = 5
    ramp_fundamental_periods: float = 15.0
    ramp_injection_periods: float = 5.0
    settle_fundamental_periods: float = 10.0
    settle_injection_periods: float = 5.0
    dt_max: float = 2e-5
    min_samples_per_period: int = 50
    cond_cap: float = 1e8
    pade_order: int = 2


@dataclass
class ScanResult:
    """Measured admittances per frequency.

    ``y_dq[k]`` is the 4x4 dq-frame admittance at ``freqs_hz[k]`` with
    port order ``SCAN_PORT_ORDER_DQ``; ``y_seq[k]`` is its modified
    sequence-domain counterpart with order ``SCAN_PORT_ORDER_SEQ``.
    ``cond`` holds the condition number of each 4x4 experiment solve and
    ``window_s`` / ``dt_s`` record the DFT window metadata.
    """

    freqs_hz: np.ndarray
    y_dq: np.ndarray
    y_seq: np.ndarray
    cond: np.ndarray
    amplitudes: dict = field(default_factory=dict)
    window_s: np.ndarray | None = None
    dt_s: np.ndarray | None = None


def scan_csv(result: ScanResult, domain: str = "dq") -> str:
    """Scan result as deterministic CSV: f plus re/im pairs of 16 entries."""
    if domain == "dq":
        y, ports = result.y_dq, SCAN_PORT_ORDER_DQ
    elif domain == "seq":
        y, ports = result.y_seq, SCAN_PORT_ORDER_SEQ
    else:
        raise ValueError("domain must be 'dq' or 'seq'")
    cols = ["f_hz"]
    for r in ports:
        for c in ports:
            cols.append(f"y_{r}_{c}_re")
            cols.append(f"y_{r}_{c}_im")
    lines = [",".join(cols)]
    for k, f in enumerate(result.freqs_hz):
        vals = [format(f, ".17g")]
        for entry in y[k].reshape(-1):
            vals.append(format(entry.real, ".17g"))
            vals.append(format(entry.imag, ".17g"))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def _experiment_batch(spec: ConverterSpec, amp_ac: float, amp_dc: float,
                      amp_sync: float, w: float) -> dict:
    zeros = np.zeros(4)
    amp_pos = zeros.copy()
    amp_neg = zeros.copy()
    a_dc = zeros.copy()
    a_sync = zeros.copy()
    amp_pos[0] = amp_ac
    amp_neg[1] = amp_ac
    a_dc[2] = amp_dc
    a_sync[3] = amp_sync
    return dict(w=np.full(4, w), amp_pos=amp_pos, amp_neg=amp_neg,
                amp_dc=a_dc, amp_sync=a_sync)


def scan_eim(spec: ConverterSpec, op: OperatingPoint,
             freqs_hz, options: ScanOptions = ScanOptions()) -> ScanResult:
    """Measure the four-port admittance by simulated injections.

    Runs four experiments per frequency from the rig equilibrium, waits
    for transients to settle, then extracts single-bin DFT phasors of
    all port voltages and currents over an integer number of injection
    periods and solves the 4x4 phasor system for the admittance.
    """
    freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
    if np.any(freqs <= 0):
        raise ValueError("scan frequencies must be positive")
    base = spec.base
    amp_ac = options.amp_rel * base.v_ac
    amp_dc = options.amp_rel * base.v_dc
    amp_sync = options.amp_rel * spec.sync_bases()[1]
    for port, amp in (("ac", amp_ac), ("dc", amp_dc), ("sync", amp_sync)):
        if amp == 0.0:
            raise AmplitudeZero(port)

    rig = ConverterRig(spec, op, options.pade_order)
    x_eq = newton_equilibrium(
        lambda x: rig.rhs(0.0, x), rig.equilibrium_guess(),
        rig.state_scale(), pinned=rig.core.neutral_indices())

    # per-unit scales of the canonical (sync, d, q, dc) port quantities;
    # the 4x4 solve is done in scaled form so the conditioning test is
    # meaningful across ports with very different physical magnitudes
    w_base, sync_i_base = spec.sync_bases()
    v_bases = np.array([w_base, base.v_ac, base.v_ac, base.v_dc])
    i_bases = np.array([sync_i_base, base.i_ac, base.i_ac, base.i_dc])

    f1 = spec.w_nom / (2.0 * math.pi)
    n_f = freqs.size
    y_dq = np.empty((n_f, 4, 4), dtype=complex)
    y_seq = np.empty((n_f, 4, 4), dtype=complex)
    cond = np.empty(n_f)
    windows = np.empty(n_f)
    dts = np.empty(n_f)

    for k, f in enumerate(freqs):
        period = 1.0 / f
        n_sub = max(options.min_samples_per_period,
                    math.ceil(period / options.dt_max))
        dt = period / n_sub
        t_ramp = max(options.ramp_fundamental_periods / f1,
                     options.ramp_injection_periods * period)
        dwell = max(options.settle_fundamental_periods / f1,
                    options.settle_injection_periods * period)
        k_start = math.ceil((t_ramp + dwell) / dt)
        k_end = k_start + options.n_periods * n_sub
        w = 2.0 * math.pi * f
        rig.set_injection(t_ramp=t_ramp,
                          **_experiment_batch(spec, amp_ac, amp_dc,
                                              amp_sync, w))
        acc = DftAccumulator(w, k_start, k_end, dt, rig.measure)
        x0 = np.broadcast_to(x_eq, (4, x_eq.size)).copy()
        simulate(rig, x0, t_end=k_end * dt, dt=dt, observers=(acc,))
        rig.clear_injection()
        ph = acc.phasors()  # (8, 4): port voltages then currents per experiment
        v_mat = ph[0:4, :] / v_bases[:, None]
        i_mat = ph[4:8, :] / i_bases[:, None]
        c = np.linalg.cond(v_mat)
        if not np.isfinite(c) or c > options.cond_cap:
            raise IllConditionedScan(float(f), float(c))
        cond[k] = c
        y_scaled = i_mat @ np.linalg.inv(v_mat)
        # back to physical units, still (sync, d, q, dc) order
        y_canon = y_scaled * i_bases[:, None] / v_bases[None, :]
        y_dq[k] = eim_to_scan_order(y_canon)
        y_seq[k] = dq_to_modified_sequence(y_dq[k])
        windows[k] = (k_end - k_start) * dt
        dts[k] = dt

    return ScanResult(
        freqs_hz=freqs, y_dq=y_dq, y_seq=y_seq, cond=cond,
        amplitudes={"ac": amp_ac, "dc": amp_dc, "sync": amp_sync},
        window_s=windows, dt_s=dts)
