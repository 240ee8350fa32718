"""Four-port small-signal converter models with an explicit sync port.

Each converter is reduced to a 4x4 admittance-form transfer matrix over
the ports (sync, ac-d, ac-q, dc).  Port outputs are the small-signal
currents *drawn from the network node*; the sync port uses the frequency
deviation (rad/s) as its voltage and the synchronization feedback signal
as its current.  The forward path of the synchronization loop (PLL
integration for grid-following, swing dynamics for grid-forming) is kept
out of the 4x4 block and exported separately so the network side can
close the loop explicitly.

Sign conventions, fixed throughout the package:

* ac port current flows node -> converter through the filter, so the
  bridge voltage is ``u_c = u_poc - Z_f i``.
* dc port current is also drawn node -> converter; a rectifying
  converter therefore has negative dc drawn current.
* sync feedback signal: measured q-axis voltage in the controller frame
  for grid-following; negative deviation of the drawn active power for
  grid-forming.  Both are zero at the operating point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .lti import DEFAULT_COND_CAP, DimensionMismatch, SingularAtS, TransferMatrix

__all__ = [
    "PiGains",
    "BaseValues",
    "GflControl",
    "GfmControl",
    "ConverterSpec",
    "OperatingPoint",
    "TerminalConditions",
    "FourPortEim",
    "PORT_ORDER",
    "EIM_PARTITIONS",
    "dq_rl",
    "dq_rl_admittance",
    "sync_forward",
    "build_eim",
    "build_three_port",
    "solve_operating_point",
    "dq_to_modified_sequence",
    "modified_sequence_map",
]

TM = TransferMatrix

# Canonical port order of the four-port model.
PORT_ORDER = ("sync", "ac_d", "ac_q", "dc")

# Named partitions of the 4x4 admittance block: (row ports, column ports).
EIM_PARTITIONS = {
    "y_sync_fe": ([0], [0]),
    "k_sync_ac": ([0], [1, 2]),
    "k_sync_dc": ([0], [3]),
    "c_ac_sync": ([1, 2], [0]),
    "y_ac": ([1, 2], [1, 2]),
    "a_ac_dc": ([1, 2], [3]),
    "d_dc_sync": ([3], [0]),
    "b_dc_ac": ([3], [1, 2]),
    "y_dc": ([3], [3]),
}


@dataclass(frozen=True)
class PiGains:
    """Proportional-integral gains ``kp + ki/s``."""

    kp: float
    ki: float

    def element(self) -> TransferMatrix:
        return TM.pi_element(self.kp, self.ki)


@dataclass(frozen=True)
class BaseValues:
    """Per-unit bases.  AC quantities are peak phase values."""

    v_ac: float
    i_ac: float
    v_dc: float
    i_dc: float
    s_rated: float
    w_nom: float

    def __post_init__(self):
        for name in ("v_ac", "i_ac", "v_dc", "i_dc", "s_rated", "w_nom"):
            if getattr(self, name) <= 0:
                raise ValueError(f"base value {name} must be positive")


@dataclass(frozen=True)
class GflControl:
    """Grid-following control: PLL plus dc-voltage and vector-current loops.

    ``pll`` drives the controller frame from the measured q-axis voltage.
    ``dc_loop`` sets the d-axis current reference from the dc-voltage
    error; ``pq_loop`` sets the remaining current reference from a power
    error, on the reactive channel by default (``pq_channel='active'``
    switches it to active power).
    """

    pll: PiGains
    dc_loop: PiGains
    pq_loop: PiGains
    pq_channel: Literal["reactive", "active"] = "reactive"


@dataclass(frozen=True)
class GfmControl:
    """Grid-forming control: swing emulation plus virtual admittance.

    ``j_sync`` and ``d_sync`` are the SI inertia and damping of the
    frequency dynamics, mapping power imbalance (W) to frequency (rad/s)
    through ``1 / (j_sync*s + d_sync)``.  The current reference is the
    voltage error through the virtual admittance ``(r_vir + s*l_vir)``
    branch with nominal-frequency cross coupling.
    """

    j_sync: float
    d_sync: float
    r_vir: float
    l_vir: float

    def __post_init__(self):
        if self.j_sync <= 0 or self.d_sync < 0:
            raise ValueError("swing emulation needs j_sync > 0 and d_sync >= 0")
        if self.l_vir <= 0:
            raise ValueError("virtual admittance needs l_vir > 0")


@dataclass(frozen=True)
class ConverterSpec:
    """Static description of one converter and its control.

    ``k_dec`` is the cross-coupling decoupling gain of the current loop;
    ``None`` selects the conventional ``w_nom * l_f``.
    """

    kind: Literal["gfl", "gfm"]
    r_f: float
    l_f: float
    t_delay: float
    current_loop: PiGains
    control: GflControl | GfmControl
    base: BaseValues
    k_dec: float | None = None

    def __post_init__(self):
        if self.kind == "gfl" and not isinstance(self.control, GflControl):
            raise TypeError("kind 'gfl' requires GflControl")
        if self.kind == "gfm" and not isinstance(self.control, GfmControl):
            raise TypeError("kind 'gfm' requires GfmControl")
        if self.l_f <= 0 or self.r_f < 0:
            raise ValueError("filter needs l_f > 0 and r_f >= 0")
        if self.t_delay < 0:
            raise ValueError("control delay must be nonnegative")

    @property
    def w_nom(self) -> float:
        return self.base.w_nom

    @property
    def decoupling_gain(self) -> float:
        return self.w_nom * self.l_f if self.k_dec is None else self.k_dec

    def sync_bases(self) -> tuple[float, float]:
        """(voltage base, current base) of the sync port.

        The sync-port voltage is a frequency, based on the nominal
        angular frequency.  The feedback signal is a voltage for
        grid-following and a power for grid-forming, so its base
        follows suit.
        """
        if self.kind == "gfl":
            return self.base.w_nom, self.base.v_ac
        return self.base.w_nom, self.base.s_rated


@dataclass(frozen=True)
class OperatingPoint:
    """Steady-state port quantities of one converter (SI, dq peak phase).

    ``i_dc`` is the bridge output current into the dc node, so the
    power balance reads ``1.5 * dot(u_cdq, i_gdq) = v_dc * i_dc``.
    """

    u_gdq: np.ndarray
    i_gdq: np.ndarray
    u_cdq: np.ndarray
    m_dq: np.ndarray
    v_dc: float
    i_dc: float
    w_sync: float

    def __post_init__(self):
        for name in ("u_gdq", "i_gdq", "u_cdq", "m_dq"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(2).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.v_dc <= 0:
            raise ValueError("dc voltage must be positive")

    def validate(self, rtol: float = 1e-9) -> None:
        """Check modulation and power-balance invariants."""
        scale_u = max(np.max(np.abs(self.u_cdq)), 1e-9 * self.v_dc)
        err_m = np.max(np.abs(self.u_cdq - self.m_dq * self.v_dc))
        if err_m > rtol * scale_u:
            raise ValueError(
                f"modulation inconsistent with bridge voltage (err {err_m:.3e})")
        p_ac = 1.5 * float(self.u_cdq @ self.i_gdq)
        p_dc = self.v_dc * self.i_dc
        scale_p = max(abs(p_ac), abs(p_dc), 1e-9 * self.v_dc * self.v_dc)
        if abs(p_ac - p_dc) > rtol * scale_p:
            raise ValueError(
                f"ac/dc power balance violated ({p_ac:.6e} vs {p_dc:.6e})")


@dataclass(frozen=True)
class TerminalConditions:
    """Set point at the converter terminals.

    ``p`` and ``q`` are the active/reactive power absorbed from the ac
    node (delivering converters use negative ``p``); ``u_mag`` is the
    peak phase voltage at the ac node, aligned with the d axis.
    """

    u_mag: float
    p: float
    q: float
    v_dc: float


@dataclass(frozen=True)
class FourPortEim:
    """Four-port admittance model plus the sync forward path.

    ``y`` maps port voltages (rad/s, V, V, V) to drawn port currents in
    the order (sync, ac-d, ac-q, dc).  ``z_sync_fo`` is the forward path
    from the sync feedback signal to the frequency deviation; it is not
    folded into ``y``.
    """

    kind: Literal["gfl", "gfm"]
    y: TransferMatrix
    z_sync_fo: TransferMatrix

    def __post_init__(self):
        if self.y.shape != (4, 4):
            raise DimensionMismatch(f"four-port block must be 4x4, got {self.y.shape}")
        if self.z_sync_fo.shape != (1, 1):
            raise DimensionMismatch("sync forward path must be 1x1")

    def block(self, name: str) -> TransferMatrix:
        rows, cols = EIM_PARTITIONS[name]
        return self.y.submatrix(rows, cols)


# ---------------------------------------------------------------------------
# dq-frame passive elements
# ---------------------------------------------------------------------------

def dq_rl(r: float, l: float, w: float) -> TransferMatrix:
    """Series R-L impedance in a dq frame rotating at ``w``."""
    s_elem = TM.rational([1.0, 0.0], [1.0])
    return TM.constant([[r, -w * l], [w * l, r]]) + TM.constant(np.eye(2) * l) * s_elem


def dq_rl_admittance(r: float, l: float, w: float) -> TransferMatrix:
    """Analytic inverse of :func:`dq_rl` (no numeric inversion)."""

    def fn(s: complex) -> np.ndarray:
        a = r + s * l
        b = w * l
        det = a * a + b * b
        scale = (abs(a) + abs(b)) ** 2
        if abs(det) <= 1e-14 * max(scale, 1e-300):
            raise SingularAtS(s, float("inf"), "dq R-L branch resonance")
        return np.array([[a, b], [-b, a]]) / det

    return TM.from_callable(2, 2, fn)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def sync_forward(spec: ConverterSpec) -> TransferMatrix:
    """Forward path of the synchronization loop (feedback signal -> rad/s).

    Grid-following: the PLL corrector ``kp + ki/s`` acting on the
    measured q-axis voltage.  Grid-forming: the swing dynamics
    ``1 / (j_sync*s + d_sync)`` acting on the power imbalance.
    """
    if spec.kind == "gfl":
        return spec.control.pll.element()
    return TM.rational([1.0], [spec.control.j_sync, spec.control.d_sync])


def _frame_shift(x0: np.ndarray) -> TransferMatrix:
    # Linearized rotation of a steady dq vector by the integrated
    # frequency deviation: d(x in moving frame) = (1/s) [x_q0, -x_d0]^T dw.
    return TM.integrator() * TM.constant([[x0[1]], [-x0[0]]])


def _pq_rows(op: OperatingPoint) -> tuple[np.ndarray, np.ndarray]:
    # Linearization of absorbed active/reactive power, stacked (P, Q):
    # dS = u_pq @ di + i_pq @ du.
    u_d, u_q = op.u_gdq
    i_d, i_q = op.i_gdq
    u_pq = 1.5 * np.array([[u_d, u_q], [u_q, -u_d]])
    i_pq = 1.5 * np.array([[i_d, i_q], [-i_q, i_d]])
    return u_pq, i_pq


def build_eim(spec: ConverterSpec, op: OperatingPoint,
              cond_cap: float = DEFAULT_COND_CAP) -> FourPortEim:
    """Assemble the four-port model at an operating point.

    The ac current rows come from eliminating the modulation and bridge
    equations into ``A(s) di = [b_w, B_u, b_dc] x``; a single 2x2
    inversion of ``A`` per evaluated frequency yields all columns at
    once, and the dc and sync rows are back-substituted from the result.
    """
    w1 = spec.w_nom
    v0 = op.v_dc
    zf = dq_rl(spec.r_f, spec.l_f, w1)
    delay = TM.delay(spec.t_delay)
    hcc = TM.block_diag([spec.current_loop.element()] * 2)
    k_dec = spec.decoupling_gain
    k_dec_mat = TM.constant([[0.0, -k_dec], [k_dec, 0.0]])

    # Modulation response dm = t1 di_ref + t2 di + t3 dw (controller frame
    # reference, ac-side current, frame motion).
    t1 = hcc * (delay * (-1.0 / v0))
    t2 = (hcc + k_dec_mat) * (delay * (1.0 / v0))
    t3 = t2 @ _frame_shift(op.i_gdq) - _frame_shift(op.m_dq)

    m0col = TM.constant([[op.m_dq[0]], [op.m_dq[1]]])
    u_pq, i_pq = _pq_rows(op)
    eye2 = TM.identity(2)

    if spec.kind == "gfl":
        ctl: GflControl = spec.control
        h_dc = ctl.dc_loop.element()
        h_pq = ctl.pq_loop.element()
        # d-axis reference from the dc-voltage error, remaining axis from
        # the selected power channel.
        hdc_vec = TM.vstack([-1.0 * h_dc, TM.zeros(1, 1)])
        pq_row = 1 if ctl.pq_channel == "reactive" else 0
        sel = np.zeros((2, 2))
        sel[1, pq_row] = 1.0
        hpq_mat = TM.constant(sel) * h_pq

        a_mat = zf + (t1 @ hpq_mat @ TM.constant(u_pq) + t2) * v0
        b_u = eye2 - (t1 @ hpq_mat @ TM.constant(i_pq)) * v0
        b_dc = -1.0 * ((t1 @ hdc_vec) * v0 + m0col)
        b_w = t3 * (-v0)
    else:
        ctl: GfmControl = spec.control
        y_vir = dq_rl_admittance(ctl.r_vir, ctl.l_vir, w1)
        f_u = _frame_shift(op.u_gdq)
        a_mat = zf + t2 * v0
        b_u = eye2 - (t1 @ y_vir) * v0
        b_dc = -1.0 * m0col
        b_w = -1.0 * ((t1 @ y_vir @ f_u) * v0) - t3 * v0

    # ac rows: di = g @ [dw, du_d, du_q, du_dc]
    g = a_mat.inv(cond_cap) @ TM.hstack([b_w, b_u, b_dc])

    # bridge voltage rows, then the dc power-balance row (drawn current)
    u_sel = TM.constant([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    g_uc = u_sel - zf @ g
    k_i = TM.constant(1.5 / v0 * op.u_cdq.reshape(1, 2))
    k_u = TM.constant(1.5 / v0 * op.i_gdq.reshape(1, 2))
    dc_self = TM.constant([[0.0, 0.0, 0.0, -op.i_dc / v0]])
    row_dc = -1.0 * (k_i @ g + k_u @ g_uc + dc_self)

    if spec.kind == "gfl":
        # measured q-axis node voltage in the controller frame; the dc
        # column is a structural zero by construction
        row_sync = TM.hstack([
            TM.integrator() * (-op.u_gdq[0]),
            TM.constant([[0.0, 1.0]]),
            TM.zeros(1, 1),
        ])
    else:
        # drawn-power deviation; this sign pairs with the emf-behind-
        # impedance current reference to give a synchronizing swing loop
        p_i = TM.constant(u_pq[0:1, :])
        p_u = TM.constant(i_pq[0:1, :])
        row_sync = p_i @ g + p_u @ u_sel

    y = TM.vstack([row_sync, g, row_dc])
    return FourPortEim(kind=spec.kind, y=y, z_sync_fo=sync_forward(spec))


def build_three_port(spec: ConverterSpec, op: OperatingPoint,
                     cond_cap: float = DEFAULT_COND_CAP) -> TransferMatrix:
    """Three-port admittance (ac-d, ac-q, dc) with the sync loop closed.

    Derived independently of :func:`build_eim`: the frequency deviation
    is kept as an unknown and the full 3x3 system (two filter rows plus
    the sync-loop row) is solved jointly at evaluation time, instead of
    eliminating the ac rows first and closing the loop afterwards.
    """
    w1 = spec.w_nom
    v0 = op.v_dc
    zf = dq_rl(spec.r_f, spec.l_f, w1)
    delay = TM.delay(spec.t_delay)
    hcc = TM.block_diag([spec.current_loop.element()] * 2)
    k_dec = spec.decoupling_gain
    k_dec_mat = TM.constant([[0.0, -k_dec], [k_dec, 0.0]])
    t1 = hcc * (delay * (-1.0 / v0))
    t2 = (hcc + k_dec_mat) * (delay * (1.0 / v0))
    t3 = t2 @ _frame_shift(op.i_gdq) - _frame_shift(op.m_dq)
    m0col = TM.constant([[op.m_dq[0]], [op.m_dq[1]]])
    u_pq, i_pq = _pq_rows(op)
    eye2 = TM.identity(2)
    z_fo = sync_forward(spec)

    if spec.kind == "gfl":
        ctl = spec.control
        hdc_vec = TM.vstack([-1.0 * ctl.dc_loop.element(), TM.zeros(1, 1)])
        pq_row = 1 if ctl.pq_channel == "reactive" else 0
        sel = np.zeros((2, 2))
        sel[1, pq_row] = 1.0
        hpq_mat = TM.constant(sel) * ctl.pq_loop.element()
        a_mat = zf + (t1 @ hpq_mat @ TM.constant(u_pq) + t2) * v0
        b_u = eye2 - (t1 @ hpq_mat @ TM.constant(i_pq)) * v0
        b_dc = -1.0 * ((t1 @ hdc_vec) * v0 + m0col)
        b_w = t3 * (-v0)
        r_i = TM.zeros(1, 2)
        r_u = TM.constant([[0.0, 1.0]])
        r_w = TM.integrator() * (-op.u_gdq[0])
        r_dc = TM.zeros(1, 1)
    else:
        ctl = spec.control
        y_vir = dq_rl_admittance(ctl.r_vir, ctl.l_vir, w1)
        f_u = _frame_shift(op.u_gdq)
        a_mat = zf + t2 * v0
        b_u = eye2 - (t1 @ y_vir) * v0
        b_dc = -1.0 * m0col
        b_w = -1.0 * ((t1 @ y_vir @ f_u) * v0) - t3 * v0
        r_i = TM.constant(u_pq[0:1, :])
        r_u = TM.constant(i_pq[0:1, :])
        r_w = TM.zeros(1, 1)
        r_dc = TM.zeros(1, 1)

    # joint unknowns (di_d, di_q, dw), inputs (du_d, du_q, du_dc)
    m3 = TM.vstack([
        TM.hstack([a_mat, -1.0 * b_w]),
        TM.hstack([-1.0 * (z_fo @ r_i), TM.identity(1) - z_fo @ r_w]),
    ])
    rhs3 = TM.vstack([
        TM.hstack([b_u, b_dc]),
        TM.hstack([z_fo @ r_u, z_fo @ r_dc]),
    ])
    sol = m3.inv(cond_cap) @ rhs3
    g_i = sol.submatrix([0, 1], [0, 1, 2])
    u_sel3 = TM.constant([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    g_uc = u_sel3 - zf @ g_i
    k_i = TM.constant(1.5 / v0 * op.u_cdq.reshape(1, 2))
    k_u = TM.constant(1.5 / v0 * op.i_gdq.reshape(1, 2))
    dc_self = TM.constant([[0.0, 0.0, -op.i_dc / v0]])
    row_dc = -1.0 * (k_i @ g_i + k_u @ g_uc + dc_self)
    return TM.vstack([g_i, row_dc])


# ---------------------------------------------------------------------------
# operating point
# ---------------------------------------------------------------------------

def closed_form_operating_point(spec: ConverterSpec,
                                term: TerminalConditions) -> OperatingPoint:
    """Direct steady-state solution of the port algebra."""
    if term.u_mag <= 0 or term.v_dc <= 0:
        raise ValueError("terminal conditions need positive voltages")
    u0 = np.array([term.u_mag, 0.0])
    i0 = np.array([
        2.0 * term.p / (3.0 * term.u_mag),
        -2.0 * term.q / (3.0 * term.u_mag),
    ])
    zf0 = np.array([[spec.r_f, -spec.w_nom * spec.l_f],
                    [spec.w_nom * spec.l_f, spec.r_f]])
    u_c0 = u0 - zf0 @ i0
    m0 = u_c0 / term.v_dc
    i_dc0 = 1.5 * float(u_c0 @ i0) / term.v_dc
    return OperatingPoint(u_gdq=u0, i_gdq=i0, u_cdq=u_c0, m_dq=m0,
                          v_dc=term.v_dc, i_dc=i_dc0, w_sync=spec.w_nom)


def solve_operating_point(spec: ConverterSpec, term: TerminalConditions,
                          rtol: float = 1e-9) -> OperatingPoint:
    """Steady state of the averaged converter model against stiff sources.

    Seeds a damped Newton iteration on the nonlinear model equilibrium
    with the closed-form port solution, then validates the modulation
    and power-balance invariants to ``rtol``.
    """
    from . import simlab  # deferred: simlab builds on the types above

    op = simlab.polish_operating_point(spec, term)
    op.validate(rtol=rtol)
    return op


# ---------------------------------------------------------------------------
# modified sequence-domain transform
# ---------------------------------------------------------------------------

_A_SEQ = np.array([[1.0, 1.0j], [1.0, -1.0j]]) / np.sqrt(2.0)


def modified_sequence_map(n_ports: int, ac_index: int = 0) -> np.ndarray:
    """Unitary map taking the dq pair at ``ac_index`` to sequence pairs."""
    if ac_index < 0 or ac_index + 2 > n_ports:
        raise DimensionMismatch("ac port pair out of range")
    a = np.eye(n_ports, dtype=complex)
    a[ac_index:ac_index + 2, ac_index:ac_index + 2] = _A_SEQ
    return a


def dq_to_modified_sequence(mat: np.ndarray, ac_index: int = 0) -> np.ndarray:
    """Similarity transform of an evaluated matrix into the modified
    sequence domain.

    By default the matrix is expected with the ac dq pair in its first
    two rows/columns (order ac-d, ac-q, dc, sync for a four-port), which
    map to positive/negative sequence components; other ports are
    unchanged.  The map is unitary, so the spectrum is preserved.
    """
    mat = np.asarray(mat, dtype=complex)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"square matrix required, got {mat.shape}")
    a = modified_sequence_map(mat.shape[0], ac_index)
    return a @ mat @ a.conj().T
