"""Nonlinear averaged time-domain lab.

Builds averaged (switching-free) dq-frame models of single converters
against stiff sources and of the two-terminal dc link system, integrates
them with fixed-step RK4 (vectorized over batches of experiments), finds
equilibria by damped Newton, and linearizes by central finite
differences.  This module is the independent cross-check of the
frequency-domain models: nothing here evaluates a transfer matrix.

The bridge delay is realized as a strictly proper subdiagonal Pade
approximant (numerator degree one less than the denominator).  A proper
dead time has no feedthrough, and keeping the realization strictly
proper means the bridge voltage is a pure function of the state, so the
model has no algebraic loop through the measured-power outer controls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .converter import (
    ConverterSpec,
    GflControl,
    GfmControl,
    OperatingPoint,
    TerminalConditions,
    closed_form_operating_point,
)

__all__ = [
    "NumericalBlowup",
    "NoConvergence",
    "pade_delay_ss",
    "ConverterCore",
    "ConverterRig",
    "GridThevenin",
    "DcLink",
    "HvdcModel",
    "build_consistent_hvdc",
    "SimResult",
    "simulate",
    "trajectory_csv",
    "DftAccumulator",
    "newton_equilibrium",
    "fd_jacobian",
    "linearize_ss",
    "LinearizedModel",
    "polish_operating_point",
]


class NumericalBlowup(RuntimeError):
    """A simulated state left its bounded region; signals instability."""

    def __init__(self, t: float, detail: str = ""):
        self.t = t
        msg = f"state bound exceeded at t={t:.6f} s"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NoConvergence(RuntimeError):
    """Newton iteration failed to reach the requested residual."""

    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(residual rate {residual:.3e} 1/s)")


# ---------------------------------------------------------------------------
# delay realization
# ---------------------------------------------------------------------------

def pade_delay_ss(t_delay: float, order: int = 2
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    """Strictly proper Pade state space of ``exp(-s*t_delay)``.

    Returns ``(a, b, c)`` of the subdiagonal [order-1 / order]
    approximant in controllable companion form (no feedthrough), or
    ``None`` for a zero delay or zero order (exact passthrough).
    """
    if t_delay == 0.0 or order == 0:
        return None
    if t_delay < 0 or order < 1:
        raise ValueError("delay must be >= 0 and order >= 1")
    m = int(order)
    n = m - 1
    fact = math.factorial
    num = np.array([
        fact(n + m - k) * fact(n) / (fact(n + m) * fact(k) * fact(n - k))
        * (-t_delay) ** k
        for k in range(n + 1)
    ])
    den = np.array([
        fact(n + m - k) * fact(m) / (fact(n + m) * fact(k) * fact(m - k))
        * t_delay ** k
        for k in range(m + 1)
    ])
    num = num / den[-1]
    den = den / den[-1]
    a = np.zeros((m, m))
    a[:-1, 1:] = np.eye(m - 1)
    a[-1, :] = -den[:-1]
    b = np.zeros(m)
    b[-1] = 1.0
    c = np.zeros(m)
    c[:num.size] = num
    return a, b, c


# ---------------------------------------------------------------------------
# one converter as a reusable RHS block
# ---------------------------------------------------------------------------

class ConverterCore:
    """State block and RHS pieces of one converter, batch-vectorized.

    State layout: ``[i_d, i_q, xi_cc_d, xi_cc_q, z_d..., z_q..., theta,
    tail]`` where the tail is ``[xi_pll, xi_dcv, xi_pq]`` for
    grid-following and ``[w_dev, ir_d, ir_q]`` for grid-forming.  The
    filter current derivative is supplied by the owning circuit model;
    everything else is internal.
    """

    def __init__(self, spec: ConverterSpec, op: OperatingPoint,
                 pade_order: int = 2):
        self.spec = spec
        self.op = op
        self.w1 = spec.w_nom
        self.v_dc_nom = op.v_dc
        self.k_dec = spec.decoupling_gain
        self.delay_ss = pade_delay_ss(spec.t_delay, pade_order)
        self.n_del = 0 if self.delay_ss is None else self.delay_ss[0].shape[0]

        u0, i0 = op.u_gdq, op.i_gdq
        self.q_abs0 = 1.5 * (u0[1] * i0[0] - u0[0] * i0[1])
        self.p_abs0 = 1.5 * float(u0 @ i0)
        ctl = spec.control
        if spec.kind == "gfl":
            if ctl.dc_loop.ki <= 0 or ctl.pq_loop.ki <= 0 or ctl.pll.ki <= 0:
                raise ValueError("outer-loop integral gains must be positive")
            self.v_dc_ref = op.v_dc
            self.q_ref = self.q_abs0
        else:
            self.p_abs_ref = self.p_abs0  # drawn-power set-point
            r_v, l_v = ctl.r_vir, ctl.l_vir
            self.v_ref = np.array([
                u0[0] - r_v * i0[0] + self.w1 * l_v * i0[1],
                u0[1] - r_v * i0[1] - self.w1 * l_v * i0[0],
            ])

        nd = self.n_del
        self.ix_i = slice(0, 2)
        self.ix_xi = slice(2, 4)
        self.ix_zd = slice(4, 4 + nd)
        self.ix_zq = slice(4 + nd, 4 + 2 * nd)
        self.ix_theta = 4 + 2 * nd
        t0 = self.ix_theta + 1
        self.ix_tail = slice(t0, t0 + 3)
        self.n_states = t0 + 3

    # -- equilibrium ----------------------------------------------------

    def equilibrium(self) -> np.ndarray:
        spec, op = self.spec, self.op
        x = np.zeros(self.n_states)
        x[self.ix_i] = op.i_gdq
        eta0 = -op.u_cdq  # controller frame == island frame at theta = 0
        kp, ki = spec.current_loop.kp, spec.current_loop.ki
        dec = np.array([self.k_dec * op.i_gdq[1], -self.k_dec * op.i_gdq[0]])
        if ki > 0:
            e_cc0 = np.zeros(2)
            x[self.ix_xi] = (eta0 - dec) / ki
        else:
            e_cc0 = (eta0 - dec) / kp
        i_ref0 = op.i_gdq + e_cc0
        if self.delay_ss is not None:
            a, b, _ = self.delay_ss
            x[self.ix_zd] = np.linalg.solve(a, -b * eta0[0])
            x[self.ix_zq] = np.linalg.solve(a, -b * eta0[1])
        ctl = spec.control
        if spec.kind == "gfl":
            x[self.ix_tail] = [0.0,
                               -i_ref0[0] / ctl.dc_loop.ki,
                               i_ref0[1] / ctl.pq_loop.ki]
        else:
            x[self.ix_tail] = [0.0, i_ref0[0], i_ref0[1]]
        return x

    def neutral_indices(self) -> tuple[int, ...]:
        """States not pinned by the stiff-source rig dynamics."""
        if self.spec.kind == "gfl":
            # the dc-loop integrator sees a source-pinned voltage
            return (self.ix_tail.start + 1,)
        return ()

    def state_scale(self) -> np.ndarray:
        spec, op = self.spec, self.op
        base = spec.base
        sc = np.empty(self.n_states)
        sc[self.ix_i] = base.i_ac
        ki_cc = max(spec.current_loop.ki, 1e-12)
        sc[self.ix_xi] = base.v_ac / ki_cc
        if self.delay_ss is not None:
            # companion phase variables scale as (voltage / d0) * rate^k
            # with rate the characteristic pole magnitude of the chain
            a, _, _ = self.delay_ss
            m = a.shape[0]
            d0 = abs(a[-1, 0])
            rate = d0 ** (1.0 / m)
            z_b = (base.v_ac / d0) * rate ** np.arange(m)
            sc[self.ix_zd] = z_b
            sc[self.ix_zq] = z_b
        sc[self.ix_theta] = 1.0
        ctl = spec.control
        if spec.kind == "gfl":
            sc[self.ix_tail] = [base.w_nom / ctl.pll.ki,
                                base.i_ac / ctl.dc_loop.ki,
                                base.i_ac / ctl.pq_loop.ki]
        else:
            sc[self.ix_tail] = [base.w_nom, base.i_ac, base.i_ac]
        return np.maximum(sc, 1e-12)

    def state_names(self) -> list[str]:
        nd = self.n_del
        names = ["i_d", "i_q", "xi_cc_d", "xi_cc_q"]
        names += [f"z_d{k + 1}" for k in range(nd)]
        names += [f"z_q{k + 1}" for k in range(nd)]
        names.append("theta")
        if self.spec.kind == "gfl":
            names += ["xi_pll", "xi_dcv", "xi_pq"]
        else:
            names += ["w_dev", "ir_d", "ir_q"]
        return names

    # -- RHS pieces -----------------------------------------------------

    def bridge_voltage(self, x: np.ndarray, v_dc: np.ndarray) -> np.ndarray:
        """Island-frame bridge voltage from delay states (B, 2)."""
        if self.delay_ss is None:
            raise RuntimeError("bridge voltage is not state-determined "
                               "without a delay; use an explicit eta path")
        _, _, c = self.delay_ss
        y_d = x[:, self.ix_zd] @ c
        y_q = x[:, self.ix_zq] @ c
        m_d = -y_d / self.v_dc_nom
        m_q = -y_q / self.v_dc_nom
        th = x[:, self.ix_theta]
        ct, st = np.cos(th), np.sin(th)
        u_cd = (ct * m_d - st * m_q) * v_dc
        u_cq = (st * m_d + ct * m_q) * v_dc
        return np.stack([u_cd, u_cq], axis=1)

    def controls_rhs(self, x: np.ndarray, dx: np.ndarray, u_poc: np.ndarray,
                     v_dc: np.ndarray, p_inj: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
        """Fill the control-state derivatives; returns (w_dev, sync_sig)."""
        spec = self.spec
        i = x[:, self.ix_i]
        th = x[:, self.ix_theta]
        ct, st = np.cos(th), np.sin(th)
        # measured quantities in the controller frame
        i_c_d = ct * i[:, 0] + st * i[:, 1]
        i_c_q = -st * i[:, 0] + ct * i[:, 1]
        u_c_d = ct * u_poc[:, 0] + st * u_poc[:, 1]
        u_c_q = -st * u_poc[:, 0] + ct * u_poc[:, 1]

        ctl = spec.control
        if spec.kind == "gfl":
            xi_pll = x[:, self.ix_tail.start]
            xi_dcv = x[:, self.ix_tail.start + 1]
            xi_pq = x[:, self.ix_tail.start + 2]
            sync_sig = u_c_q
            e_pll = u_c_q + p_inj
            w_dev = ctl.pll.kp * e_pll + ctl.pll.ki * xi_pll
            q_abs = 1.5 * (u_poc[:, 1] * i[:, 0] - u_poc[:, 0] * i[:, 1])
            i_ref_d = -(ctl.dc_loop.kp * (v_dc - self.v_dc_ref)
                        + ctl.dc_loop.ki * xi_dcv)
            if ctl.pq_channel == "reactive":
                e_pq = q_abs - self.q_ref
            else:
                e_pq = 1.5 * (u_poc[:, 0] * i[:, 0] + u_poc[:, 1] * i[:, 1]) \
                    - self.p_abs0
            i_ref_q = ctl.pq_loop.kp * e_pq + ctl.pq_loop.ki * xi_pq
            dx[:, self.ix_tail.start] = e_pll
            dx[:, self.ix_tail.start + 1] = v_dc - self.v_dc_ref
            dx[:, self.ix_tail.start + 2] = e_pq
        else:
            w_dev = x[:, self.ix_tail.start]
            ir_d = x[:, self.ix_tail.start + 1]
            ir_q = x[:, self.ix_tail.start + 2]
            p_abs = 1.5 * (u_poc[:, 0] * i[:, 0] + u_poc[:, 1] * i[:, 1])
            # drawn-power excess accelerates the virtual rotor; paired with
            # the emf-behind-impedance current reference below this gives a
            # positive synchronizing torque and a passive output impedance
            sync_sig = p_abs - self.p_abs_ref
            imb = sync_sig + p_inj
            r_v, l_v = ctl.r_vir, ctl.l_vir
            dx[:, self.ix_tail.start] = (imb - ctl.d_sync * w_dev) / ctl.j_sync
            dx[:, self.ix_tail.start + 1] = (
                u_c_d - self.v_ref[0] - r_v * ir_d + self.w1 * l_v * ir_q) / l_v
            dx[:, self.ix_tail.start + 2] = (
                u_c_q - self.v_ref[1] - r_v * ir_q - self.w1 * l_v * ir_d) / l_v
            i_ref_d, i_ref_q = ir_d, ir_q

        dx[:, self.ix_theta] = w_dev

        # current PI with decoupling, then the delay chain input
        e_d = i_ref_d - i_c_d
        e_q = i_ref_q - i_c_q
        kp, ki = spec.current_loop.kp, spec.current_loop.ki
        eta_d = kp * e_d + ki * x[:, self.ix_xi.start] + self.k_dec * i_c_q
        eta_q = kp * e_q + ki * x[:, self.ix_xi.start + 1] - self.k_dec * i_c_d
        dx[:, self.ix_xi.start] = e_d
        dx[:, self.ix_xi.start + 1] = e_q
        if self.delay_ss is not None:
            a, b, _ = self.delay_ss
            dx[:, self.ix_zd] = x[:, self.ix_zd] @ a.T + np.outer(eta_d, b)
            dx[:, self.ix_zq] = x[:, self.ix_zq] @ a.T + np.outer(eta_q, b)
        return w_dev, sync_sig


# ---------------------------------------------------------------------------
# single converter against stiff sources
# ---------------------------------------------------------------------------

@dataclass
class _Injection:
    """Per-batch-row perturbation sources (arrays of shape (B,)).

    ``t_ramp`` is a raised-cosine turn-on time shared by the batch; a
    smooth onset keeps step-like spectral content out of lightly damped
    modes so the steady-state window can start sooner.
    """

    w: np.ndarray
    amp_pos: np.ndarray
    amp_neg: np.ndarray
    amp_dc: np.ndarray
    amp_sync: np.ndarray
    t_ramp: float = 0.0

    def envelope(self, t: float) -> float:
        if t >= self.t_ramp:
            return 1.0
        if t <= 0.0:
            return 0.0
        return 0.5 - 0.5 * math.cos(math.pi * t / self.t_ramp)

    @staticmethod
    def none(batch: int = 1) -> "_Injection":
        z = np.zeros(batch)
        return _Injection(z.copy(), z.copy(), z.copy(), z.copy(), z.copy())


class ConverterRig:
    """One converter fed by an ideal ac source and an ideal dc source.

    Perturbations: positive- and negative-sequence ac voltage injections
    in series with the ac source, a series dc voltage injection, and an
    additive injection into the synchronization feedback signal.
    """

    def __init__(self, spec: ConverterSpec, op: OperatingPoint,
                 pade_order: int = 2):
        self.spec = spec
        self.op = op
        self.core = ConverterCore(spec, op, pade_order)
        self.n_states = self.core.n_states
        self.inj = _Injection.none()

    def set_injection(self, w: np.ndarray, amp_pos: np.ndarray,
                      amp_neg: np.ndarray, amp_dc: np.ndarray,
                      amp_sync: np.ndarray, t_ramp: float = 0.0) -> None:
        arrs = [np.atleast_1d(np.asarray(a, dtype=float))
                for a in (w, amp_pos, amp_neg, amp_dc, amp_sync)]
        b = arrs[0].size
        if any(a.size != b for a in arrs):
            raise ValueError("injection arrays must share one batch size")
        self.inj = _Injection(*arrs, t_ramp=float(t_ramp))

    def clear_injection(self) -> None:
        self.inj = _Injection.none()

    def _sources(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        inj = self.inj
        env = inj.envelope(t)
        wt = inj.w * t
        cwt, swt = np.cos(wt) * env, np.sin(wt) * env
        u_inj_d = (inj.amp_pos + inj.amp_neg) * cwt
        u_inj_q = (inj.amp_pos - inj.amp_neg) * swt
        u_poc = self.op.u_gdq[None, :] + np.stack([u_inj_d, u_inj_q], axis=1)
        v_dc = self.op.v_dc + inj.amp_dc * swt
        p_inj = inj.amp_sync * swt
        return u_poc, v_dc, p_inj

    def rhs(self, t: float, x: np.ndarray) -> np.ndarray:
        x_was_1d = x.ndim == 1
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        u_poc, v_dc, p_inj = self._sources(t)
        if u_poc.shape[0] == 1 and x2.shape[0] > 1:
            u_poc = np.broadcast_to(u_poc, (x2.shape[0], 2))
            v_dc = np.broadcast_to(v_dc, (x2.shape[0],))
            p_inj = np.broadcast_to(p_inj, (x2.shape[0],))
        dx = np.zeros_like(x2)
        core = self.core
        u_c = core.bridge_voltage(x2, v_dc)
        i = x2[:, core.ix_i]
        r_f, l_f, w1 = self.spec.r_f, self.spec.l_f, self.spec.w_nom
        dx[:, 0] = (u_poc[:, 0] - u_c[:, 0] - r_f * i[:, 0]
                    + w1 * l_f * i[:, 1]) / l_f
        dx[:, 1] = (u_poc[:, 1] - u_c[:, 1] - r_f * i[:, 1]
                    - w1 * l_f * i[:, 0]) / l_f
        core.controls_rhs(x2, dx, u_poc, v_dc, p_inj)
        return dx[0] if x_was_1d else dx

    def measure(self, t: float, x: np.ndarray) -> np.ndarray:
        """Port deviations, shape (8, B): voltages then currents.

        Rows: (w_sync, u_d, u_q, v_dc) then (sync signal, i_d, i_q,
        i_dc drawn), all as deviations from the operating point.
        """
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        u_poc, v_dc, p_inj = self._sources(t)
        if u_poc.shape[0] == 1 and x2.shape[0] > 1:
            u_poc = np.broadcast_to(u_poc, (x2.shape[0], 2))
            v_dc = np.broadcast_to(v_dc, (x2.shape[0],))
            p_inj = np.broadcast_to(p_inj, (x2.shape[0],))
        core = self.core
        dx = np.zeros_like(x2)
        w_dev, sync_sig = core.controls_rhs(x2, dx, u_poc, v_dc, p_inj)
        u_c = core.bridge_voltage(x2, v_dc)
        i = x2[:, core.ix_i]
        i_dc_drawn = -1.5 * (u_c[:, 0] * i[:, 0] + u_c[:, 1] * i[:, 1]) / v_dc
        op = self.op
        return np.stack([
            w_dev,
            u_poc[:, 0] - op.u_gdq[0],
            u_poc[:, 1] - op.u_gdq[1],
            v_dc - op.v_dc,
            sync_sig,
            i[:, 0] - op.i_gdq[0],
            i[:, 1] - op.i_gdq[1],
            i_dc_drawn + op.i_dc,
        ])

    def equilibrium_guess(self) -> np.ndarray:
        return self.core.equilibrium()

    def state_scale(self) -> np.ndarray:
        return self.core.state_scale()

    def state_names(self) -> list[str]:
        return self.core.state_names()

    def extract_operating_point(self, x: np.ndarray) -> OperatingPoint:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        core = self.core
        v_dc = np.full(x2.shape[0], self.op.v_dc)
        u_c = core.bridge_voltage(x2, v_dc)[0]
        i = x2[0, core.ix_i].copy()
        i_dc = 1.5 * float(u_c @ i) / self.op.v_dc
        return OperatingPoint(
            u_gdq=self.op.u_gdq.copy(), i_gdq=i, u_cdq=u_c,
            m_dq=u_c / self.op.v_dc, v_dc=self.op.v_dc, i_dc=i_dc,
            w_sync=self.spec.w_nom)


# ---------------------------------------------------------------------------
# two-terminal dc link system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridThevenin:
    """Series R-L equivalent of an ac island behind the converter node."""

    r: float
    l: float

    def __post_init__(self):
        if self.l <= 0 or self.r < 0:
            raise ValueError("grid equivalent needs l > 0 and r >= 0")


@dataclass(frozen=True)
class DcLink:
    """Terminal capacitors joined by a series R-L dc line."""

    c_send: float
    c_recv: float
    r_line: float
    l_line: float

    def __post_init__(self):
        if min(self.c_send, self.c_recv, self.l_line) <= 0 or self.r_line < 0:
            raise ValueError("dc link needs positive C, L and r >= 0")


class HvdcModel:
    """Sending and receiving converters joined by the dc link.

    State layout: sending converter block, receiving converter block,
    then ``[v_dc_send, v_dc_recv, i_line]``.  Each ac island is a stiff
    source behind a series R-L; node voltages are algebraic.
    """

    def __init__(self, send: ConverterCore, recv: ConverterCore,
                 grid_send: GridThevenin, grid_recv: GridThevenin,
                 dc: DcLink, i_line0: float):
        self.send = send
        self.recv = recv
        self.grid_send = grid_send
        self.grid_recv = grid_recv
        self.dc = dc
        self.i_line0 = i_line0
        # stiff sources chosen so the node voltages hit the operating point
        self.u_src_send = self._thevenin_source(send, grid_send)
        self.u_src_recv = self._thevenin_source(recv, grid_recv)
        self.off_recv = send.n_states
        self.off_dc = send.n_states + recv.n_states
        self.n_states = self.off_dc + 3

    @staticmethod
    def _thevenin_source(core: ConverterCore, grid: GridThevenin) -> np.ndarray:
        u0, i0 = core.op.u_gdq, core.op.i_gdq
        w1 = core.w1
        return np.array([
            u0[0] + grid.r * i0[0] - w1 * grid.l * i0[1],
            u0[1] + grid.r * i0[1] + w1 * grid.l * i0[0],
        ])

    def equilibrium_guess(self) -> np.ndarray:
        x = np.zeros(self.n_states)
        x[:self.off_recv] = self.send.equilibrium()
        x[self.off_recv:self.off_dc] = self.recv.equilibrium()
        x[self.off_dc] = self.send.op.v_dc
        x[self.off_dc + 1] = self.recv.op.v_dc
        x[self.off_dc + 2] = self.i_line0
        return x

    def state_scale(self) -> np.ndarray:
        sc = np.empty(self.n_states)
        sc[:self.off_recv] = self.send.state_scale()
        sc[self.off_recv:self.off_dc] = self.recv.state_scale()
        sc[self.off_dc] = self.send.spec.base.v_dc
        sc[self.off_dc + 1] = self.recv.spec.base.v_dc
        sc[self.off_dc + 2] = self.send.spec.base.i_dc
        return sc

    def state_names(self) -> list[str]:
        return ([f"send_{n}" for n in self.send.state_names()]
                + [f"recv_{n}" for n in self.recv.state_names()]
                + ["v_dc_send", "v_dc_recv", "i_dc_line"])

    def _side_rhs(self, core: ConverterCore, grid: GridThevenin,
                  u_src: np.ndarray, x: np.ndarray, dx: np.ndarray,
                  v_dc: np.ndarray) -> np.ndarray:
        """One island: circuit + controls; returns bridge power (B,)."""
        u_c = core.bridge_voltage(x, v_dc)
        i = x[:, core.ix_i]
        spec = core.spec
        r_t = spec.r_f + grid.r
        l_t = spec.l_f + grid.l
        w1 = core.w1
        di_d = (u_src[0] - u_c[:, 0] - r_t * i[:, 0] + w1 * l_t * i[:, 1]) / l_t
        di_q = (u_src[1] - u_c[:, 1] - r_t * i[:, 1] - w1 * l_t * i[:, 0]) / l_t
        dx[:, core.ix_i.start] = di_d
        dx[:, core.ix_i.start + 1] = di_q
        u_poc = np.stack([
            u_src[0] - grid.r * i[:, 0] - grid.l * di_d + w1 * grid.l * i[:, 1],
            u_src[1] - grid.r * i[:, 1] - grid.l * di_q - w1 * grid.l * i[:, 0],
        ], axis=1)
        zero = np.zeros(x.shape[0])
        core.controls_rhs(x, dx, u_poc, v_dc, zero)
        return 1.5 * (u_c[:, 0] * i[:, 0] + u_c[:, 1] * i[:, 1]) / v_dc

    def rhs(self, t: float, x: np.ndarray) -> np.ndarray:
        x_was_1d = x.ndim == 1
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        dx = np.zeros_like(x2)
        v_s = x2[:, self.off_dc]
        v_r = x2[:, self.off_dc + 1]
        i_line = x2[:, self.off_dc + 2]
        xs = x2[:, :self.off_recv]
        xr = x2[:, self.off_recv:self.off_dc]
        i_dc_s = self._side_rhs(self.send, self.grid_send, self.u_src_send,
                                xs, dx[:, :self.off_recv], v_s)
        i_dc_r = self._side_rhs(self.recv, self.grid_recv, self.u_src_recv,
                                xr, dx[:, self.off_recv:self.off_dc], v_r)
        dc = self.dc
        dx[:, self.off_dc] = (i_dc_s - i_line) / dc.c_send
        dx[:, self.off_dc + 1] = (i_line + i_dc_r) / dc.c_recv
        dx[:, self.off_dc + 2] = (v_s - v_r - dc.r_line * i_line) / dc.l_line
        return dx[0] if x_was_1d else dx

    def equilibrium(self) -> np.ndarray:
        """Newton-polished equilibrium seeded from the converter set-points."""
        return newton_equilibrium(lambda x: self.rhs(0.0, x),
                                  self.equilibrium_guess(),
                                  self.state_scale())

    def operating_points(self, x: np.ndarray
                         ) -> tuple[OperatingPoint, OperatingPoint]:
        """Port quantities of both converters at an equilibrium state.

        Each converter's operating point is returned in its own
        ac-island frame aligned with the node voltage (u_gq = 0); the
        islands only couple through the scalar dc and sync ports, so
        per-island alignment leaves the interconnected dynamics
        untouched while matching the frame convention of the
        small-signal converter blocks.
        """
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        sides = (
            (self.send, self.grid_send, self.u_src_send,
             x2[:, :self.off_recv], x2[:, self.off_dc]),
            (self.recv, self.grid_recv, self.u_src_recv,
             x2[:, self.off_recv:self.off_dc], x2[:, self.off_dc + 1]),
        )
        out = []
        for core, grid, u_src, xs, v_dc in sides:
            i = xs[0, core.ix_i]
            u_c = core.bridge_voltage(xs, v_dc)[0]
            w1 = core.w1
            u_poc = np.array([
                u_src[0] - grid.r * i[0] + w1 * grid.l * i[1],
                u_src[1] - grid.r * i[1] - w1 * grid.l * i[0],
            ])
            phi = math.atan2(u_poc[1], u_poc[0])
            c, s = math.cos(phi), math.sin(phi)
            rot = np.array([[c, s], [-s, c]])
            vdc = float(v_dc[0])
            i_rot = rot @ i
            u_c_rot = rot @ u_c
            out.append(OperatingPoint(
                u_gdq=np.array([math.hypot(u_poc[0], u_poc[1]), 0.0]),
                i_gdq=i_rot,
                u_cdq=u_c_rot,
                m_dq=u_c_rot / vdc,
                v_dc=vdc,
                i_dc=1.5 * float(u_c_rot @ i_rot) / vdc,
                w_sync=core.w1,
            ))
        return out[0], out[1]

    def probe(self, t: float, x: np.ndarray) -> np.ndarray:
        """Signals for oracle spectral checks, shape (n_sig, B)."""
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        xs = x2[:, :self.off_recv]
        xr = x2[:, self.off_recv:self.off_dc]
        return np.stack([
            xs[:, 0] - self.send.op.i_gdq[0],
            xs[:, 1] - self.send.op.i_gdq[1],
            xr[:, 0] - self.recv.op.i_gdq[0],
            xr[:, 1] - self.recv.op.i_gdq[1],
            x2[:, self.off_dc] - self.send.op.v_dc,
            x2[:, self.off_dc + 1] - self.recv.op.v_dc,
            xs[:, self.send.ix_theta],
            xr[:, self.recv.ix_theta],
        ])


def build_consistent_hvdc(send_spec, recv_spec, term_send, term_recv,
                          grid_send: GridThevenin, grid_recv: GridThevenin,
                          dc: DcLink, pade_order: int = 2,
                          max_rounds: int = 12, rtol: float = 1e-9
                          ) -> tuple["HvdcModel", np.ndarray]:
    """Two-terminal system whose set-points equal its own equilibrium.

    The stiff-terminal operating points only approximate the networked
    equilibrium (the dc line drop shifts the sending-side voltage, and
    the ac set-points ignore each other's power flow).  Controller
    references and the modulation divisor derive from the operating
    point, so the model is rebuilt at each polished equilibrium until
    the extracted operating points reproduce themselves.  Returns the
    fixed-point model and its equilibrium state.
    """
    from .converter import solve_operating_point

    op_send = solve_operating_point(send_spec, term_send)
    op_recv = solve_operating_point(recv_spec, term_recv)
    model = None
    x_eq = None
    for _ in range(max_rounds):
        model = HvdcModel(ConverterCore(send_spec, op_send, pade_order),
                          ConverterCore(recv_spec, op_recv, pade_order),
                          grid_send, grid_recv, dc, i_line0=op_send.i_dc)
        x_eq = model.equilibrium()
        new_send, new_recv = model.operating_points(x_eq)
        gap = 0.0
        for old, new in ((op_send, new_send), (op_recv, new_recv)):
            for name in ("u_gdq", "i_gdq", "u_cdq", "v_dc", "i_dc"):
                a = np.asarray(getattr(old, name), dtype=float)
                b = np.asarray(getattr(new, name), dtype=float)
                scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
                gap = max(gap, float(np.max(np.abs(a - b))) / scale)
        op_send, op_recv = new_send, new_recv
        if gap < rtol:
            return model, x_eq
    raise NoConvergence(max_rounds, gap)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

@dataclass
class SimResult:
    t_end: float
    x_final: np.ndarray
    t_rec: np.ndarray | None = None
    x_rec: np.ndarray | None = None
    blowup_t: float | None = None


def trajectory_csv(result: SimResult, state_names: Sequence[str]) -> str:
    """Recorded trajectory as deterministic CSV text: t plus named states."""
    if result.t_rec is None or result.x_rec is None:
        raise ValueError("simulate was run without record_every")
    x = np.asarray(result.x_rec)
    if x.ndim == 3:
        if x.shape[1] != 1:
            raise ValueError("CSV export needs an unbatched trajectory")
        x = x[:, 0, :]
    if x.shape[1] != len(state_names):
        raise ValueError("state_names length does not match the trajectory")
    lines = ["t," + ",".join(state_names)]
    for tk, row in zip(result.t_rec, x):
        lines.append(format(tk, ".17g") + ","
                     + ",".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def simulate(model, x0: np.ndarray, t_end: float, dt: float,
             observers: Sequence = (),
             record_every: int = 0,
             blowup_factor: float = 50.0,
             check_every: int = 25,
             raise_on_blowup: bool = True,
             t0: float = 0.0) -> SimResult:
    """Fixed-step RK4 integration of ``model.rhs``.

    ``observers`` are called as ``obs(step, t, x)`` on the initial state
    (step 0) and after every accepted step.  With ``record_every > 0``
    the (possibly batched) state is stored every that many steps.  States are bounded by
    ``blowup_factor * model.state_scale()``; exceeding the bound raises
    :class:`NumericalBlowup` (or truncates the run when
    ``raise_on_blowup`` is false).
    """
    if dt <= 0 or t_end <= t0:
        raise ValueError("need dt > 0 and t_end > t0")
    x = np.array(x0, dtype=float)
    n_steps = int(round((t_end - t0) / dt))
    bound = blowup_factor * model.state_scale()
    rhs = model.rhs
    ts, xs = [], []
    if record_every:
        ts.append(t0)
        xs.append(x.copy())
    blowup_t = None
    t = t0
    for obs in observers:
        obs(0, t, x)
    for k in range(1, n_steps + 1):
        k1 = rhs(t, x)
        k2 = rhs(t + 0.5 * dt, x + (0.5 * dt) * k1)
        k3 = rhs(t + 0.5 * dt, x + (0.5 * dt) * k2)
        k4 = rhs(t + dt, x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + k * dt
        if k % check_every == 0 or k == n_steps:
            if not np.all(np.isfinite(x)) or np.any(np.abs(x) > bound):
                blowup_t = t
                if raise_on_blowup:
                    raise NumericalBlowup(t)
                break
        for obs in observers:
            obs(k, t, x)
        if record_every and k % record_every == 0:
            ts.append(t)
            xs.append(x.copy())
    return SimResult(
        t_end=t, x_final=x,
        t_rec=np.array(ts) if record_every else None,
        x_rec=np.array(xs) if record_every else None,
        blowup_t=blowup_t)


class DftAccumulator:
    """Single-bin trapezoid DFT of measured signals over a step window.

    Accumulates ``(2/T) * integral(y(t) * exp(-1j*w*t) dt)`` over steps
    ``k_start..k_end`` so a signal ``Re[Y exp(1j*w*t)]`` yields phasor
    ``Y``.  Windows spanning an integer number of periods make the
    off-bin response of any other integer-period tone vanish to
    near machine precision (trapezoid sums of periodic integrands).
    """

    def __init__(self, w: float, k_start: int, k_end: int, dt: float,
                 measure: Callable[[float, np.ndarray], np.ndarray]):
        if k_end <= k_start:
            raise ValueError("empty accumulation window")
        self.w = w
        self.k_start = k_start
        self.k_end = k_end
        self.dt = dt
        self.measure = measure
        self.acc: np.ndarray | None = None

    def __call__(self, k: int, t: float, x: np.ndarray) -> None:
        if k < self.k_start or k > self.k_end:
            return
        y = self.measure(t, x) * np.exp(-1j * self.w * t)
        if k == self.k_start or k == self.k_end:
            y = 0.5 * y
        self.acc = y if self.acc is None else self.acc + y

    def phasors(self) -> np.ndarray:
        if self.acc is None:
            raise RuntimeError("accumulator never saw its window")
        t_win = (self.k_end - self.k_start) * self.dt
        return self.acc * (2.0 * self.dt / t_win)


# ---------------------------------------------------------------------------
# equilibrium and linearization
# ---------------------------------------------------------------------------

def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                rel: float = 1e-6, floor: float = 1e-8) -> np.ndarray:
    """Central-difference Jacobian with steps ``max(floor, rel*|x_i|)``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = max(floor, rel * abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h)
    return jac


def newton_equilibrium(fun: Callable[[np.ndarray], np.ndarray],
                       x0: np.ndarray, scale: np.ndarray,
                       pinned: Sequence[int] = (),
                       tol_rate: float = 3e-6,
                       max_iter: int = 60) -> np.ndarray:
    """Damped Newton solve of ``fun(x) = 0`` on the non-pinned coordinates.

    ``scale`` sets per-state magnitudes; convergence requires the
    normalized drift ``max |fun_i| / scale_i`` to fall below
    ``tol_rate`` (units 1/s).  Pinned coordinates are held fixed, which
    removes neutral directions such as integrators whose inputs are
    source-pinned.
    """
    x = np.array(x0, dtype=float)
    scale = np.asarray(scale, dtype=float)
    free = np.ones(x.size, dtype=bool)
    for i in pinned:
        free[i] = False

    def norm(f):
        return float(np.max(np.abs(f[free]) / scale[free]))

    f = np.asarray(fun(x))
    best = norm(f)
    for it in range(max_iter):
        if best < tol_rate:
            return x
        jac = fd_jacobian(fun, x)
        jac_ff = jac[np.ix_(free, free)]
        try:
            step = np.linalg.solve(jac_ff, -f[free])
        except np.linalg.LinAlgError as err:
            raise NoConvergence(it, best) from err
        alpha = 1.0
        while alpha >= 1.0 / 256.0:
            x_try = x.copy()
            x_try[free] += alpha * step
            f_try = np.asarray(fun(x_try))
            n_try = norm(f_try)
            if n_try < best * (1.0 - 0.25 * alpha) or n_try < tol_rate:
                x, f, best = x_try, f_try, n_try
                break
            alpha *= 0.5
        else:
            raise NoConvergence(it + 1, best)
    if best < tol_rate:
        return x
    raise NoConvergence(max_iter, best)


@dataclass(frozen=True)
class LinearizedModel:
    """State matrix and its eigenvalues, sorted by descending real part."""

    a: np.ndarray
    eigenvalues: np.ndarray

    @property
    def max_real(self) -> float:
        return float(self.eigenvalues[0].real)


def linearize_ss(model, x_eq: np.ndarray) -> LinearizedModel:
    """Central-difference state matrix of ``model.rhs`` at an equilibrium."""
    a = fd_jacobian(lambda x: model.rhs(0.0, x), np.asarray(x_eq, float))
    eigs = np.linalg.eigvals(a)
    order = np.argsort(-eigs.real)
    return LinearizedModel(a=a, eigenvalues=eigs[order])


def polish_operating_point(spec: ConverterSpec, term: TerminalConditions,
                           pade_order: int = 2) -> OperatingPoint:
    """Newton-refined steady state of the stiff-source rig."""
    op0 = closed_form_operating_point(spec, term)
    rig = ConverterRig(spec, op0, pade_order)
    x = newton_equilibrium(
        lambda x: rig.rhs(0.0, x), rig.equilibrium_guess(),
        rig.state_scale(), pinned=rig.core.neutral_indices())
    return rig.extract_operating_point(x)
