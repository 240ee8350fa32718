"""Shared converter fixtures: a 2 MVA, 690 V / 1300 V dc pair of rigs."""

import numpy as np
import pytest

from syncmodal.converter import (
    BaseValues,
    ConverterSpec,
    GflControl,
    GfmControl,
    PiGains,
    TerminalConditions,
    solve_operating_point,
)

W1 = 2 * np.pi * 50.0
V_AC = 690.0 * np.sqrt(2.0 / 3.0)  # peak phase
S_B = 2e6
I_AC = 2.0 * S_B / (3.0 * V_AC)
V_DC = 1300.0
Z_B = V_AC / I_AC
L_F = 0.10 * Z_B / W1
R_F = 0.005 * Z_B
T_DELAY = 1.5e-4

BASE = BaseValues(v_ac=V_AC, i_ac=I_AC, v_dc=V_DC, i_dc=S_B / V_DC,
                  s_rated=S_B, w_nom=W1)
CURRENT_LOOP = PiGains(kp=2 * np.pi * 150 * L_F,
                       ki=2 * np.pi * 150 * L_F * 2 * np.pi * 25)

# PLL gains for a 20 Hz natural frequency at damping ratio 0.8, normalized
# by the peak phase voltage the loop measures
PLL_WN = 2 * np.pi * 20.0
PLL_GAINS = PiGains(kp=2 * 0.8 * PLL_WN / V_AC, ki=PLL_WN ** 2 / V_AC)


def make_gfm_spec(**overrides) -> ConverterSpec:
    ctl = GfmControl(j_sync=1.0 * S_B / W1, d_sync=10.0 * S_B / W1,
                     r_vir=0.1 * Z_B, l_vir=0.2 * Z_B / W1)
    kw = dict(kind="gfm", r_f=R_F, l_f=L_F, t_delay=T_DELAY,
              current_loop=CURRENT_LOOP, control=ctl, base=BASE)
    kw.update(overrides)
    return ConverterSpec(**kw)


def make_gfl_spec(**overrides) -> ConverterSpec:
    ctl = GflControl(pll=PLL_GAINS,
                     dc_loop=PiGains(kp=5.0, ki=300.0),
                     pq_loop=PiGains(kp=0.005, ki=0.3))
    kw = dict(kind="gfl", r_f=R_F, l_f=L_F, t_delay=T_DELAY,
              current_loop=CURRENT_LOOP, control=ctl, base=BASE)
    kw.update(overrides)
    return ConverterSpec(**kw)


# operating points: the grid-forming unit absorbs rated power, the
# grid-following unit delivers rated power, both at nominal voltages
TERM_GFM = TerminalConditions(u_mag=V_AC, p=1.0 * S_B, q=0.0, v_dc=V_DC)
TERM_GFL = TerminalConditions(u_mag=V_AC, p=-1.0 * S_B, q=0.0, v_dc=V_DC)


@pytest.fixture(scope="session")
def gfm_spec():
    return make_gfm_spec()


@pytest.fixture(scope="session")
def gfl_spec():
    return make_gfl_spec()


@pytest.fixture(scope="session")
def gfm_op(gfm_spec):
    return solve_operating_point(gfm_spec, TERM_GFM)


@pytest.fixture(scope="session")
def gfl_op(gfl_spec):
    return solve_operating_point(gfl_spec, TERM_GFL)


# ---------------------------------------------------------------------------
# the bundled two-terminal link: grid-forming sender, grid-following
# receiver, dc cable in between
# ---------------------------------------------------------------------------

SCR_GRID_1 = 5.0
SCR_GRID_2 = 5.6
X_OVER_R = 10.0
DC_CAP = 0.02
DC_R_LINE = 0.05
DC_L_LINE = 1.0e-3
# low virtual inertia keeps the damping-driven resonance above the PLL
# tracking band, where first-order sensitivity predictions stay accurate
LINK_J_PU = 0.015


def scr_to_rl(scr: float, x_over_r: float = X_OVER_R) -> tuple[float, float]:
    """Grid Thevenin (R, L) from a short-circuit ratio at the rated bus."""
    z = 1.5 * V_AC * V_AC / (scr * S_B)
    x = z * x_over_r / np.hypot(1.0, x_over_r)
    return x / x_over_r, x / W1


def build_hvdc_case(d_pu: float = 10.0, pll_hz: float = 20.0,
                    scr2: float = SCR_GRID_2):
    """Self-consistent link model plus its network system.

    Returns ``(model, x_eq, sys)``: the nonlinear state-space model at
    its polished equilibrium and the small-signal network built at the
    matching operating points.
    """
    from syncmodal.network import (
        EinSystem, Node, ac_grid_shunt, attach_converter, dc_capacitor,
        dc_line,
    )
    from syncmodal.simlab import DcLink, GridThevenin, build_consistent_hvdc

    wn = 2 * np.pi * pll_hz
    gfm = make_gfm_spec(control=GfmControl(
        j_sync=LINK_J_PU * S_B / W1, d_sync=d_pu * S_B / W1,
        r_vir=0.1 * Z_B, l_vir=0.2 * Z_B / W1))
    gfl = make_gfl_spec(control=GflControl(
        pll=PiGains(kp=2 * 0.8 * wn / V_AC, ki=wn * wn / V_AC),
        dc_loop=PiGains(kp=5.0, ki=300.0),
        pq_loop=PiGains(kp=0.005, ki=0.3)))
    r1, l1 = scr_to_rl(SCR_GRID_1)
    r2, l2 = scr_to_rl(scr2)
    model, x_eq = build_consistent_hvdc(
        gfm, gfl, TERM_GFM, TERM_GFL,
        GridThevenin(r=r1, l=l1), GridThevenin(r=r2, l=l2),
        DcLink(c_send=DC_CAP, c_recv=DC_CAP,
               r_line=DC_R_LINE, l_line=DC_L_LINE))
    op_send, op_recv = model.operating_points(x_eq)

    nodes = [Node(1, "sync", "sec_sync"), Node(2, "ac", "sec_ac"),
             Node(3, "dc", "sec_dc"), Node(4, "dc", "rec_dc"),
             Node(5, "ac", "rec_ac"), Node(6, "sync", "rec_sync")]
    elements = [
        ac_grid_shunt("grid1", 2, r1, l1, W1),
        dc_capacitor("cap_send", 3, DC_CAP, group="dc_link"),
        dc_line("line", 3, 4, DC_R_LINE, DC_L_LINE, group="dc_link"),
        dc_capacitor("cap_recv", 4, DC_CAP, group="dc_link"),
        ac_grid_shunt("grid2", 5, r2, l2, W1),
    ]
    sys = EinSystem(nodes, elements, [
        attach_converter("sec", gfm, op_send, sync_node=1, ac_node=2,
                         dc_node=3),
        attach_converter("rec", gfl, op_recv, sync_node=6, ac_node=5,
                         dc_node=4),
    ])
    return model, x_eq, sys


@pytest.fixture(scope="session")
def hvdc_baseline():
    return build_hvdc_case()
