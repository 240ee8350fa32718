"""Interconnected-system assembly: stamping, ordering, scaling."""

import numpy as np
import pytest

from conftest import S_B, V_AC, V_DC, W1
from syncmodal.converter import build_eim, dq_rl_admittance
from syncmodal.lti import DimensionMismatch, TransferMatrix as TM
from syncmodal.network import (Attachment, Branch, EinSystem, Node, NodeTable,
                               Shunt, ac_grid_shunt, assemble_ycon,
                               assemble_znet, attach_converter,
                               closed_loop_voltage, dc_capacitor, dc_line,
                               loop_gain, per_unit, stamped_admittance)

RNG = np.random.default_rng(7)


def random_s(n=10):
    return [complex(RNG.uniform(-100.0, 100.0), RNG.uniform(1.0, 2000.0))
            for _ in range(n)]


def scr_link(scr, x_over_r=10.0):
    """Grid Thevenin R, L at the shared ac base, from a short-circuit ratio."""
    z = V_AC / ((2.0 / 3.0) * scr * S_B / V_AC)
    x = z * x_over_r / np.hypot(1.0, x_over_r)
    return x / x_over_r, x / W1


TESTCASE_NODES = [
    Node(1, "sync", "sec_sync"),
    Node(2, "ac", "sec_ac"),
    Node(3, "dc", "sec_dc"),
    Node(4, "dc", "rec_dc"),
    Node(5, "ac", "rec_ac"),
    Node(6, "sync", "rec_sync"),
]


def make_elements(scr1=5.0, scr2=5.6, c_dc=0.01, r_line=0.05,
                      l_line=1e-3):
    r1, l1 = scr_link(scr1)
    r2, l2 = scr_link(scr2)
    return [
        ac_grid_shunt("grid1", 2, r1, l1, W1),
        dc_capacitor("cap_send", 3, c_dc, group="dc_link"),
        dc_line("line", 3, 4, r_line, l_line, group="dc_link"),
        dc_capacitor("cap_recv", 4, c_dc, group="dc_link"),
        ac_grid_shunt("grid2", 5, r2, l2, W1),
    ]


@pytest.fixture(scope="module")
def testcase_sys(gfm_spec, gfm_op, gfl_spec, gfl_op):
    sec = attach_converter("sec", gfm_spec, gfm_op,
                           sync_node=1, ac_node=2, dc_node=3)
    rec = attach_converter("rec", gfl_spec, gfl_op,
                           sync_node=6, ac_node=5, dc_node=4)
    return EinSystem(TESTCASE_NODES, make_elements(), [sec, rec])


# ---------------------------------------------------------------------------
# node table
# ---------------------------------------------------------------------------

def test_node_table_orders_by_id_and_assigns_spans():
    table = NodeTable([Node(5, "ac", "x"), Node(1, "sync"), Node(3, "dc")])
    assert [n.node_id for n in table.nodes] == [1, 3, 5]
    assert table.total_width == 4
    assert table.offset(1) == 0
    assert table.offset(3) == 1
    assert table.span(5) == [2, 3]
    assert table.signal_labels() == ["node1", "node3", "x_d", "x_q"]


def test_node_table_rejects_duplicates_and_bad_kinds():
    with pytest.raises(ValueError, match="duplicate"):
        NodeTable([Node(1, "ac"), Node(1, "dc")])
    with pytest.raises(ValueError, match="kind"):
        Node(1, "mystery")


def test_testcase_table_layout():
    table = NodeTable(TESTCASE_NODES)
    assert table.total_width == 8
    assert table.span(2) == [1, 2]
    assert table.span(5) == [5, 6]
    assert table.offset(6) == 7


# ---------------------------------------------------------------------------
# stamping
# ---------------------------------------------------------------------------

def test_dc_subblock_matches_cap_and_line_stamp():
    c_s, c_r, r, l = 0.012, 0.009, 0.04, 2e-3
    table = NodeTable([Node(3, "dc"), Node(4, "dc")])
    stamp = stamped_admittance(table, [
        dc_capacitor("cs", 3, c_s),
        dc_line("line", 3, 4, r, l),
        dc_capacitor("cr", 4, c_r),
    ])
    for s in random_s(6):
        y_l = 1.0 / (r + s * l)
        want = np.array([[s * c_s + y_l, -y_l], [-y_l, s * c_r + y_l]])
        np.testing.assert_allclose(stamp.eval(s), want, rtol=1e-13)


def test_single_ac_node_inductive_grid_gives_dq_impedance():
    l_g = 3e-3
    table = NodeTable([Node(1, "ac")])
    sys = EinSystem(table, [ac_grid_shunt("grid", 1, 0.0, l_g, W1)],
                    extra_bases={1: (V_AC, S_B / V_AC)})
    z = assemble_znet(sys)
    for s in random_s(6):
        want = np.array([[s * l_g, -W1 * l_g], [W1 * l_g, s * l_g]])
        np.testing.assert_allclose(z.eval(s), want, rtol=1e-12)


def test_decoupled_nodes_give_exactly_block_diagonal_znet():
    table = NodeTable([Node(1, "ac"), Node(2, "dc")])
    sys = EinSystem(table, [ac_grid_shunt("g", 1, 0.1, 1e-3, W1),
                            dc_capacitor("c", 2, 0.01)],
                    extra_bases={1: (1.0, 1.0), 2: (1.0, 1.0)})
    z = assemble_znet(sys).eval(5.0 + 40.0j)
    assert np.all(z[0:2, 2] == 0.0)
    assert np.all(z[2, 0:2] == 0.0)


def test_sync_rows_of_znet_decouple_from_electrical_nodes(testcase_sys):
    z = assemble_znet(testcase_sys)
    for s in random_s(5):
        m = z.eval(s)
        for p in (0, 7):
            off = [k for k in range(8) if k != p]
            assert np.max(np.abs(m[p, off])) == 0.0
            assert np.max(np.abs(m[off, p])) == 0.0
            assert m[p, p] != 0.0


def test_znet_inverts_the_stamp(testcase_sys):
    z = assemble_znet(testcase_sys)
    stamp = testcase_sys.y_stamp
    for s in random_s(10):
        prod = z.eval(s) @ stamp.eval(s)
        np.testing.assert_allclose(prod, np.eye(8), atol=1e-10)


def test_elements_may_not_touch_sync_nodes():
    with pytest.raises(ValueError, match="sync node"):
        EinSystem(NodeTable([Node(1, "sync"), Node(2, "dc")]),
                  [dc_line("bad", 1, 2, 0.1, 1e-3)],
                  extra_bases={1: (1.0, 1.0), 2: (1.0, 1.0)})


# ---------------------------------------------------------------------------
# converter feedback placement
# ---------------------------------------------------------------------------

def test_single_converter_canonical_order_reproduces_eim(gfm_spec, gfm_op):
    conv = attach_converter("one", gfm_spec, gfm_op,
                            sync_node=1, ac_node=2, dc_node=3)
    sys = EinSystem([Node(1, "sync"), Node(2, "ac"), Node(3, "dc")],
                    [ac_grid_shunt("g", 2, 0.01, 1e-3, W1),
                     dc_capacitor("c", 3, 0.01)], [conv])
    y = assemble_ycon(sys)
    for s in random_s(4):
        np.testing.assert_allclose(y.eval(s), conv.eim.y.eval(s), rtol=0,
                                   atol=0)


def test_testcase_ycon_permutes_rec_block(testcase_sys):
    sec, rec = testcase_sys.converters
    y = assemble_ycon(testcase_sys)
    s = 12.0 + 150.0j
    m = y.eval(s)
    sec_idx = [0, 1, 2, 3]
    rec_idx = [7, 5, 6, 4]
    np.testing.assert_allclose(m[np.ix_(sec_idx, sec_idx)],
                               sec.eim.y.eval(s), rtol=0, atol=0)
    np.testing.assert_allclose(m[np.ix_(rec_idx, rec_idx)],
                               rec.eim.y.eval(s), rtol=0, atol=0)
    # the rec rows appear in global order (dc, ac_d, ac_q, sync)
    assert m[4, 4] == rec.eim.y.eval(s)[3, 3]
    assert np.all(m[0:4, 4:8] == 0.0)
    assert np.all(m[4:8, 0:4] == 0.0)


def test_zeroed_eim_leaves_other_block_unchanged(testcase_sys, gfl_spec,
                                                 gfm_spec, gfm_op):
    sec, rec = testcase_sys.converters
    dead = Attachment("rec", gfl_spec,
                      type(rec.eim)(kind="gfl", y=TM.zeros(4, 4),
                                    z_sync_fo=rec.eim.z_sync_fo),
                      sync_node=6, ac_node=5, dc_node=4)
    sys2 = EinSystem(TESTCASE_NODES, make_elements(), [sec, dead])
    s = 3.0 + 80.0j
    m = assemble_ycon(sys2).eval(s)
    assert np.all(m[4:8, :] == 0.0)
    assert np.all(m[:, 4:8] == 0.0)
    np.testing.assert_allclose(m[0:4, 0:4],
                               assemble_ycon(testcase_sys).eval(s)[0:4, 0:4],
                               rtol=0, atol=0)


def test_converter_node_kind_mismatch_rejected(gfm_spec, gfm_op):
    conv = attach_converter("one", gfm_spec, gfm_op,
                            sync_node=1, ac_node=3, dc_node=2)
    with pytest.raises(ValueError, match="binds its ac port"):
        EinSystem([Node(1, "sync"), Node(2, "ac"), Node(3, "dc")],
                  [], [conv])


# ---------------------------------------------------------------------------
# per-unit scaling
# ---------------------------------------------------------------------------

def test_gfm_base_vectors(gfm_spec, gfm_op):
    conv = attach_converter("one", gfm_spec, gfm_op,
                            sync_node=1, ac_node=2, dc_node=3)
    sys = EinSystem([Node(1, "sync"), Node(2, "ac"), Node(3, "dc")],
                    [ac_grid_shunt("g", 2, 0.01, 1e-3, W1),
                     dc_capacitor("c", 3, 0.01)], [conv])
    b = gfm_spec.base
    np.testing.assert_allclose(sys.u_base, [W1, V_AC, V_AC, V_DC])
    np.testing.assert_allclose(sys.i_base, [S_B, b.i_ac, b.i_ac, b.i_dc])


def test_per_unit_with_unit_bases_is_identity():
    table = NodeTable([Node(1, "dc")])
    sys = EinSystem(table, [dc_capacitor("c", 1, 0.02)],
                    extra_bases={1: (1.0, 1.0)})
    z_pu, y_pu = per_unit(sys)
    s = 2.0 + 30.0j
    np.testing.assert_allclose(z_pu.eval(s), sys.z_net.eval(s), rtol=0,
                               atol=0)
    np.testing.assert_allclose(y_pu.eval(s), sys.y_con.eval(s), rtol=0,
                               atol=0)


def test_per_unit_preserves_loop_spectrum(testcase_sys):
    l_pu = loop_gain(testcase_sys)
    z, y = testcase_sys.z_net, testcase_sys.y_con
    for s in random_s(50):
        lam_si = np.linalg.eigvals(z.eval(s) @ y.eval(s))
        lam_pu = np.linalg.eigvals(l_pu.eval(s))
        lam_si = lam_si[np.lexsort((lam_si.imag, lam_si.real))]
        lam_pu = lam_pu[np.lexsort((lam_pu.imag, lam_pu.real))]
        scale = np.max(np.abs(lam_si))
        np.testing.assert_allclose(lam_pu, lam_si, rtol=0,
                                   atol=1e-12 * scale)


def test_missing_base_rejected():
    with pytest.raises(ValueError, match="per-unit base"):
        EinSystem(NodeTable([Node(1, "dc")]), [dc_capacitor("c", 1, 0.01)])


# ---------------------------------------------------------------------------
# loop gain and closed loop
# ---------------------------------------------------------------------------

def test_loop_gain_zero_without_converters():
    table = NodeTable([Node(1, "ac")])
    sys = EinSystem(table, [ac_grid_shunt("g", 1, 0.05, 1e-3, W1)],
                    extra_bases={1: (V_AC, 1.0)})
    l = loop_gain(sys)
    s = 1.0 + 50.0j
    assert np.all(l.eval(s) == 0.0)
    assert np.linalg.det(np.eye(2) + l.eval(s)) == 1.0


def test_closed_loop_voltage_open_loop_and_zero_injection():
    table = NodeTable([Node(1, "dc"), Node(2, "dc")])
    sys = EinSystem(table, [dc_capacitor("c1", 1, 0.01),
                            dc_line("ln", 1, 2, 0.1, 1e-3),
                            dc_capacitor("c2", 2, 0.02)],
                    extra_bases={1: (1.0, 1.0), 2: (1.0, 1.0)})
    s = 4.0 + 60.0j
    inj = np.array([1.0, -0.5 + 0.25j])
    v = closed_loop_voltage(sys, inj, s)
    np.testing.assert_allclose(v, sys.z_net.eval(s) @ inj, rtol=1e-12)
    assert np.all(closed_loop_voltage(sys, np.zeros(2), s) == 0.0)


def test_closed_loop_voltage_full_system(testcase_sys):
    inj = np.zeros(8)
    inj[5] = 1.0
    v = closed_loop_voltage(testcase_sys, inj, 1.0 + 2j * np.pi * 35.0)
    assert v.shape == (8,)
    assert np.all(np.isfinite(v))
    with pytest.raises(DimensionMismatch):
        closed_loop_voltage(testcase_sys, np.zeros(5), 1.0 + 10.0j)


# ---------------------------------------------------------------------------
# named component footprints
# ---------------------------------------------------------------------------

def test_z_component_footprints_cover_table(testcase_sys):
    comps = testcase_sys.z_components
    assert list(comps) == ["z_sync_sec", "z_grid1", "z_dc_link", "z_grid2",
                           "z_sync_rec"]
    assert comps["z_sync_sec"] == [(0, 0)]
    assert comps["z_sync_rec"] == [(7, 7)]
    assert sorted(comps["z_grid1"]) == [(1, 1), (1, 2), (2, 1), (2, 2)]
    assert sorted(comps["z_dc_link"]) == [(3, 3), (3, 4), (4, 3), (4, 4)]
    assert sorted(comps["z_grid2"]) == [(5, 5), (5, 6), (6, 5), (6, 6)]
    assert sum(len(v) for v in comps.values()) == 14


def test_y_component_footprints(testcase_sys):
    comps = testcase_sys.y_components
    assert len(comps) == 18
    assert sorted(comps["y_ac_sec"]) == [(1, 1), (1, 2), (2, 1), (2, 2)]
    assert comps["k_sync_dc_rec"] == [(7, 4)]
    assert comps["y_dc_rec"] == [(4, 4)]
    assert comps["c_ac_sync_sec"] == [(1, 0), (2, 0)]
