"""Modal analysis of the voltage-loop gain.

A mode of the interconnected system is a complex frequency where one
eigenvalue of the loop gain reaches -1, i.e. a zero of det(I + L(s)).
The search is two-stage: sweep the eigenvalue loci of L(j2*pi*f) over a
log-spaced grid, then refine every trace that dips near -1 with a
damped complex Newton iteration on 1 + lam_k(s), following the same
eigenvalue between evaluations by eigenvector overlap.

At a located mode the outer product of the matched right and left
eigenvectors is the participation-factor matrix; summing its diagonal
over each node's signal span ranks the nodes, and the same vectors give
closed-form sensitivities of lam_k to every scalar entry of the network
or converter matrices, reported per named component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lti import TransferMatrix as TM, eig_lr, eig_loci
from .network import EinSystem, NodeTable

__all__ = [
    "NoCapture",
    "NewtonDiverged",
    "EigenTrackLost",
    "ModalOptions",
    "Mode",
    "SensitivityRow",
    "ModeReport",
    "find_modes",
    "node_pf",
    "sensitivity_z",
    "sensitivity_y",
    "validate_sensitivity",
    "analyze_mode",
]


class NoCapture(RuntimeError):
    """No eigenvalue trace came near -1: stable with a margin."""

    def __init__(self, margin: float):
        super().__init__(f"no eigenvalue locus entered the capture radius; "
                         f"closest approach to -1 is {margin:.6g}")
        self.margin = margin


class NewtonDiverged(ArithmeticError):
    """Root refinement failed; the last iterate is attached."""

    def __init__(self, s_last: complex, residual: float):
        super().__init__(f"mode refinement stalled at s = {s_last:.6g} "
                         f"with residual {residual:.3e}")
        self.s_last = s_last
        self.residual = residual


class EigenTrackLost(ArithmeticError):
    """The perturbed eigenvalue could not be matched unambiguously."""

    def __init__(self, overlap: float, context: str = ""):
        detail = f" ({context})" if context else ""
        super().__init__(f"eigenvector overlap {overlap:.3f} too weak to "
                         f"track the eigenvalue{detail}")
        self.overlap = overlap


@dataclass(frozen=True)
class ModalOptions:
    """Search controls for :func:`find_modes`."""

    grid_points: int = 400
    capture_radius: float = 0.3
    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    step_rel: float = 1e-6
    track_overlap_min: float = 0.7

    def __post_init__(self):
        if self.grid_points < 2 or self.capture_radius <= 0:
            raise ValueError("need grid_points >= 2 and capture_radius > 0")
        if self.newton_tol <= 0 or self.newton_max_iter < 1:
            raise ValueError("need newton_tol > 0 and newton_max_iter >= 1")


@dataclass(frozen=True)
class Mode:
    """One refined root of ``1 + lam_k(s) = 0``.

    ``k`` indexes the critical eigenvalue in :func:`syncmodal.lti.eig_lr`
    order at ``L(s)``; the same index is valid for the participation and
    sensitivity evaluations at this mode.
    """

    s: complex
    k: int
    lam: complex
    residual: float

    @property
    def f_hz(self) -> float:
        return abs(self.s.imag) / (2.0 * np.pi)

    @property
    def damping(self) -> float:
        mag = abs(self.s)
        return 0.0 if mag == 0.0 else -self.s.real / mag

    @property
    def unstable(self) -> bool:
        return self.s.real > 0.0


@dataclass(frozen=True)
class SensitivityRow:
    """Per-entry sensitivity with its perturbation check."""

    component: str
    entry: tuple[int, int]
    value: complex
    sensitivity: complex
    predicted: complex
    actual: complex
    error: float
    status: str = "ok"


@dataclass(frozen=True)
class ModeReport:
    """Everything the analysis knows about one mode."""

    mode: Mode
    verdict: str
    node_labels: list[str]
    node_pf: list[complex]
    sensitivities: dict[str, dict[tuple[int, int], complex]]
    validation: list[SensitivityRow] | None = None

    def component_magnitudes(self) -> dict[str, float]:
        """Bar-chart aggregate: largest entry magnitude per component."""
        return {name: max(abs(v) for v in entries.values())
                for name, entries in self.sensitivities.items()}


# ---------------------------------------------------------------------------
# eigenvalue tracking helpers
# ---------------------------------------------------------------------------

def _match_vector(ref: np.ndarray, r: np.ndarray, min_overlap: float,
                  context: str = "") -> tuple[int, float]:
    """Column of ``r`` best aligned with ``ref`` (unit vectors assumed)."""
    overlaps = np.abs(ref.conj() @ r)
    idx = int(np.argmax(overlaps))
    best = float(overlaps[idx])
    if best < min_overlap:
        raise EigenTrackLost(best, context)
    return idx, best


def _tracked_eig(l: TM, s: complex, ref: np.ndarray, min_overlap: float
                 ) -> tuple[complex, np.ndarray]:
    lam, r, _ = eig_lr(l.eval(s))
    idx, _ = _match_vector(ref, r, min_overlap, f"s = {s:.6g}")
    return lam[idx], r[:, idx]


# ---------------------------------------------------------------------------
# mode search
# ---------------------------------------------------------------------------

def _refine_root(l: TM, s0: complex, lam0: complex, opts: ModalOptions
                 ) -> tuple[complex, complex, np.ndarray, float]:
    lam_all, r_all, _ = eig_lr(l.eval(s0))
    idx = int(np.argmin(np.abs(lam_all - lam0)))
    s, lam, vec = s0, lam_all[idx], r_all[:, idx]
    res = abs(1.0 + lam)
    for _ in range(opts.newton_max_iter):
        if res < opts.newton_tol:
            return s, lam, vec, res
        h = max(abs(s), 1.0) * opts.step_rel
        lam_p, _ = _tracked_eig(l, s + h, vec, opts.track_overlap_min)
        lam_m, _ = _tracked_eig(l, s - h, vec, opts.track_overlap_min)
        dlam = (lam_p - lam_m) / (2.0 * h)
        if dlam == 0.0:
            raise NewtonDiverged(s, res)
        step = -(1.0 + lam) / dlam
        alpha = 1.0
        for _ in range(12):
            s_try = s + alpha * step
            try:
                lam_try, vec_try = _tracked_eig(l, s_try, vec,
                                                opts.track_overlap_min)
            except EigenTrackLost:
                alpha *= 0.5
                continue
            if abs(1.0 + lam_try) < res:
                s, lam, vec = s_try, lam_try, vec_try
                res = abs(1.0 + lam)
                break
            alpha *= 0.5
        else:
            raise NewtonDiverged(s, res)
    if res < opts.newton_tol:
        return s, lam, vec, res
    raise NewtonDiverged(s, res)


def find_modes(l: TM, f_range: tuple[float, float] = (0.1, 1000.0),
               opts: ModalOptions | None = None) -> list[Mode]:
    """Locate the modes of ``det(I + l(s)) = 0`` near the jw axis.

    Sweeps the eigenvalue loci of ``l`` over a log grid in ``f_range``;
    every local closest approach to -1 inside the capture radius seeds
    a damped Newton refinement of ``1 + lam_k(s) = 0``.  Duplicate
    convergences merge; modes come back sorted by frequency.

    Raises :class:`NoCapture` (with the closest approach attached) when
    no trace enters the capture radius, and :class:`NewtonDiverged`
    when a captured trace cannot be refined.
    """
    opts = opts or ModalOptions()
    f_lo, f_hi = f_range
    if not (0.0 < f_lo < f_hi):
        raise ValueError(f"need 0 < f_lo < f_hi, got {f_range}")
    freqs = np.geomspace(f_lo, f_hi, opts.grid_points)
    loci = eig_loci(l, freqs)
    dist = np.abs(loci.values + 1.0)

    seeds: list[tuple[complex, complex]] = []
    for k in range(loci.n_traces):
        d = dist[:, k]
        for p in range(d.size):
            left = d[p - 1] if p > 0 else np.inf
            right = d[p + 1] if p < d.size - 1 else np.inf
            if d[p] < opts.capture_radius and d[p] <= left and d[p] <= right:
                seeds.append((2j * np.pi * loci.freqs_hz[p],
                              loci.values[p, k]))
    if not seeds:
        raise NoCapture(float(dist.min()))

    found: list[Mode] = []
    for s0, lam0 in seeds:
        s, lam, vec, res = _refine_root(l, s0, lam0, opts)
        if s.imag < 0.0:
            # real-parameter networks have conjugate-symmetric loop gains,
            # so a refinement that slides below the real axis has landed on
            # the mirror twin of an upper-half-plane root; fold it back if
            # the folded point is still a root
            s_f, vec_f = s.conjugate(), vec.conjugate()
            lam_f, r_f, _ = eig_lr(l.eval(s_f))
            try:
                k_f, _ = _match_vector(vec_f, r_f, opts.track_overlap_min)
                res_f = abs(1.0 + lam_f[k_f])
            except EigenTrackLost:
                res_f = np.inf
            if res_f < opts.newton_tol:
                s, vec, res = s_f, vec_f, res_f
        # index of the critical eigenvalue in eig_lr order at s
        lam_all, r_all, _ = eig_lr(l.eval(s))
        k_idx, _ = _match_vector(vec, r_all, opts.track_overlap_min,
                                 f"mode at s = {s:.6g}")
        mode = Mode(s=s, k=k_idx, lam=lam_all[k_idx], residual=res)
        dup = next((m for m in found
                    if abs(m.s - mode.s) < 1e-2 + 1e-4 * abs(mode.s)), None)
        if dup is None:
            found.append(mode)
        elif mode.residual < dup.residual:
            found[found.index(dup)] = mode
    found.sort(key=lambda m: (m.f_hz, m.s.real))
    return found


# ---------------------------------------------------------------------------
# participation and sensitivity
# ---------------------------------------------------------------------------

def _pf_matrix(l_eval: np.ndarray, k: int) -> tuple[complex, np.ndarray]:
    lam, r, t = eig_lr(np.asarray(l_eval, dtype=complex))
    return lam[k], np.outer(r[:, k], t[k, :])


def node_pf(l_eval: np.ndarray, k: int, table: NodeTable) -> list[complex]:
    """Per-node participation: diagonal of ``r_k t_k`` summed per node."""
    _, pf = _pf_matrix(l_eval, k)
    diag = np.diag(pf)
    return [complex(np.sum(diag[table.span(n.node_id)]))
            for n in table.nodes]


def sensitivity_z(sys: EinSystem, s_m: complex, k: int,
                  component: str) -> dict[tuple[int, int], complex]:
    """d lam_k / d Z_ij for every entry of a named network component.

    Evaluated in the per-unit frame at ``s_m``: the (i, j) sensitivity
    is entry (j, i) of ``Y_con_pu @ PF``.
    """
    entries = sys.z_components[component]
    _, pf = _pf_matrix(sys.loop.eval(s_m), k)
    ypf = sys.y_con_pu.eval(s_m) @ pf
    return {(i, j): complex(ypf[j, i]) for i, j in entries}


def sensitivity_y(sys: EinSystem, s_m: complex, k: int,
                  component: str) -> dict[tuple[int, int], complex]:
    """d lam_k / d Y_ij per entry: entry (j, i) of ``PF @ Z_net_pu``."""
    entries = sys.y_components[component]
    _, pf = _pf_matrix(sys.loop.eval(s_m), k)
    pfz = pf @ sys.z_net_pu.eval(s_m)
    return {(i, j): complex(pfz[j, i]) for i, j in entries}


def validate_sensitivity(sys: EinSystem, s_m: complex, k: int,
                         increment: float,
                         components: Sequence[str] | None = None,
                         track_overlap_min: float = 0.7
                         ) -> list[SensitivityRow]:
    """Check each network-component sensitivity by direct perturbation.

    For every scalar entry of every named component: predict
    ``d lam = S * (increment * value)``, then scale that one entry of
    the network matrix by ``(1 + increment)``, re-evaluate the critical
    eigenvalue at the *same* ``s_m`` (matched by eigenvector overlap),
    and report the relative gap.  A row whose eigenvalue cannot be
    tracked is returned with status ``"track_lost"``.
    """
    if not 0.0 < increment <= 0.2:
        raise ValueError(f"increment must be in (0, 0.2], got {increment}")
    z0 = sys.z_net_pu.eval(s_m)
    y0 = sys.y_con_pu.eval(s_m)
    lam_all, r_all, t_all = eig_lr(z0 @ y0)
    lam_k = lam_all[k]
    ref = r_all[:, k]
    ypf = y0 @ np.outer(r_all[:, k], t_all[k, :])

    names = list(components) if components is not None else list(
        sys.z_components)
    rows: list[SensitivityRow] = []
    for name in names:
        for i, j in sys.z_components[name]:
            value = complex(z0[i, j])
            sens = complex(ypf[j, i])
            predicted = sens * (increment * value)
            z1 = z0.copy()
            z1[i, j] *= (1.0 + increment)
            lam1, r1, _ = eig_lr(z1 @ y0)
            try:
                idx, _ = _match_vector(ref, r1, track_overlap_min,
                                       f"{name}[{i},{j}]")
            except EigenTrackLost:
                rows.append(SensitivityRow(name, (i, j), value, sens,
                                           predicted, complex(np.nan),
                                           float("nan"), "track_lost"))
                continue
            actual = complex(lam1[idx] - lam_k)
            if actual == 0.0:
                err = 0.0 if predicted == 0.0 else float("inf")
            else:
                err = abs(predicted - actual) / abs(actual)
            rows.append(SensitivityRow(name, (i, j), value, sens, predicted,
                                       actual, err))
    return rows


def analyze_mode(sys: EinSystem, mode: Mode,
                 increment: float | None = None) -> ModeReport:
    """Full per-mode report: verdict, node ranking, sensitivities."""
    l_eval = sys.loop.eval(mode.s)
    pf = node_pf(l_eval, mode.k, sys.nodes)
    sens = {name: sensitivity_z(sys, mode.s, mode.k, name)
            for name in sys.z_components}
    sens.update({name: sensitivity_y(sys, mode.s, mode.k, name)
                 for name in sys.y_components})
    rows = None
    if increment is not None:
        rows = validate_sensitivity(sys, mode.s, mode.k, increment)
    return ModeReport(
        mode=mode,
        verdict="unstable" if mode.unstable else "stable",
        node_labels=[n.name for n in sys.nodes.nodes],
        node_pf=pf,
        sensitivities=sens,
        validation=rows,
    )
