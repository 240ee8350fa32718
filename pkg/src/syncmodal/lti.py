"""Lazy matrix-valued transfer functions and eigenvalue tooling.

A :class:`TransferMatrix` is an immutable matrix-valued function of the
complex frequency ``s``.  Instances are composed structurally (sums,
products, stacking, block diagonals, inversion) and evaluated pointwise;
nothing is flattened to a rational canonical form, so irrational elements
such as transport delays stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "TransferMatrix",
    "DimensionMismatch",
    "SingularAtS",
    "DefectiveMatrix",
    "EigenLoci",
    "eig_lr",
    "eig_loci",
    "DEFAULT_COND_CAP",
]

# Condition-number cap used for matrix inversion and eigenvector bases.
DEFAULT_COND_CAP = 1e12


class DimensionMismatch(ValueError):
    """Raised at construction time when operand shapes are incompatible."""


class SingularAtS(ArithmeticError):
    """Raised when a pointwise inverse is singular or badly conditioned.

    Attributes
    ----------
    s : complex
        Evaluation point at which the inversion failed.
    cond : float
        Estimated condition number (``inf`` if exactly singular).
    freq_hz : float or None
        Sweep frequency, attached when the failure happens inside a sweep.
    """

    def __init__(self, s: complex, cond: float, detail: str = ""):
        self.s = s
        self.cond = cond
        self.freq_hz: float | None = None
        msg = f"matrix inversion ill-conditioned at s={s:.6g} (cond={cond:.3e})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DefectiveMatrix(ArithmeticError):
    """Raised when an eigenvector basis is too ill-conditioned to invert."""

    def __init__(self, cond: float, cond_cap: float):
        self.cond = cond
        self.cond_cap = cond_cap
        self.freq_hz: float | None = None
        super().__init__(
            f"eigenvector basis condition {cond:.3e} exceeds cap {cond_cap:.3e}; "
            "matrix is defective or near-defective"
        )


def _inv_checked(mat: np.ndarray, s: complex, cond_cap: float) -> np.ndarray:
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > cond_cap:
        raise SingularAtS(s, float(cond))
    return np.linalg.inv(mat)


@dataclass(frozen=True)
class TransferMatrix:
    """Immutable matrix-valued function of complex frequency ``s``.

    Evaluation is pure: ``m.eval(s)`` always returns a fresh
    ``(rows, cols)`` complex array and never mutates shared state.
    """

    rows: int
    cols: int
    _fn: Callable[[complex], np.ndarray] = field(repr=False)

    # -- constructors -------------------------------------------------

    @staticmethod
    def constant(value) -> "TransferMatrix":
        """Frequency-independent matrix (array-like, coerced to 2-D complex)."""
        arr = np.atleast_2d(np.asarray(value, dtype=complex)).copy()
        arr.setflags(write=False)
        return TransferMatrix(arr.shape[0], arr.shape[1], lambda s: arr.copy())

    @staticmethod
    def zeros(rows: int, cols: int) -> "TransferMatrix":
        return TransferMatrix.constant(np.zeros((rows, cols)))

    @staticmethod
    def identity(n: int) -> "TransferMatrix":
        return TransferMatrix.constant(np.eye(n))

    @staticmethod
    def rational(num: Sequence[float], den: Sequence[float]) -> "TransferMatrix":
        """Scalar (1x1) rational element ``num(s)/den(s)``.

        Coefficients are highest order first, as in :func:`numpy.polyval`.
        """
        num_c = np.asarray(num, dtype=complex)
        den_c = np.asarray(den, dtype=complex)
        if den_c.size == 0 or not np.any(den_c != 0):
            raise DimensionMismatch("rational element needs a nonzero denominator")

        def fn(s: complex) -> np.ndarray:
            d = np.polyval(den_c, s)
            if d == 0:
                raise SingularAtS(s, float("inf"), "rational element pole")
            return np.array([[np.polyval(num_c, s) / d]])

        return TransferMatrix(1, 1, fn)

    @staticmethod
    def integrator() -> "TransferMatrix":
        """Scalar ``1/s``."""
        return TransferMatrix.rational([1.0], [1.0, 0.0])

    @staticmethod
    def pi_element(kp: float, ki: float) -> "TransferMatrix":
        """Scalar proportional-integral element ``kp + ki/s``."""
        return TransferMatrix.rational([kp, ki], [1.0, 0.0])

    @staticmethod
    def delay(t_delay: float) -> "TransferMatrix":
        """Scalar transport delay ``exp(-s*t_delay)``, kept exact."""
        if t_delay < 0:
            raise DimensionMismatch("delay time must be nonnegative")
        td = float(t_delay)
        return TransferMatrix(1, 1, lambda s: np.array([[np.exp(-s * td)]]))

    @staticmethod
    def from_callable(rows: int, cols: int,
                      fn: Callable[[complex], np.ndarray]) -> "TransferMatrix":
        """Wrap a pure callable returning a ``(rows, cols)`` array."""

        def wrapped(s: complex) -> np.ndarray:
            out = np.asarray(fn(s), dtype=complex)
            if out.shape != (rows, cols):
                raise DimensionMismatch(
                    f"callable returned shape {out.shape}, expected {(rows, cols)}"
                )
            return out

        return TransferMatrix(rows, cols, wrapped)

    # -- evaluation ----------------------------------------------------

    def eval(self, s: complex) -> np.ndarray:
        """Evaluate at a single complex frequency."""
        return self._fn(complex(s))

    def __call__(self, s: complex) -> np.ndarray:
        return self.eval(s)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    # -- algebra -------------------------------------------------------

    def __add__(self, other: "TransferMatrix") -> "TransferMatrix":
        other = _as_tm(other)
        if self.shape != other.shape:
            raise DimensionMismatch(f"cannot add {self.shape} and {other.shape}")
        return TransferMatrix(self.rows, self.cols,
                              lambda s: self._fn(s) + other._fn(s))

    def __sub__(self, other: "TransferMatrix") -> "TransferMatrix":
        other = _as_tm(other)
        if self.shape != other.shape:
            raise DimensionMismatch(f"cannot subtract {other.shape} from {self.shape}")
        return TransferMatrix(self.rows, self.cols,
                              lambda s: self._fn(s) - other._fn(s))

    def __neg__(self) -> "TransferMatrix":
        return TransferMatrix(self.rows, self.cols, lambda s: -self._fn(s))

    def __matmul__(self, other: "TransferMatrix") -> "TransferMatrix":
        other = _as_tm(other)
        if self.cols != other.rows:
            raise DimensionMismatch(
                f"cannot multiply {self.shape} @ {other.shape}")
        return TransferMatrix(self.rows, other.cols,
                              lambda s: self._fn(s) @ other._fn(s))

    def __mul__(self, other) -> "TransferMatrix":
        """Elementwise scaling by a number or by a scalar (1x1) element."""
        if isinstance(other, TransferMatrix):
            if other.shape == (1, 1):
                return TransferMatrix(self.rows, self.cols,
                                      lambda s: self._fn(s) * other._fn(s)[0, 0])
            if self.shape == (1, 1):
                return TransferMatrix(other.rows, other.cols,
                                      lambda s: self._fn(s)[0, 0] * other._fn(s))
            raise DimensionMismatch(
                f"elementwise scaling needs a 1x1 operand, got "
                f"{self.shape} * {other.shape}")
        k = complex(other)
        return TransferMatrix(self.rows, self.cols, lambda s: self._fn(s) * k)

    def __rmul__(self, other) -> "TransferMatrix":
        return self.__mul__(other)

    def inv(self, cond_cap: float = DEFAULT_COND_CAP) -> "TransferMatrix":
        """Pointwise matrix inverse; raises :class:`SingularAtS` on evaluation."""
        if self.rows != self.cols:
            raise DimensionMismatch(f"cannot invert non-square {self.shape}")
        return TransferMatrix(self.rows, self.cols,
                              lambda s: _inv_checked(self._fn(s), s, cond_cap))

    def submatrix(self, row_idx: Sequence[int], col_idx: Sequence[int]) -> "TransferMatrix":
        """Select rows/columns by index (copies, keeps laziness)."""
        ri = tuple(int(i) for i in row_idx)
        ci = tuple(int(j) for j in col_idx)
        if any(i < 0 or i >= self.rows for i in ri) or any(j < 0 or j >= self.cols for j in ci):
            raise DimensionMismatch("submatrix index out of range")
        return TransferMatrix(len(ri), len(ci),
                              lambda s: self._fn(s)[np.ix_(ri, ci)])

    # -- stacking ------------------------------------------------------

    @staticmethod
    def hstack(blocks: Sequence["TransferMatrix"]) -> "TransferMatrix":
        blocks = [_as_tm(b) for b in blocks]
        if not blocks:
            raise DimensionMismatch("hstack needs at least one block")
        rows = blocks[0].rows
        if any(b.rows != rows for b in blocks):
            raise DimensionMismatch("hstack blocks must share row count")
        cols = sum(b.cols for b in blocks)
        return TransferMatrix(rows, cols,
                              lambda s: np.hstack([b._fn(s) for b in blocks]))

    @staticmethod
    def vstack(blocks: Sequence["TransferMatrix"]) -> "TransferMatrix":
        blocks = [_as_tm(b) for b in blocks]
        if not blocks:
            raise DimensionMismatch("vstack needs at least one block")
        cols = blocks[0].cols
        if any(b.cols != cols for b in blocks):
            raise DimensionMismatch("vstack blocks must share column count")
        rows = sum(b.rows for b in blocks)
        return TransferMatrix(rows, cols,
                              lambda s: np.vstack([b._fn(s) for b in blocks]))

    @staticmethod
    def block_diag(blocks: Sequence["TransferMatrix"]) -> "TransferMatrix":
        blocks = [_as_tm(b) for b in blocks]
        if not blocks:
            raise DimensionMismatch("block_diag needs at least one block")
        rows = sum(b.rows for b in blocks)
        cols = sum(b.cols for b in blocks)

        def fn(s: complex) -> np.ndarray:
            out = np.zeros((rows, cols), dtype=complex)
            r = c = 0
            for b in blocks:
                out[r:r + b.rows, c:c + b.cols] = b._fn(s)
                r += b.rows
                c += b.cols
            return out

        return TransferMatrix(rows, cols, fn)


def _as_tm(x) -> TransferMatrix:
    if isinstance(x, TransferMatrix):
        return x
    return TransferMatrix.constant(x)


# ---------------------------------------------------------------------------
# Eigenvalue decomposition with matched left/right vectors
# ---------------------------------------------------------------------------

def eig_lr(a: np.ndarray, cond_cap: float = DEFAULT_COND_CAP
           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigen-decompose ``a = R @ diag(lam) @ T`` with ``T = R^-1``.

    Returns ``(lam, r, t)`` where columns of ``r`` are right eigenvectors
    and rows of ``t`` are the matched left eigenvectors; ``t @ r`` is the
    identity by construction.  Raises :class:`DefectiveMatrix` when the
    right-eigenvector basis is too ill-conditioned to invert.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"eig_lr needs a square matrix, got {a.shape}")
    lam, r = np.linalg.eig(a)
    # Deterministic normalization: unit columns with the largest entry
    # rotated onto the positive real axis.
    for k in range(r.shape[1]):
        col = r[:, k]
        nrm = np.linalg.norm(col)
        if nrm > 0:
            col = col / nrm
            pivot = col[np.argmax(np.abs(col))]
            if pivot != 0:
                col = col * (np.conj(pivot) / abs(pivot))
            r[:, k] = col
    cond = np.linalg.cond(r)
    if not np.isfinite(cond) or cond > cond_cap:
        raise DefectiveMatrix(float(cond), cond_cap)
    t = np.linalg.inv(r)
    return lam, r, t


# ---------------------------------------------------------------------------
# Eigenvalue loci over a frequency grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenLoci:
    """Continuously ordered eigenvalue traces over a frequency grid.

    ``values[p, k]`` is eigenvalue trace ``k`` at ``freqs_hz[p]``; trace
    identity is preserved across the grid by minimal-displacement matching.
    """

    freqs_hz: np.ndarray
    values: np.ndarray

    @property
    def n_traces(self) -> int:
        return self.values.shape[1]


def _match_sets(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Permutation ``p`` minimizing total |a[i] - b[p[i]]| displacement."""
    cost = np.abs(a[:, None] - b[None, :])
    _, col = linear_sum_assignment(cost)
    return col


def _eigvals_at(m: TransferMatrix, f_hz: float) -> np.ndarray:
    try:
        return np.linalg.eigvals(m.eval(2j * np.pi * f_hz))
    except (SingularAtS, DefectiveMatrix) as err:
        err.freq_hz = f_hz
        raise


def _match_refined(m: TransferMatrix, f_a: float, f_b: float,
                   w_a: np.ndarray, w_b: np.ndarray,
                   rel_step: float, depth: int) -> np.ndarray:
    """Match eigenvalue sets at f_a and f_b, bisecting ambiguous jumps.

    A jump is ambiguous when an eigenvalue moves by a sizable fraction of
    the gap to its nearest neighbor; only then can minimal-displacement
    matching pick the wrong branch, so only then is the interval bisected.
    """
    perm = _match_sets(w_a, w_b)
    if w_a.size == 1 or depth <= 0:
        return perm
    w_bp = w_b[perm]
    disp = np.abs(w_a - w_bp)
    dist = np.abs(w_bp[:, None] - w_bp[None, :])
    np.fill_diagonal(dist, np.inf)
    gap = dist.min(axis=1)
    scale = max(np.max(np.abs(w_a)), np.max(np.abs(w_bp)), 1e-30)
    ambiguous = (disp > rel_step * gap) & (disp > 1e-9 * scale)
    if not np.any(ambiguous):
        return perm
    f_mid = 0.5 * (f_a + f_b)
    w_mid = _eigvals_at(m, f_mid)
    p1 = _match_refined(m, f_a, f_mid, w_a, w_mid, rel_step, depth - 1)
    p2 = _match_refined(m, f_mid, f_b, w_mid, w_b, rel_step, depth - 1)
    return p2[p1]


def eig_loci(m: TransferMatrix, freqs_hz: Sequence[float],
             rel_step: float = 0.2, max_bisect: int = 6) -> EigenLoci:
    """Eigenvalue loci of ``m(j*2*pi*f)`` over a frequency grid.

    Adjacent grid points are joined by minimal total-displacement
    matching; when a matched eigenvalue moves by more than ``rel_step``
    times the gap to its nearest neighbor, midpoint evaluations are
    inserted (up to ``max_bisect`` bisection levels) so traces stay
    continuous through crossings and sharp resonances.
    """
    if m.rows != m.cols:
        raise DimensionMismatch(f"eig_loci needs a square element, got {m.shape}")
    freqs = np.asarray(freqs_hz, dtype=float)
    if freqs.ndim != 1 or freqs.size < 1:
        raise DimensionMismatch("frequency grid must be a nonempty 1-D sequence")
    n = m.rows
    values = np.empty((freqs.size, n), dtype=complex)

    w = _eigvals_at(m, freqs[0])
    order = np.lexsort((w.imag, w.real))
    w = w[order]
    values[0] = w
    for p in range(1, freqs.size):
        w_next = _eigvals_at(m, freqs[p])
        perm = _match_refined(m, freqs[p - 1], freqs[p], values[p - 1],
                              w_next, rel_step, max_bisect)
        values[p] = w_next[perm]
    return EigenLoci(freqs_hz=freqs, values=values)
