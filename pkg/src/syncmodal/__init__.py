"""Frequency-domain modal analysis of converter-dominated grids.

The package builds four-port small-signal converter models with an
explicit synchronization port, assembles them with passive network
models into a node-level representation, finds oscillatory modes of the
loop gain, and attributes them to components through participation
factors and closed-form sensitivities.  A nonlinear time-domain lab
provides independent frequency scans and state-space cross-checks.
"""

from .lti import (
    DEFAULT_COND_CAP,
    DefectiveMatrix,
    DimensionMismatch,
    EigenLoci,
    SingularAtS,
    TransferMatrix,
    eig_loci,
    eig_lr,
)

__all__ = [
    "DEFAULT_COND_CAP",
    "DefectiveMatrix",
    "DimensionMismatch",
    "EigenLoci",
    "SingularAtS",
    "TransferMatrix",
    "eig_loci",
    "eig_lr",
]

__version__ = "0.1.0"
