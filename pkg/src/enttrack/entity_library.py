"""Incrementally built entity library with soft insertion and soft retrieval.

The library is an ordered matrix with one row per consumed exposure.  Each
incoming exposure vector is compared against the stored rows; a learned gate
turns the maximum similarity into the probability that the exposure is an
already-known entity, and the vector is then distributed across the existing
rows plus one fresh blank row.  Because every insertion distribution sums to
one, the column sums of the library always equal the element-wise sum of the
exposures consumed so far.

All operations accept plain float64 arrays or autodiff ``Var`` nodes and
return the matching kind, so the same code drives evaluation and training.
Libraries are immutable snapshots: ``update`` returns a new value, and
building a sequence is inherently order-dependent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .numerics import DimensionError, NonFiniteError


@dataclass
class GateParams:
    """Scalar gate deciding old-vs-new; shared across all exposures after the first."""

    w: object  # float or Var
    b: object


@dataclass
class Library:
    """Entity matrix (one row per exposure consumed) plus the exposure count."""

    E: object  # (step, m) array or Var
    step: int

    @property
    def rows(self) -> int:
        return self.E.shape[0]

    @property
    def cols(self) -> int:
        return self.E.shape[1]


@dataclass
class BuildStep:
    """Per-exposure trace record: gate inputs and the insertion distribution."""

    s_max: float
    p_old: float
    z: np.ndarray


def init(u1) -> Library:
    """Start a library from the first exposure, stored as-is."""
    if ad.value_of(u1).shape[0] == 0:
        raise DimensionError("cannot initialize a library from an empty vector")
    return Library(E=ad.as_row_matrix(u1), step=1)


def similarity_profile(lib: Library, u):
    """Dot product of the exposure with every stored entity row."""
    if lib.cols != ad.value_of(u).shape[0]:
        raise DimensionError(f"similarity: library is {lib.rows}x{lib.cols}, exposure has dim {ad.value_of(u).shape[0]}")
    return ad.matvec(lib.E, u)


def old_probability(s, gate: GateParams):
    """Gate output: probability that the exposure is an already-stored entity."""
    if ad.value_of(s).shape[0] == 0:
        raise DimensionError("similarity profile is empty")
    return ad.sigmoid(gate.w * ad.vmax(s) + gate.b)


def insertion_distribution(s, p_old):
    """Distribution over existing rows plus one new slot.

    The old-entity mass p_old is spread across existing rows by the
    softmax-normalized similarity profile; the last component is the
    new-entity probability 1 - p_old.
    """
    p_val = float(ad.value_of(p_old))
    if not np.isfinite(p_val):
        raise NonFiniteError(f"p_old is {p_val}")
    if not 0.0 <= p_val <= 1.0:
        raise ValueError(f"p_old must lie in [0, 1], got {p_val}")
    return ad.concat([p_old * ad.softmax(s), 1.0 - p_old])


def update(lib: Library, u, z) -> Library:
    """Soft-insert the exposure: blank row appended, then z-weighted addition."""
    zv = ad.value_of(z)
    if zv.shape[0] != lib.rows + 1:
        raise DimensionError(f"insertion distribution has dim {zv.shape[0]}, expected {lib.rows + 1}")
    if ad.value_of(u).shape[0] != lib.cols:
        raise DimensionError(f"exposure has dim {ad.value_of(u).shape[0]}, library columns {lib.cols}")
    zsum = float(zv.sum())
    if not np.isfinite(zsum):
        raise NonFiniteError(f"insertion distribution sums to {zsum}")
    if abs(zsum - 1.0) > 1e-9:
        raise ValueError(f"insertion distribution sums to {zsum!r}, not 1")
    E_new = ad.append_zero_row(lib.E) + ad.outer(z, u)
    return Library(E=E_new, step=lib.step + 1)


def build(exposures: Sequence, gate: GateParams, trace: bool = False):
    """Fold a whole exposure sequence into a library.

    With ``trace=True`` also returns the per-step (s_max, p_old, z) log used
    by the inspect surface.  The end state always has exactly one row per
    exposure; rows inserted for exposures of old entities carry mass
    (1 - p_old) and are expected to stay near zero when the gate saturates.
    """
    if len(exposures) == 0:
        raise ValueError("at least one exposure is required")
    lib = init(exposures[0])
    log: list[BuildStep] = []
    for u in exposures[1:]:
        s = similarity_profile(lib, u)
        p = old_probability(s, gate)
        z = insertion_distribution(s, p)
        lib = update(lib, u, z)
        if trace:
            log.append(BuildStep(s_max=float(ad.value_of(s).max()),
                                 p_old=float(ad.value_of(p)),
                                 z=ad.value_of(z).copy()))
    return (lib, log) if trace else lib


def retrieve(lib: Library, q):
    """Soft retrieval: attention over rows, then the attention-weighted mix.

    Returns (g, r) where g = softmax(E q) sums to one and r = E^T g is a
    convex combination of the stored rows.
    """
    if lib.cols != ad.value_of(q).shape[0]:
        raise DimensionError(f"retrieve: library is {lib.rows}x{lib.cols}, query has dim {ad.value_of(q).shape[0]}")
    g = ad.softmax(ad.matvec(lib.E, q))
    r = ad.rmatvec(lib.E, g)
    return g, r


def library_to_json(lib: Library, log: Sequence[BuildStep] | None = None) -> dict:
    """Dump format for the inspect command (row-major E, optional step log)."""
    E = ad.value_of(lib.E)
    out = {
        "step": lib.step,
        "rows": int(E.shape[0]),
        "cols": int(E.shape[1]),
        "E": [float(x) for x in E.ravel()],
        "row_norms": [float(n) for n in np.linalg.norm(E, axis=1)],
    }
    if log is not None:
        out["steps"] = [
            {"s_max": st.s_max, "p_old": st.p_old, "z": [float(x) for x in st.z]}
            for st in log
        ]
    return out
