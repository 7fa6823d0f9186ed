"""Actuated/unactuated coordinate split for underactuated mechanical systems.

Given an actuation matrix B (n x m, rank m < n) and mass matrix D(q), the
state (q, qdot) maps to

    eta = (B^T q, B^T qdot)            actuated coordinates
    z   = (N q,   N D(q) qdot)         unactuated coordinates, N B = 0

with N an orthonormal basis of the left null space of B.  The stacked map is
a diffeomorphism, so stability conclusions in (eta, z) transfer back to the
original state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class RankDeficient(ValueError):
    """Actuation matrix does not have full column rank."""


class SingularJacobian(RuntimeError):
    """Stacked velocity map is too ill-conditioned to invert."""


_COND_LIMIT = 1e12


def nullspace_basis(B) -> np.ndarray:
    """Orthonormal rows spanning the left null space of B.

    Rows are sign-fixed (first non-negligible entry positive) so the basis is
    reproducible across runs.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    if m >= n:
        raise RankDeficient(f"need more rows than columns, got {n}x{m}")
    u, s, _ = np.linalg.svd(B)
    tol = max(n, m) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if np.sum(s > tol) < m:
        raise RankDeficient(f"rank {int(np.sum(s > tol))} < {m}")
    N = u[:, m:].T.copy()
    for row in N:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0.0:
            row *= -1.0
    return N


def _identity_mass(q: np.ndarray) -> np.ndarray:
    return np.eye(q.shape[0])


@dataclass
class Decomposition:
    """Actuation matrix, left-null basis and mass matrix of one system."""

    B: np.ndarray
    N: np.ndarray
    mass_matrix_fn: Callable[[np.ndarray], np.ndarray] = field(default=_identity_mass)

    @classmethod
    def from_actuation(cls, B, mass_matrix_fn=None) -> "Decomposition":
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return cls(B, nullspace_basis(B), mass_matrix_fn or _identity_mass)

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass
class EtaZ:
    eta: np.ndarray
    z: np.ndarray


@dataclass
class ManifoldPoint:
    """A point (psi(z), z) on the zeroing manifold of ``policy``."""

    z: np.ndarray
    policy: Callable[[np.ndarray], np.ndarray]

    @property
    def eta_on_manifold(self) -> np.ndarray:
        return np.asarray(self.policy(self.z), dtype=float)


def phi(q, qdot, d: Decomposition) -> EtaZ:
    """Coordinate change (q, qdot) -> (eta, z)."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    D = d.mass_matrix_fn(q)
    eta = np.concatenate([d.B.T @ q, d.B.T @ qdot])
    z = np.concatenate([d.N @ q, d.N @ D @ qdot])
    return EtaZ(eta, z)


def phi_inverse(ez: EtaZ, d: Decomposition) -> tuple[np.ndarray, np.ndarray]:
    """Recover (q, qdot) from (eta, z); inverse of :func:`phi`."""
    m, n = d.m, d.n
    S = np.vstack([d.B.T, d.N])
    q = np.linalg.solve(S, np.concatenate([ez.eta[:m], ez.z[: n - m]]))
    V = np.vstack([d.B.T, d.N @ d.mass_matrix_fn(q)])
    if np.linalg.cond(V) > _COND_LIMIT:
        raise SingularJacobian("stacked velocity map is numerically singular")
    qdot = np.linalg.solve(V, np.concatenate([ez.eta[m:], ez.z[n - m :]]))
    return q, qdot


def manifold_error(eta, z, policy: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Tracking error e = eta - psi(z) of a point against the manifold."""
    return np.asarray(eta, dtype=float) - np.asarray(policy(np.asarray(z, dtype=float)), dtype=float)
