"""Quaternion and rotation utilities for the hopper's attitude dynamics.

Quaternions are numpy arrays ``[w, x, y, z]`` (scalar first).  Canonical form
has ``w >= 0``, which removes the double-cover ambiguity from attitude errors.
Rotation vectors (axis-angle tangent vectors, radians) are shape-(3,) arrays.
"""

from __future__ import annotations

import numpy as np

# Below this angle, log/exp switch to series branches (C^1 at zero).
_SMALL_ANGLE = 1e-6


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_canonical(q) -> np.ndarray:
    """Unit norm with w >= 0."""
    q = quat_normalize(q)
    return -q if q[0] < 0.0 else q


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _mul_raw(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a*b, renormalized."""
    return quat_normalize(_mul_raw(a, b))


def quat_exp(w) -> np.ndarray:
    """Unit quaternion for the rotation vector ``w`` (angle = ||w||)."""
    w = np.asarray(w, dtype=float)
    a = float(np.linalg.norm(w))
    if a < _SMALL_ANGLE:
        s = 0.5 - a * a / 48.0
    else:
        s = np.sin(0.5 * a) / a
    return np.array([np.cos(0.5 * a), s * w[0], s * w[1], s * w[2]])


def quat_log(q) -> np.ndarray:
    """Rotation vector of ``q``; inverse of :func:`quat_exp` up to sign."""
    q = quat_canonical(q)
    v = float(np.linalg.norm(q[1:]))
    if v < _SMALL_ANGLE:
        # atan2(v, w)/v expanded around v = 0 (w ~ 1 after canonicalization)
        factor = (2.0 / q[0]) * (1.0 - v * v / (3.0 * q[0] * q[0]))
    else:
        factor = 2.0 * np.arctan2(v, q[0]) / v
    return factor * q[1:]


def quat_derivative(q, omega) -> np.ndarray:
    """Kinematic derivative q_dot = 0.5 * q X (0, omega), body-frame rates."""
    return 0.5 * _mul_raw(q, np.array([0.0, omega[0], omega[1], omega[2]]))


def rotate_vector(q, v) -> np.ndarray:
    """Rotate ``v`` by the unit quaternion ``q``."""
    u = np.asarray(q, dtype=float)[1:]
    v = np.asarray(v, dtype=float)
    t = 2.0 * np.cross(u, v)
    return v + q[0] * t + np.cross(u, t)


def quat_angular_distance(a, b) -> float:
    """Geodesic angle between two unit quaternions (double cover folded)."""
    e = quat_canonical(_mul_raw(quat_conj(a), b))
    return 2.0 * float(np.arctan2(np.linalg.norm(e[1:]), e[0]))
