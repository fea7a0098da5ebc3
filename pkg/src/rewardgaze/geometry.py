"""Gaze representations and the angular-error metric.

Gaze is carried either as (yaw, pitch) in radians or as a unit 3-vector
``(cos(pitch) sin(yaw), sin(pitch), cos(pitch) cos(yaw))``. Forward gaze is
``+z``, positive yaw turns toward ``+x`` and positive pitch toward ``+y``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

NORM_TOL = 1e-4


class SphericalGaze(NamedTuple):
    yaw: float
    pitch: float


class DirectionVector(NamedTuple):
    x: float
    y: float
    z: float


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite gaze component: {v!r}")


def _check_unit(v, name: str = "vector") -> None:
    n = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if n == 0.0:
        raise ValueError(f"{name} is the zero vector")
    if abs(n - 1.0) > NORM_TOL:
        raise ValueError(f"{name} is not unit length (norm={n:.6g})")


def to_direction(g: SphericalGaze) -> DirectionVector:
    yaw, pitch = float(g[0]), float(g[1])
    _check_finite(yaw, pitch)
    cp = math.cos(pitch)
    return DirectionVector(cp * math.sin(yaw), math.sin(pitch), cp * math.cos(yaw))


def to_spherical(v: DirectionVector) -> SphericalGaze:
    """Inverse of :func:`to_direction`.

    At the poles (``|y| == 1``) yaw is not identifiable and 0 is returned.
    """
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    _check_finite(x, y, z)
    _check_unit((x, y, z))
    y = min(1.0, max(-1.0, y))
    if x == 0.0 and z == 0.0:
        return SphericalGaze(0.0, math.asin(y))
    return SphericalGaze(math.atan2(x, z), math.asin(y))


def angular_error(a: DirectionVector, b: DirectionVector) -> float:
    """Angle between two unit vectors, in degrees."""
    _check_unit(a, "a")
    _check_unit(b, "b")
    dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    return math.degrees(math.acos(min(1.0, max(-1.0, dot))))


def cosine_sim(a: SphericalGaze, b: SphericalGaze) -> float:
    da, db = to_direction(a), to_direction(b)
    dot = da[0] * db[0] + da[1] * db[1] + da[2] * db[2]
    return min(1.0, max(-1.0, dot))


# Vectorised forms. Rows are (yaw, pitch) pairs or (x, y, z) vectors.


def directions(gaze: np.ndarray) -> np.ndarray:
    gaze = np.asarray(gaze, dtype=np.float64)
    if gaze.ndim != 2 or gaze.shape[1] != 2:
        raise ValueError(f"expected an (N, 2) array of (yaw, pitch), got shape {gaze.shape}")
    if not np.all(np.isfinite(gaze)):
        raise ValueError("non-finite gaze component")
    yaw, pitch = gaze[:, 0], gaze[:, 1]
    cp = np.cos(pitch)
    return np.stack([cp * np.sin(yaw), np.sin(pitch), cp * np.cos(yaw)], axis=1)


def sphericals(vecs: np.ndarray) -> np.ndarray:
    vecs = np.asarray(vecs, dtype=np.float64)
    if vecs.ndim != 2 or vecs.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {vecs.shape}")
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero direction vector")
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError("direction vectors must be unit length")
    x, y, z = vecs[:, 0], vecs[:, 1], vecs[:, 2]
    yaw = np.where((x == 0) & (z == 0), 0.0, np.arctan2(x, z))
    return np.stack([yaw, np.arcsin(np.clip(y, -1.0, 1.0))], axis=1)


def angular_errors(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row angular error in degrees between two (N, 2) gaze arrays."""
    cos = np.sum(directions(pred) * directions(target), axis=1)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def cosine_sims(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip(np.sum(directions(a) * directions(b), axis=1), -1.0, 1.0)
