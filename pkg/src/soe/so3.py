"""Rotation matrices in SO(3): construction, validation, sampling, composition.

Coordinates are column vectors, ``c' = R @ c``, with axes (x, y, z) bound to
array indices (0, 1, 2) and the right-hand rule for positive angles.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6
AXIS_TOL = 1e-9


class RotationError(ValueError):
    """Raised for matrices or axis-angle pairs that do not describe a rotation."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AxisAngle:
    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = _frozen(self.axis).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > AXIS_TOL:
            raise RotationError(f"axis must be a unit vector, got norm {np.linalg.norm(axis):.6g}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "angle", float(self.angle))


@dataclass(frozen=True)
class RotationMatrix:
    """An immutable 3x3 rotation matrix.

    Validation of raw entries is opt-in (``validate=True`` or :meth:`check`);
    everything built through this module is valid by construction.
    """

    m: np.ndarray
    validate: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        m = _frozen(self.m)
        if m.shape != (3, 3):
            raise RotationError(f"rotation must be 3x3, got shape {m.shape}")
        object.__setattr__(self, "m", m)
        if self.validate:
            self.check()

    def check(self, tol: float = ORTHO_TOL) -> "RotationMatrix":
        err = np.abs(self.m.T @ self.m - np.eye(3)).max()
        if err >= tol:
            raise RotationError(f"matrix is not orthogonal (max |R^T R - I| = {err:.3g})")
        det = np.linalg.det(self.m)
        if abs(det - 1.0) >= tol:
            raise RotationError(f"determinant is {det:.9g}, expected +1")
        return self

    @property
    def T(self) -> "RotationMatrix":
        return transpose(self)

    def __matmul__(self, other):
        if isinstance(other, RotationMatrix):
            return compose(self, other)
        return self.m @ np.asarray(other)

    def __array__(self, dtype=None, copy=None):
        return self.m.astype(dtype) if dtype is not None else self.m.copy()

    def __eq__(self, other):
        return isinstance(other, RotationMatrix) and np.array_equal(self.m, other.m)

    def __hash__(self):
        return hash(self.m.tobytes())

    def to_bytes(self) -> bytes:
        """9 little-endian float64 values, row-major."""
        return struct.pack("<9d", *self.m.ravel())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "RotationMatrix":
        if len(buf) != 72:
            raise RotationError(f"expected 72 bytes, got {len(buf)}")
        return cls(np.array(struct.unpack("<9d", buf)).reshape(3, 3), validate=True)


IDENTITY = RotationMatrix(np.eye(3))


def from_axis_angle(aa: AxisAngle | tuple) -> RotationMatrix:
    """Rodrigues' formula: R = I + sin(t) K + (1 - cos(t)) K^2."""
    if not isinstance(aa, AxisAngle):
        aa = AxisAngle(*aa)
    x, y, z = aa.axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    t = aa.angle
    R = np.eye(3) + np.sin(t) * K + (1.0 - np.cos(t)) * (K @ K)
    return RotationMatrix(R)


def axis_rotation(axis: int, angle: float) -> RotationMatrix:
    """Rotation about coordinate axis 0, 1 or 2."""
    e = np.zeros(3)
    e[axis] = 1.0
    return from_axis_angle(AxisAngle(e, angle))


def compose(a: RotationMatrix, b: RotationMatrix) -> RotationMatrix:
    """Matrix product ``a @ b``: apply ``b`` first, then ``a``."""
    return RotationMatrix(a.m @ b.m)


def transpose(r: RotationMatrix) -> RotationMatrix:
    return RotationMatrix(r.m.T)


def sample_uniform(rng: np.random.Generator, angle_range=(0.0, np.pi)):
    """Draw a random rotation with a uniform axis and an angle uniform in ``angle_range``.

    The axis is a normalized standard Gaussian 3-vector. Returns the matrix and
    the axis-angle pair it was built from.
    """
    lo, hi = (float(v) for v in angle_range)
    if not (0.0 <= lo <= hi <= np.pi):
        raise RotationError(f"angle range must satisfy 0 <= lo <= hi <= pi, got ({lo}, {hi})")
    v = rng.standard_normal(3)
    norm = np.linalg.norm(v)
    while norm < 1e-12:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
    angle = rng.uniform(lo, hi) if hi > lo else lo
    aa = AxisAngle(v / norm, angle)
    return from_axis_angle(aa), aa


def right_angle_rotations() -> list[RotationMatrix]:
    """The 24 rotations that map coordinate axes onto coordinate axes.

    Entries are exactly 0 or +-1 (signed permutation matrices with det +1).
    """
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if np.linalg.det(m) > 0:
                out.append(RotationMatrix(m))
    return out


def sample_right_angle(rng: np.random.Generator) -> RotationMatrix:
    """A uniformly chosen rotation from the 24-element axis-aligned group."""
    rots = right_angle_rotations()
    return rots[int(rng.integers(len(rots)))]


def snap(r: RotationMatrix, tol: float = 1e-9) -> RotationMatrix:
    """Round entries within ``tol`` of 0 or +-1 to the exact value.

    Rodrigues at multiples of pi/2 leaves ~1e-16 residue; snapping lets the
    volume resampler take its exact integer-coordinate path.
    """
    m = r.m.copy()
    near = np.abs(m - np.round(m)) < tol
    m[near] = np.round(m[near])
    return RotationMatrix(m)
