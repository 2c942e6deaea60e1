"""Rotations, SO(3) exponential/logarithm maps, geodesics, point frames and
rigid superposition.

Rotations are plain ``(3, 3)`` float arrays; every function also accepts a
leading batch shape (``(..., 3, 3)`` and ``(..., 3)``).  Tangent vectors are
body-frame rotation vectors: ``exp_map(R, v) = R @ Exp(v)`` and
``log_map(R, Q) = Log(R.T @ Q)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, DegenerateDirection, ShapeMismatch, TooFewPoints

SMALL_ANGLE = 1e-6
# trace(R) <= -1 + this means the relative angle is within ~1e-3 rad of pi
PI_TRACE_MARGIN = 1e-6


@dataclass(frozen=True)
class Frame:
    """Rigid transform ``y = rot @ x + origin``."""

    origin: np.ndarray
    rot: np.ndarray

    def apply(self, pts):
        return np.asarray(pts) @ self.rot.T + self.origin


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp(v):
    """Rodrigues' formula, Taylor-expanded to second order near zero."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    k = hat(v)
    k2 = k @ k
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * k2


def so3_log(r):
    """Inverse of :func:`so3_exp` on rotations with angle below pi.

    Raises
    ------
    AngleNearPi
        If ``trace(r) <= -1 + 1e-6`` for any input.
    """
    r = np.asarray(r, dtype=float)
    tr = np.trace(r, axis1=-2, axis2=-1)
    if np.any(tr <= -1.0 + PI_TRACE_MARGIN):
        raise AngleNearPi("relative rotation angle too close to pi")
    w = 0.5 * vee(r - np.swapaxes(r, -1, -2))
    s = np.linalg.norm(w, axis=-1)
    theta = np.arctan2(s, 0.5 * (tr - 1.0))
    small = theta < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / safe_s)
    return w * scale[..., None]


def exp_map(base, tangent):
    return np.asarray(base, dtype=float) @ so3_exp(tangent)


def log_map(base, target):
    base = np.asarray(base, dtype=float)
    return so3_log(np.swapaxes(base, -1, -2) @ np.asarray(target, dtype=float))


def geodesic_distance(r0, r1):
    """Angle of the relative rotation; valid up to and including pi."""
    rel = np.swapaxes(np.asarray(r0), -1, -2) @ np.asarray(r1)
    w = 0.5 * vee(rel - np.swapaxes(rel, -1, -2))
    tr = np.trace(rel, axis1=-2, axis2=-1)
    return np.arctan2(np.linalg.norm(w, axis=-1), 0.5 * (tr - 1.0))


def geodesic_interp(r0, r1, t):
    """Point at fraction ``t`` along the minimal geodesic from r0 to r1."""
    t = np.asarray(t, dtype=float)
    v = log_map(r0, r1)
    return exp_map(r0, t[..., None] * v)


def sample_uniform_rotation(rng, size=None):
    """Haar-uniform rotation(s) from normalized Gaussian quaternions."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    q = rng.standard_normal(shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quat_to_matrix(q)


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def project_to_so3(m):
    """Closest rotation in Frobenius norm (polar factor with det fixed to +1)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    u = u.copy()
    u[..., :, -1] *= d[..., None]
    return u @ vt


def frame_from_normal(n, anchor_dir, use_cross=False):
    """Rotation with columns ``(n, d, n x d)``.

    By default ``d`` is the component of ``anchor_dir`` orthogonal to ``n``
    (one Gram-Schmidt step).  With ``use_cross=True`` it is the normalized
    cross product ``n x anchor_dir`` instead.
    """
    n = np.asarray(n, dtype=float)
    a = np.asarray(anchor_dir, dtype=float)
    an = np.linalg.norm(a, axis=-1, keepdims=True)
    if use_cross:
        d = np.cross(n, a)
    else:
        d = a - np.sum(a * n, axis=-1, keepdims=True) * n
    dn = np.linalg.norm(d, axis=-1, keepdims=True)
    # |d| / |a| = sin(angle between n and anchor)
    if np.any(an == 0) or np.any(dn <= 1e-6 * an):
        raise DegenerateDirection("anchor direction parallel to normal")
    d = d / dn
    return np.stack([n, d, np.cross(n, d)], axis=-1)


def kabsch(a, b):
    """Optimal rigid superposition of ``a`` onto ``b``.

    Parameters
    ----------
    a, b : (n, 3) array_like
        Corresponding point sets, ``n >= 3``.

    Returns
    -------
    rmsd : float
        Root-mean-square deviation after superposition.
    frame : Frame
        Transform with ``frame.apply(a)`` optimally aligned to ``b``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"point sets differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[0] < 3 or a.shape[1] != 3:
        raise TooFewPoints("kabsch needs at least 3 corresponding 3D points")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    pa = a - ca
    pb = b - cb
    h = pa.T @ pb
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    diff = pa @ rot.T - pb
    rmsd = float(np.sqrt(np.sum(diff * diff) / a.shape[0]))
    return rmsd, Frame(origin=cb - rot @ ca, rot=rot)


def kabsch_rmsd(a, b):
    """Minimum RMSD over rigid motions and the alignment achieving it."""
    return kabsch(a, b)
