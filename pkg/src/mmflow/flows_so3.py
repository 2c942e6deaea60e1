"""Geodesic conditional flow matching on SO(3).

Target fields are body-frame rotation vectors at the current rotation, so a
sampler step is ``R @ Exp(h * v)``.  With this convention the target along a
geodesic is constant in t.
"""

from dataclasses import dataclass

import numpy as np

from . import geom3d
from .errors import TEndpoint

T_MAX = 1.0 - 1e-4
REORTHO_EVERY = 64


@dataclass
class So3PathSample:
    r0: np.ndarray
    r1: np.ndarray
    t: np.ndarray
    rt: np.ndarray
    target_field: np.ndarray


def so3_path(r0, r1, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > T_MAX):
        raise TEndpoint(f"t must lie in [0, {T_MAX}]")
    r0 = np.asarray(r0, dtype=float)
    r1 = np.asarray(r1, dtype=float)
    rt = geom3d.geodesic_interp(r0, r1, t)
    target = geom3d.log_map(rt, r1) / (1.0 - t)[..., None]
    return So3PathSample(r0=r0, r1=r1, t=t, rt=rt, target_field=target)


def so3_loss(pred_field, sample):
    """Squared rotation-vector norm of ``pred - target`` (batch mean)."""
    r = np.asarray(pred_field, dtype=float) - sample.target_field
    return float(np.mean(np.sum(r * r, axis=-1)))


def so3_loss_grad(pred_field, sample):
    r = np.asarray(pred_field, dtype=float) - sample.target_field
    n = r.shape[0] if r.ndim > 1 else 1
    return 2.0 * r / n


def so3_euler_step(rt, field, step):
    return geom3d.exp_map(rt, step * np.asarray(field, dtype=float))


def so3_integrate(r0, field_fn, n_steps, reortho_every=REORTHO_EVERY, record=None):
    """Exp-map Euler sampler from ``t=0`` to ``t=1``.

    ``field_fn(R, t)`` returns body-frame rotation vectors.  States are
    projected back onto SO(3) every ``reortho_every`` steps.
    """
    r = np.array(r0, dtype=float)
    h = 1.0 / n_steps
    rec = set(record) if record is not None else set()
    frames = [r.copy()] if 0 in rec else []
    for k in range(n_steps):
        r = so3_euler_step(r, field_fn(r, k * h), h)
        if reortho_every and (k + 1) % reortho_every == 0:
            r = geom3d.project_to_so3(r)
        if k + 1 in rec:
            frames.append(r.copy())
    if record is not None:
        return r, frames
    return r


def exact_field(r1):
    """Closed-form target field towards fixed endpoint(s) ``r1``."""

    def field(r, t):
        return geom3d.log_map(r, r1) / (1.0 - t)

    return field
