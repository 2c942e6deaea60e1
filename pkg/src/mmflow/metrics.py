"""Surface-consistency and structure metrics.

Nearest neighbours are found by chunked brute force so ties always resolve
to the lowest index.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptySet, LengthMismatch, NonUnitNormal
from .geom3d import kabsch

# elements per temporary distance block
_BLOCK = 2_000_000


def _chunk(ref):
    return max(1, _BLOCK // max(1, ref.shape[0] * ref.shape[1]))


def _as_points(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise EmptySet(f"{name} is empty")
    return a


def nearest(query, ref):
    """Index of and distance to the nearest ``ref`` point for each query."""
    idx = np.empty(len(query), dtype=np.int64)
    dist = np.empty(len(query))
    step = _chunk(ref)
    for s in range(0, len(query), step):
        q = query[s:s + step]
        d2 = np.sum((q[:, None, :] - ref[None, :, :]) ** 2, axis=-1)
        j = np.argmin(d2, axis=1)
        idx[s:s + step] = j
        dist[s:s + step] = np.sqrt(d2[np.arange(len(q)), j])
    return idx, dist


def chamfer(a, b):
    """Symmetric Chamfer distance: half the sum of both mean nearest distances."""
    a = _as_points(a, "first point set")
    b = _as_points(b, "second point set")
    return 0.5 * (float(np.mean(nearest(a, b)[1])) + float(np.mean(nearest(b, a)[1])))


def normal_consistency(pred_points, pred_normals, gt_points, gt_normals, tol=1e-6):
    """Mean ``|n_gt . n_pred|`` over ground-truth points, matching each to
    its nearest predicted point."""
    pp = _as_points(pred_points, "prediction")
    gp = _as_points(gt_points, "ground truth")
    pn = np.asarray(pred_normals, dtype=float)
    gn = np.asarray(gt_normals, dtype=float)
    for n in (pn, gn):
        if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > tol):
            raise NonUnitNormal("normals must have unit length")
    j, _ = nearest(gp, pp)
    return float(np.mean(np.abs(np.sum(gn * pn[j], axis=-1))))


@dataclass
class VoxelGrid:
    origin: np.ndarray
    spacing: float
    occupancy: np.ndarray


def _voxel_keys(points, origin, spacing):
    return np.floor((points - origin) / spacing).astype(np.int64)


def voxelize(points, spacing=1.0, origin=None):
    p = _as_points(points, "point set")
    if origin is None:
        origin = np.floor(p.min(axis=0) / spacing) * spacing
    keys = _voxel_keys(p, origin, spacing)
    dims = keys.max(axis=0) + 1
    occ = np.zeros(tuple(dims), dtype=bool)
    occ[tuple(keys.T)] = True
    return VoxelGrid(np.asarray(origin, dtype=float), spacing, occ)


def voxel_iou(a, b, spacing=1.0):
    """IoU of voxel occupancy on a shared grid.

    The grid origin is the union bounding-box minimum snapped down to a
    multiple of ``spacing``.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    a = _as_points(a, "first point set")
    b = _as_points(b, "second point set")
    origin = np.floor(np.minimum(a.min(axis=0), b.min(axis=0)) / spacing) * spacing
    ka = {tuple(k) for k in _voxel_keys(a, origin, spacing)}
    kb = {tuple(k) for k in _voxel_keys(b, origin, spacing)}
    return len(ka & kb) / len(ka | kb)


def rmsd(a, b):
    return kabsch(a, b)[0]


def aar(pred_types, gt_types):
    """Percentage of positions where the predicted type equals the reference."""
    p = np.asarray(pred_types)
    g = np.asarray(gt_types)
    if p.shape != g.shape:
        raise LengthMismatch(f"sequence lengths differ: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise EmptySet("empty sequences")
    return 100.0 * float(np.mean(p == g))


def energy_distance(x, y):
    """Unbiased energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    x = _as_points(x, "first sample")
    y = _as_points(y, "second sample")

    def mean_dist(a, b, same):
        tot = 0.0
        step = _chunk(b)
        for s in range(0, len(a), step):
            d = np.sqrt(np.sum((a[s:s + step, None, :] - b[None]) ** 2, axis=-1))
            tot += d.sum()
        n = len(a) * len(b) - (len(a) if same else 0)
        return tot / n

    return 2 * mean_dist(x, y, False) - mean_dist(x, x, True) - mean_dist(y, y, True)


def total_variation(p, q):
    return 0.5 * float(np.sum(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float))))


def format_report(report):
    """One-line JSON with 17-significant-digit floats, keys in fixed order."""
    keys = ("chamfer", "nc", "iou", "rmsd", "aar")
    body = ", ".join(f'"{k}": {float(report[k]):.17g}' for k in keys)
    return "{" + body + "}\n"
