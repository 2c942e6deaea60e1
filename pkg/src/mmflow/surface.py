"""Probe-inflated sphere-union surface point clouds and their
physicochemical features.

Each atom sphere of radius ``vdw + probe`` carries a Fibonacci lattice;
points buried inside any other inflated sphere are rejected.  The lattice is
laid out in a local frame built from the atom's neighbours (plus a seeded
random spin), so rigidly moving the molecule moves the point cloud with it.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geom3d
from .errors import DegenerateDirection, EmptySurface, FormatError

# Kyte-Doolittle hydropathy, residue order ARNDCQEGHILKMFPSTWYV
RESIDUE_ORDER = "ARNDCQEGHILKMFPSTWYV"
KYTE_DOOLITTLE = np.array([
    1.8, -4.5, -3.5, -3.5, 2.5, -3.5, -3.5, -0.4, -3.2, 4.5,
    3.8, -3.9, 1.9, 2.8, -1.6, -0.8, -0.7, -0.9, -1.3, 4.2,
])
KD_MAX = 4.5
CHARGE_CAP = 30.0

DONOR, ACCEPTOR, NEUTRAL = 0, 1, 2
UPSILON_CODES = "DAN"
ELEMENTS = ("C", "N", "O", "S", "H")


@dataclass
class Atom:
    pos: np.ndarray
    element: str
    vdw_radius: float
    residue_index: int = 0
    residue_type: int = 0
    is_calpha: bool = False
    charge: float = 0.0


@dataclass
class SurfaceCloud:
    """Struct-of-arrays point cloud: ``pos``/``normal`` ``(m, 3)``, ``tau``
    ``(m, 2)`` (hydropathy, electrostatics) and ``upsilon`` ``(m,)`` codes."""

    pos: np.ndarray
    normal: np.ndarray
    tau: np.ndarray = None
    upsilon: np.ndarray = None
    owner: np.ndarray = None
    dropped: list = field(default_factory=list)

    def __len__(self):
        return len(self.pos)


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _atom_arrays(atoms):
    if not atoms:
        raise EmptySurface("no atoms")
    centres = np.array([a.pos for a in atoms], dtype=float)
    radii = np.array([a.vdw_radius for a in atoms], dtype=float)
    if np.any(radii <= 0):
        raise FormatError("van der Waals radii must be positive")
    return centres, radii


def local_frames(centres):
    """Per-atom rotations from the two nearest non-collinear neighbours.

    Atoms without such neighbours get the identity.
    """
    n = len(centres)
    frames = np.tile(np.eye(3), (n, 1, 1))
    if n < 2:
        return frames
    d = np.linalg.norm(centres[:, None] - centres[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    for a in range(n):
        e1 = centres[order[a, 0]] - centres[a]
        e1 /= np.linalg.norm(e1)
        for b in order[a, 1:n - 1]:
            v = centres[b] - centres[a]
            v = v - (v @ e1) * e1
            nv = np.linalg.norm(v)
            if nv > 1e-6 * d[a, b]:
                e2 = v / nv
                frames[a] = np.stack([e1, e2, np.cross(e1, e2)], axis=1)
                break
    return frames


def _exposed(points, owner, centres, big_r, tol):
    """Mask of points not strictly inside another atom's inflated sphere."""
    keep = np.ones(len(points), dtype=bool)
    for a in np.unique(owner):
        sel = np.nonzero(owner == a)[0]
        reach = np.linalg.norm(centres - centres[a], axis=1) < big_r + big_r[a]
        reach[a] = False
        nb = np.nonzero(reach)[0]
        if len(nb) == 0:
            continue
        d = np.linalg.norm(points[sel, None, :] - centres[None, nb, :], axis=-1)
        keep[sel] = np.all(d >= big_r[nb] - tol, axis=1)
    return keep


def sample_surface(atoms, probe_radius, target_count, rng, tol=1e-9):
    """Solvent-accessible surface points with outward unit normals.

    Point counts per atom are chosen so the surviving points have roughly
    uniform area density and total about ``target_count``.
    """
    if probe_radius <= 0:
        raise ValueError("probe radius must be positive")
    centres, radii = _atom_arrays(atoms)
    big_r = radii + probe_radius
    frames = local_frames(centres)
    area = 4.0 * np.pi * big_r**2

    probe = fibonacci_sphere(100)
    owner0 = np.repeat(np.arange(len(atoms)), len(probe))
    pts0 = (centres[:, None, :] + big_r[:, None, None]
            * np.einsum("aij,pj->api", frames, probe)).reshape(-1, 3)
    frac = _exposed(pts0, owner0, centres, big_r, tol).reshape(len(atoms), -1).mean(axis=1)
    exposed_area = float(np.sum(frac * area))
    if exposed_area == 0.0:
        raise EmptySurface("every candidate point is buried")
    density = target_count / exposed_area
    counts = np.where(frac > 0, np.ceil(density * area), 0).astype(int)

    pos, nrm, own = [], [], []
    for a in range(len(atoms)):
        spin = geom3d.sample_uniform_rotation(rng)
        if counts[a] == 0:
            continue
        dirs = fibonacci_sphere(counts[a]) @ (frames[a] @ spin).T
        pos.append(centres[a] + big_r[a] * dirs)
        nrm.append(dirs)
        own.append(np.full(counts[a], a))
    pos = np.concatenate(pos)
    nrm = np.concatenate(nrm)
    own = np.concatenate(own)
    keep = _exposed(pos, own, centres, big_r, tol)
    if not np.any(keep):
        raise EmptySurface("every candidate point is buried")
    return SurfaceCloud(pos=pos[keep], normal=nrm[keep], owner=own[keep])


def _nearest_atoms(points, centres):
    from .metrics import nearest

    return nearest(np.asarray(points, dtype=float), centres)[0]


def normalize_hydropathy(raw):
    return np.asarray(raw, dtype=float) / KD_MAX


def hydropathy_feature(point, atoms):
    """Kyte-Doolittle value of the nearest atom's residue, scaled to [-1, 1]."""
    centres, _ = _atom_arrays(atoms)
    j = _nearest_atoms(np.atleast_2d(point), centres)
    vals = normalize_hydropathy(KYTE_DOOLITTLE[[atoms[k].residue_type for k in j]])
    return float(vals[0]) if np.ndim(point) == 1 else vals


def electrostatics_feature(raw_charge):
    """Cap at +-30 and scale to [-1, 1]."""
    return np.clip(raw_charge, -CHARGE_CAP, CHARGE_CAP) / CHARGE_CAP


def _feph_from_element(el):
    if el in ("N", "H"):
        return DONOR
    if el == "O":
        return ACCEPTOR
    return NEUTRAL


def feph_label(point, atoms):
    """Donor if the nearest atom is N or (polar) H, acceptor if O, else neutral."""
    centres, _ = _atom_arrays(atoms)
    j = _nearest_atoms(np.atleast_2d(point), centres)
    labels = np.array([_feph_from_element(atoms[k].element) for k in j])
    return int(labels[0]) if np.ndim(point) == 1 else labels


def featurize(cloud, atoms):
    """Fill ``tau`` and ``upsilon`` from each point's nearest atom."""
    centres, _ = _atom_arrays(atoms)
    j = _nearest_atoms(cloud.pos, centres)
    rtype = np.array([atoms[k].residue_type for k in j])
    charge = np.array([atoms[k].charge for k in j])
    cloud.tau = np.stack([normalize_hydropathy(KYTE_DOOLITTLE[rtype]),
                          electrostatics_feature(charge)], axis=1)
    cloud.upsilon = np.array([_feph_from_element(atoms[k].element) for k in j])
    return cloud


def compute_surface(atoms, probe_radius, target_count, rng):
    return featurize(sample_surface(atoms, probe_radius, target_count, rng), atoms)


def point_frames(points, normals, calpha_positions):
    """Frame per point from its normal and the direction to the nearest C-alpha.

    Returns ``(frames, kept)``; points whose direction is parallel to the
    normal are dropped and absent from ``kept``.
    """
    ca = np.atleast_2d(np.asarray(calpha_positions, dtype=float))
    if ca.shape[0] == 0:
        raise EmptySurface("no C-alpha atoms")
    from .metrics import nearest

    j, _ = nearest(np.asarray(points, dtype=float), ca)
    frames, kept = [], []
    for i, (p, n) in enumerate(zip(points, normals)):
        try:
            frames.append(geom3d.frame_from_normal(n, ca[j[i]] - p))
        except DegenerateDirection:
            continue
        kept.append(i)
    return np.array(frames).reshape(-1, 3, 3), np.array(kept, dtype=np.int64)


# -- text formats ------------------------------------------------------------

def parse_atoms(text, source="<string>"):
    """Parse ``element x y z vdw residue_index residue_type is_calpha charge``."""
    atoms = []
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        f = s.split()
        if len(f) != 9:
            raise FormatError(f"{source}:{ln}: expected 9 fields, got {len(f)}")
        try:
            el = f[0].upper()
            if el not in ELEMENTS:
                raise ValueError(f"unknown element {f[0]!r}")
            flag = f[7].lower()
            if flag not in ("0", "1", "true", "false"):
                raise ValueError(f"bad is_calpha flag {f[7]!r}")
            atom = Atom(
                pos=np.array([float(f[1]), float(f[2]), float(f[3])]),
                element=el, vdw_radius=float(f[4]), residue_index=int(f[5]),
                residue_type=int(f[6]), is_calpha=flag in ("1", "true"),
                charge=float(f[8]),
            )
        except ValueError as e:
            raise FormatError(f"{source}:{ln}: {e}") from None
        if atom.vdw_radius <= 0 or not 0 <= atom.residue_type < 20:
            raise FormatError(f"{source}:{ln}: radius or residue type out of range")
        atoms.append(atom)
    return atoms


def read_atoms(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read atom file {path}: {e}") from None
    return parse_atoms(text, str(path))


def format_atoms(atoms):
    lines = ["# element x y z vdw residue_index residue_type is_calpha charge"]
    for a in atoms:
        x, y, z = a.pos
        lines.append(f"{a.element} {x:.17g} {y:.17g} {z:.17g} {a.vdw_radius:.17g} "
                     f"{a.residue_index} {a.residue_type} {int(a.is_calpha)} {a.charge:.17g}")
    return "\n".join(lines) + "\n"


def format_points(clouds):
    """Point file text; several clouds are separated by ``# sample k`` lines."""
    if isinstance(clouds, SurfaceCloud):
        clouds = [clouds]
    lines = ["# x y z nx ny nz tau0 tau1 upsilon"]
    for k, c in enumerate(clouds):
        if len(clouds) > 1:
            lines.append(f"# sample {k}")
        for p, n, t, u in zip(c.pos, c.normal, c.tau, c.upsilon):
            lines.append(" ".join(f"{v:.17g}" for v in (*p, *n, *t)) + " " + UPSILON_CODES[u])
    return "\n".join(lines) + "\n"


def parse_points(text, source="<string>"):
    """Inverse of :func:`format_points`; returns a list of clouds."""
    blocks = [[]]
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            if s[1:].split()[:1] == ["sample"] and blocks[-1]:
                blocks.append([])
            continue
        f = s.split()
        if len(f) != 9 or f[8] not in UPSILON_CODES:
            raise FormatError(f"{source}:{ln}: expected 'x y z nx ny nz tau0 tau1 D|A|N'")
        try:
            vals = [float(v) for v in f[:8]]
        except ValueError as e:
            raise FormatError(f"{source}:{ln}: {e}") from None
        blocks[-1].append((vals, UPSILON_CODES.index(f[8])))
    clouds = []
    for b in blocks:
        if not b:
            continue
        v = np.array([r[0] for r in b])
        clouds.append(SurfaceCloud(pos=v[:, :3], normal=v[:, 3:6], tau=v[:, 6:8],
                                   upsilon=np.array([r[1] for r in b])))
    if not clouds:
        raise FormatError(f"{source}: no surface points")
    return clouds


def read_points(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read point file {path}: {e}") from None
    return parse_points(text, str(path))
