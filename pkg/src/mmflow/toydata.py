"""Toy datasets for desk-scale training and the synthetic molecule used by
the surface pipeline."""

import numpy as np

from . import geom3d
from .surface import Atom

EIGHT_GAUSSIAN_RADIUS = 4.0
EIGHT_GAUSSIAN_STD = 0.25


def eight_gaussian_means(radius=EIGHT_GAUSSIAN_RADIUS):
    ang = np.arange(8) * (np.pi / 4)
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def eight_gaussians(n, rng, radius=EIGHT_GAUSSIAN_RADIUS, std=EIGHT_GAUSSIAN_STD):
    """Mixture of eight isotropic Gaussians at 45 degree steps on a circle."""
    k = rng.integers(0, 8, size=n)
    return eight_gaussian_means(radius)[k] + std * rng.standard_normal((n, 2))


def two_clusters(n, rng, sep=3.0, std=0.5):
    """Two Gaussian clusters at ``(-sep, 0)`` / ``(sep, 0)`` labelled cyclic /
    disulfide.  Returns points and condition indices."""
    from .train import CYCLIC, DISULFIDE

    lab = np.where(rng.random(n) < 0.5, CYCLIC, DISULFIDE)
    cx = np.where(lab == CYCLIC, -sep, sep)
    pts = np.stack([cx, np.zeros(n)], axis=1) + std * rng.standard_normal((n, 2))
    return pts, lab


def cluster_centres(sep=3.0):
    from .train import CYCLIC, DISULFIDE

    return {CYCLIC: np.array([-sep, 0.0]), DISULFIDE: np.array([sep, 0.0])}


def rotation_modes(k, rng):
    return geom3d.sample_uniform_rotation(rng, k)


def concentrated_rotations(n, modes, rng, spread=0.15):
    """Rotations scattered around ``modes`` by small isotropic tangent noise."""
    idx = rng.integers(0, len(modes), size=n)
    return geom3d.exp_map(modes[idx], spread * rng.standard_normal((n, 3)))


def multinomial_probs(num_symbols, rng):
    """A fixed, clearly non-uniform distribution over symbols."""
    w = rng.gamma(1.0, 1.0, size=num_symbols) + 0.05
    return w / w.sum()


def categorical_sequences(n, length, probs, rng):
    return rng.choice(len(probs), size=(n, length), p=probs)


def torsion_angles(n, rng, centres=(1.0, 3.5, 5.2, 2.2), conc=8.0):
    """Von Mises draws around fixed per-angle centres, wrapped to [0, 2pi)."""
    c = np.asarray(centres)
    return np.mod(rng.vonmises(c, conc, size=(n, len(c))), 2 * np.pi)


# heavy-atom radii (Angstrom)
VDW = {"C": 1.7, "N": 1.55, "O": 1.52, "S": 1.8, "H": 1.1}


def synthetic_peptide(n_res, rng, rise=1.5, radius=2.3, offset=(0.0, 0.0, 0.0),
                      types=None, jitter=0.05):
    """Helical toy backbone with N, CA, C, O and a CB per residue.

    Residue types are random unless ``types`` is given; per-atom charges are drawn in [-40, 40] so the
    capping of electrostatics is exercised.
    """
    atoms = []
    off = np.asarray(offset, dtype=float)
    for i in range(n_res):
        phi = i * np.deg2rad(100.0)
        ca = np.array([radius * np.cos(phi), radius * np.sin(phi), i * rise])
        radial = np.array([np.cos(phi), np.sin(phi), 0.0])
        tang = np.array([-np.sin(phi), np.cos(phi), 0.0])
        rtype = int(rng.integers(0, 20)) if types is None else int(types[i])
        pos = {
            "N": ca - 1.2 * tang - 0.5 * np.array([0, 0, 1.0]),
            "CA": ca,
            "C": ca + 1.2 * tang + 0.4 * np.array([0, 0, 1.0]),
            "O": ca + 1.6 * tang + 1.1 * radial + 0.4 * np.array([0, 0, 1.0]),
            "CB": ca + 1.5 * radial - 0.3 * tang,
        }
        for name, p in pos.items():
            el = name[0]
            atoms.append(Atom(
                pos=p + jitter * rng.standard_normal(3) + off, element=el, vdw_radius=VDW[el],
                residue_index=i, residue_type=rtype, is_calpha=(name == "CA"),
                charge=float(rng.uniform(-40.0, 40.0)),
            ))
    centre = np.mean([a.pos for a in atoms], axis=0) - off
    for a in atoms:
        a.pos = a.pos - centre
    return atoms


def residue_frames(atoms):
    """Backbone frame per residue: x along CA->C, y in the N-CA-C plane.

    Returns ``(ca_positions, rotations, residue_types)`` ordered by residue.
    """
    by_res = {}
    for a in atoms:
        # first atom of each element wins, so the carbonyl C precedes CB
        by_res.setdefault(a.residue_index, {}).setdefault("CA" if a.is_calpha else a.element, a)
    ca, rots, types = [], [], []
    for i in sorted(by_res):
        r = by_res[i]
        c_alpha = r["CA"].pos
        e1 = r["C"].pos - c_alpha
        e1 = e1 / np.linalg.norm(e1)
        v = r["N"].pos - c_alpha
        v = v - (v @ e1) * e1
        e2 = v / np.linalg.norm(v)
        ca.append(c_alpha)
        rots.append(np.stack([e1, e2, np.cross(e1, e2)], axis=1))
        types.append(r["CA"].residue_type)
    return np.array(ca), np.array(rots), np.array(types, dtype=np.int64)
