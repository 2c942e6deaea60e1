"""Flat ``key = value`` run configuration and seeded random sub-streams."""

import zlib

import numpy as np

from .errors import ConfigError

FLOWS = ("pos", "so3", "torus", "cat", "con", "joint")


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x <= 1.0


# key -> (type, default, check, description)
SCHEMA = {
    "seed": (int, 42, lambda x: 0 <= x < 2**64, "master seed (u64)"),
    "out": (str, "out", None, "output directory"),
    "data": (str, "", None, "dataset directory (defaults to out)"),
    "checkpoint": (str, "", None, "checkpoint path (defaults to out/model.ckpt)"),
    "samples": (str, "", None, "sample point file for eval"),
    "reference": (str, "", None, "reference point file for eval"),
    "structure": (str, "", None, "sample structure file for eval"),
    "ref_structure": (str, "", None, "reference structure file for eval"),
    "atoms": (str, "", None, "atom file for the surface command"),
    "flow": (str, "pos", lambda x: x in FLOWS, "flow family"),
    "steps": (int, 100, _pos, "Euler steps when sampling"),
    "trajectory": (str, "", None, "comma separated t values or 'all'"),
    "guidance": (float, 0.0, _nonneg, "classifier-free guidance weight"),
    "condition": (str, "null", None, "null, cyclic, disulfide or length:N"),
    "conditional": (bool, False, None, "train a condition-aware position flow"),
    "iterations": (int, 2000, _nonneg, "training iterations"),
    "batch": (int, 256, _pos, "batch size per loss term"),
    "lr": (float, 2e-3, _pos, "initial learning rate"),
    "clip": (float, 1.0, _nonneg, "global gradient-norm clip (0 disables)"),
    "log_every": (int, 100, _pos, "iterations per loss-log row"),
    "plateau_factor": (float, 0.8, lambda x: 0 < x < 1, "plateau decay factor"),
    "plateau_patience": (int, 10, _pos, "plateau patience in log rows"),
    "min_lr": (float, 5e-6, _nonneg, "learning-rate floor"),
    "p_uncond": (float, 0.1, _unit, "condition drop probability"),
    "hidden": (int, 128, _pos, "hidden width of field networks"),
    "layers": (int, 3, _pos, "hidden layers of field networks"),
    "activation": (str, "silu", lambda x: x in ("silu", "relu"), "hidden activation"),
    "w_pos": (float, 0.2, _nonneg, "position loss weight"),
    "w_ori": (float, 0.2, _nonneg, "orientation loss weight"),
    "w_cat": (float, 1.0, _nonneg, "categorical loss weight"),
    "w_con": (float, 1.0, _nonneg, "continuous-feature loss weight"),
    "w_str": (float, 1.0, _nonneg, "structure loss weight"),
    "squared_con": (bool, True, None, "square the continuous-feature residual"),
    "convention": (str, "support", lambda x: x in ("support", "literal"), "CTMC rate normalizer"),
    "symbols": (int, 20, lambda x: x >= 2, "categorical alphabet size"),
    "seq_len": (int, 8, _pos, "toy sequence length"),
    "n_data": (int, 4096, _pos, "toy dataset size"),
    "n_samples": (int, 1024, _pos, "samples to draw (surfaces for the joint flow)"),
    "eight_radius": (float, 4.0, _pos, "radius of the eight-Gaussian ring"),
    "rot_modes": (int, 3, _pos, "modes of the toy rotation dataset"),
    "n_res": (int, 8, lambda x: x >= 2, "residues of the synthetic peptide"),
    "n_structures": (int, 32, _pos, "structure replicates for the joint flow"),
    "probe": (float, 1.0, _pos, "probe radius"),
    "surface_points": (int, 200, _pos, "target points per surface"),
    "spacing": (float, 1.0, _pos, "voxel spacing for IoU"),
    "cutoff": (float, 4.0, _pos, "graph cutoff radius"),
    "n_rbf": (int, 16, lambda x: x >= 2, "radial basis size"),
    "n_legendre": (int, 4, lambda x: x >= 2, "Legendre degree count"),
    "n_bessel": (int, 4, _pos, "radial Bessel basis size"),
    "esgn_layers": (int, 2, _pos, "surface network layers"),
    "esgn_dim": (int, 16, _pos, "surface network feature width"),
}


def _coerce(key, raw):
    typ, _, check, _ = SCHEMA[key]
    try:
        if typ is bool:
            s = str(raw).strip().lower()
            if s not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            val = s in ("true", "1", "yes")
        elif isinstance(raw, typ) and not isinstance(raw, bool):
            val = raw
        else:
            val = typ(str(raw).strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if check is not None and not check(val):
        raise ConfigError(f"value out of range for {key}: {raw!r}")
    return val


def defaults():
    return {k: v[1] for k, v in SCHEMA.items()}


def parse_config_text(text, source="<config>"):
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        key, sep, val = s.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{ln}: expected key = value")
        out[key.strip()] = val.strip()
    return out


def make_config(file_text=None, overrides=None, source="<config>"):
    """Defaults, then file values, then overrides; unknown keys are rejected."""
    cfg = defaults()
    layers = []
    if file_text is not None:
        layers.append(parse_config_text(file_text, source))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for k, v in layer.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = _coerce(k, v)
    return cfg


def format_config(cfg):
    lines = []
    for k in SCHEMA:
        v = cfg[k]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def stream(seed, name):
    """Independent generator for a named purpose derived from ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
