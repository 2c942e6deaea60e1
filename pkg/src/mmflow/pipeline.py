"""The synth / train / sample / eval / surface commands as plain functions.

Every command takes a config dict (see :mod:`mmflow.config`), writes its
outputs atomically into ``cfg["out"]`` and echoes the effective config there
as ``config.txt``.
"""

import os

import numpy as np

from . import flows_cont, metrics, surface, toydata
from . import train as T
from .config import format_config, stream
from .errors import CheckpointMismatch, ConfigError, FormatError
from .nn import Mlp, atomic_write, load_checkpoint, save_checkpoint

JOINT_S = 4  # three FEPH classes plus the mask state
FLOW_CODES = {"pos": 0, "so3": 1, "torus": 2, "cat": 3, "con": 4, "joint": 5}
ACT_CODES = {"relu": 0, "silu": 1}


# -- small file helpers ------------------------------------------------------

def _fmt_row(row):
    return " ".join(f"{v:.17g}" if isinstance(v, (float, np.floating)) else str(v) for v in row)


def format_table(rows, header=None):
    lines = [f"# {header}"] if header else []
    lines += [_fmt_row(r) for r in rows]
    return "\n".join(lines) + "\n"


def read_table(path, ncols=None, dtype=float):
    """Whitespace table with ``#`` comments; errors name the file."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from None
    rows = []
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].split()
        if not s:
            continue
        if ncols is not None and len(s) != ncols:
            raise FormatError(f"{path}:{ln}: expected {ncols} columns, got {len(s)}")
        try:
            rows.append([dtype(v) for v in s])
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: {e}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ragged rows")
    return np.array(rows, dtype=dtype)


def _read_points(path):
    try:
        return surface.read_points(path)
    except FormatError as e:
        if str(path) in str(e):
            raise
        raise FormatError(f"{path}: {e}") from None


def format_structures(structs):
    """Blocks of ``type x y z r00 .. r22 chi1 .. chi4`` rows, one per residue."""
    lines = ["# type x y z r00 r01 r02 r10 r11 r12 r20 r21 r22 chi1 chi2 chi3 chi4"]
    for k, (types, ca, rots, tors) in enumerate(structs):
        lines.append(f"# sample {k}")
        for a, p, r, c in zip(types, ca, rots, tors):
            lines.append(f"{int(a)} " + _fmt_row([*map(float, p), *map(float, r.ravel()),
                                                  *map(float, c)]))
    return "\n".join(lines) + "\n"


def read_structures(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from None
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
        if len(f) != 17:
            raise FormatError(f"{path}:{ln}: expected 17 columns, got {len(f)}")
        try:
            blocks[-1].append((int(f[0]), [float(v) for v in f[1:]]))
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: {e}") from None
    out = []
    for b in blocks:
        if not b:
            continue
        v = np.array([r[1] for r in b])
        out.append((np.array([r[0] for r in b], dtype=np.int64), v[:, :3],
                    v[:, 3:12].reshape(-1, 3, 3), v[:, 12:16]))
    if not out:
        raise FormatError(f"{path}: no structures")
    return out


def _out_dir(cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    atomic_write(os.path.join(cfg["out"], "config.txt"), format_config(cfg))
    return cfg["out"]


def _write(out, name, text):
    path = os.path.join(out, name)
    atomic_write(path, text)
    return path


# -- synth -------------------------------------------------------------------

def _structure_of(atoms, tors):
    ca, rots, types = toydata.residue_frames(atoms)
    return types, ca, rots, tors


def cmd_synth(cfg):
    out = _out_dir(cfg)
    rng = stream(cfg["seed"], "synth")
    files = {}
    eight = toydata.eight_gaussians(cfg["n_data"], rng, radius=cfg["eight_radius"])
    files["eight_gaussians.txt"] = format_table(eight, "x y")
    pts, lab = toydata.two_clusters(cfg["n_data"], rng)
    files["clusters.txt"] = format_table([[*p, int(c)] for p, c in zip(pts, lab)], "x y condition")
    modes = toydata.rotation_modes(cfg["rot_modes"], rng)
    rots = toydata.concentrated_rotations(cfg["n_data"], modes, rng)
    files["rotations.txt"] = format_table(rots.reshape(-1, 9), "r00 r01 r02 r10 r11 r12 r20 r21 r22")
    probs = toydata.multinomial_probs(cfg["symbols"], rng)
    files["symbol_probs.txt"] = format_table(probs[:, None], "generator probability per symbol")
    seqs = toydata.categorical_sequences(cfg["n_data"], cfg["seq_len"], probs, rng)
    files["sequences.txt"] = format_table(seqs, "symbols")
    files["torsions.txt"] = format_table(toydata.torsion_angles(cfg["n_data"], rng),
                                         "chi1 chi2 chi3 chi4")

    n_res = cfg["n_res"]
    pep = toydata.synthetic_peptide(n_res, rng)
    rec = toydata.synthetic_peptide(2 * n_res, rng, offset=(9.0, 0.0, 0.0))
    files["peptide.atoms"] = surface.format_atoms(pep)
    files["receptor.atoms"] = surface.format_atoms(rec)
    ref = surface.compute_surface(pep, cfg["probe"], cfg["surface_points"], rng)
    files["reference.pts"] = surface.format_points(ref)
    files["reference_structure.txt"] = format_structures(
        [_structure_of(pep, toydata.torsion_angles(n_res, rng))])

    types = [a.residue_type for a in pep if a.is_calpha]
    clouds, structs = [], []
    for _ in range(cfg["n_structures"]):
        rep = toydata.synthetic_peptide(n_res, rng, types=types, jitter=0.2)
        clouds.append(surface.compute_surface(rep, cfg["probe"], cfg["surface_points"], rng))
        structs.append(_structure_of(rep, toydata.torsion_angles(n_res, rng)))
    files["surfaces.pts"] = surface.format_points(clouds)
    files["structures.txt"] = format_structures(structs)
    for name, text in files.items():
        _write(out, name, text)
    return sorted(files)


# -- models and checkpoints --------------------------------------------------

def term_dims(flow, cfg):
    """``{term: (in_dim, out_dim, conditional)}`` for a flow family."""
    if flow == "pos":
        return {"pos": (2, 2, cfg["conditional"])}
    if flow == "so3":
        return {"ori": (9, 3, False)}
    if flow == "torus":
        return {"str_tor": (8, 4, False)}
    if flow == "cat":
        s = cfg["symbols"] + 1
        return {"cat": (s, s - 1, False)}
    if flow == "con":
        return {"con": (2, 2, False)}
    L = cfg["n_res"]
    return {
        "pos": (3, 3, False), "ori": (9, 3, False), "cat": (JOINT_S, JOINT_S - 1, False),
        "con": (2, 2, False), "str_pos": (3 * L, 3 * L, False), "str_ori": (9, 3, False),
        "str_tor": (8, 4, False),
        "str_type": (flows_cont.NUM_RESIDUE_TYPES * L, flows_cont.NUM_RESIDUE_TYPES * L, False),
    }


def build_models(flow, cfg, rng):
    models = {}
    for term, (i, o, cond) in term_dims(flow, cfg).items():
        models[term] = T.init_field_model(i, o, rng, hidden=cfg["hidden"], layers=cfg["layers"],
                                          activation=cfg["activation"], conditional=cond)
    return models


def models_to_tensors(flow, models):
    tensors = {"meta/flow": np.array([FLOW_CODES[flow]], dtype=float)}
    for term in sorted(models):
        m = models[term]
        arch = [m.in_dim, m.out_dim, len(m.mlp.weights), ACT_CODES[m.mlp.activation],
                m.time_dim, m.cond_dim]
        tensors[f"{term}/arch"] = np.array(arch, dtype=float)
        for name, arr in zip(m.param_names(), m.params()):
            tensors[f"{term}/{name}"] = arr
    return tensors


def models_from_tensors(tensors):
    try:
        code = int(tensors["meta/flow"][0])
        flow = {v: k for k, v in FLOW_CODES.items()}[code]
        terms = sorted({k.split("/")[0] for k in tensors if k.endswith("/arch")})
        models = {}
        for term in terms:
            in_dim, out_dim, n_lin, act, tdim, cdim = (int(v) for v in tensors[f"{term}/arch"])
            ws = [tensors[f"{term}/W{i}"].copy() for i in range(n_lin)]
            bs = [tensors[f"{term}/b{i}"].copy() for i in range(n_lin)]
            act_name = {v: k for k, v in ACT_CODES.items()}[act]
            m = T.FieldModel(Mlp(ws, bs, act_name), in_dim, out_dim, tdim, cdim)
            if cdim:
                m.cond_base = tensors[f"{term}/cond_base"].copy()
                m.cond_delta = tensors[f"{term}/cond_delta"].copy()
            if ws[0].shape[0] != in_dim + tdim + cdim or ws[-1].shape[1] != out_dim:
                raise CheckpointMismatch(f"layer shapes of {term} disagree with its header")
            models[term] = m
    except KeyError as e:
        raise CheckpointMismatch(f"checkpoint lacks tensor {e}") from None
    if not models or not set(models) <= set(T.TERM_GROUP):
        raise CheckpointMismatch("checkpoint terms are not known loss terms")
    return flow, models


# -- train -------------------------------------------------------------------

def _data_dir(cfg):
    return cfg["data"] or cfg["out"]


def _pick(rng, n, k):
    return rng.integers(0, n, size=k)


def _joint_data(d):
    clouds = _read_points(os.path.join(d, "surfaces.pts"))
    structs = read_structures(os.path.join(d, "structures.txt"))
    if len(clouds) != len(structs):
        raise FormatError(f"{d}: surfaces and structures differ in count")
    pos, frames, ups, tau = [], [], [], []
    for c, (_, ca, _, _) in zip(clouds, structs):
        fr, _ = surface.point_frames(c.pos, c.normal, ca)
        pos.append(c.pos)
        frames.append(fr)
        ups.append(c.upsilon)
        tau.append(c.tau)
    return dict(
        pos=np.concatenate(pos), frames=np.concatenate(frames), ups=np.concatenate(ups),
        tau=np.concatenate(tau), ca=np.array([s[1].ravel() for s in structs]),
        rots=np.concatenate([s[2] for s in structs]),
        tors=np.concatenate([s[3] for s in structs]),
        types=np.array([s[0] for s in structs]),
    )


def batch_maker(flow, cfg):
    d = _data_dir(cfg)
    B = cfg["batch"]
    if flow == "pos" and cfg["conditional"]:
        tab = read_table(os.path.join(d, "clusters.txt"), 3)
        x, c = tab[:, :2], tab[:, 2].astype(np.int64)

        def make(rng):
            i = _pick(rng, len(x), B)
            return {"pos": T.euclidean_batch(x[i], rng, c[i])}
        return make
    if flow == "pos":
        x = read_table(os.path.join(d, "eight_gaussians.txt"), 2)
        return lambda rng: {"pos": T.euclidean_batch(x[_pick(rng, len(x), B)], rng)}
    if flow == "so3":
        r = read_table(os.path.join(d, "rotations.txt"), 9).reshape(-1, 3, 3)
        return lambda rng: {"ori": T.so3_batch(r[_pick(rng, len(r), B)], rng)}
    if flow == "torus":
        c = read_table(os.path.join(d, "torsions.txt"), 4)
        return lambda rng: {"str_tor": T.torus_batch(c[_pick(rng, len(c), B)], rng)}
    if flow == "cat":
        s = read_table(os.path.join(d, "sequences.txt"), dtype=int).ravel()
        S = cfg["symbols"] + 1
        if s.min() < 0 or s.max() >= S - 1:
            raise FormatError(f"{d}/sequences.txt: symbol outside 0..{S - 2}")
        return lambda rng: {"cat": T.categorical_batch(s[_pick(rng, len(s), B)], S, rng)}
    if flow == "con":
        tau = np.concatenate([c.tau for c in _read_points(os.path.join(d, "surfaces.pts"))])
        return lambda rng: {"con": T.euclidean_batch(tau[_pick(rng, len(tau), B)], rng)}

    j = _joint_data(d)
    if j["ca"].shape[1] != 3 * cfg["n_res"]:
        raise ConfigError(f"n_res={cfg['n_res']} does not match the structures in {d}")

    def make(rng):
        out = {}
        i = _pick(rng, len(j["pos"]), B)
        out["pos"] = T.euclidean_batch(j["pos"][i], rng)
        out["cat"] = T.categorical_batch(j["ups"][i], JOINT_S, rng)
        out["con"] = T.euclidean_batch(j["tau"][i], rng)
        out["ori"] = T.so3_batch(j["frames"][_pick(rng, len(j["frames"]), B)], rng)
        k = _pick(rng, len(j["ca"]), B)
        out["str_pos"] = T.euclidean_batch(j["ca"][k], rng)
        soft = flows_cont.soft_one_hot(j["types"][k])
        out["str_type"] = T.euclidean_batch(soft.reshape(len(k), -1), rng)
        out["str_ori"] = T.so3_batch(j["rots"][_pick(rng, len(j["rots"]), B)], rng)
        out["str_tor"] = T.torus_batch(j["tors"][_pick(rng, len(j["tors"]), B)], rng)
        return out
    return make


def _weights(cfg):
    return T.LossWeights(cfg["w_pos"], cfg["w_ori"], cfg["w_cat"], cfg["w_con"], cfg["w_str"])


def _train_config(cfg):
    return T.TrainConfig(
        iterations=cfg["iterations"], lr=cfg["lr"], clip=cfg["clip"],
        p_uncond=cfg["p_uncond"] if cfg["conditional"] else 0.0, log_every=cfg["log_every"],
        plateau_factor=cfg["plateau_factor"], plateau_patience=cfg["plateau_patience"],
        min_lr=cfg["min_lr"], squared_con=cfg["squared_con"])


def cmd_train(cfg):
    out = _out_dir(cfg)
    flow = cfg["flow"]
    make = batch_maker(flow, cfg)
    models = build_models(flow, cfg, stream(cfg["seed"], "init"))
    rows = T.train(models, make, _train_config(cfg), stream(cfg["seed"], "train"),
                   weights=_weights(cfg))
    csv = ["iteration," + ",".join(T.GROUPS) + ",total,lr"]
    for it, means, total, lr in rows:
        csv.append(f"{it}," + ",".join(f"{means[g]:.17g}" for g in T.GROUPS)
                   + f",{total:.17g},{lr:.17g}")
    _write(out, "loss.csv", "\n".join(csv) + "\n")
    ckpt = cfg["checkpoint"] or os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, models_to_tensors(flow, models))
    return ckpt, rows


# -- sample ------------------------------------------------------------------

def record_steps(request, n_steps):
    """Step indices for a trajectory request: ``all`` or comma-separated t values."""
    request = request.strip()
    if not request:
        return None
    if request == "all":
        return list(range(n_steps + 1))
    steps = []
    for tok in request.split(","):
        try:
            t = float(tok)
        except ValueError:
            raise ConfigError(f"bad trajectory time {tok!r}") from None
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"trajectory time {t} outside [0, 1]")
        steps.append(int(round(t * n_steps)))
    return steps


def format_trajectory(frames, steps, n_steps):
    """Blocks of states headed by their step index and time."""
    lines = []
    for k, x in zip(sorted(set(steps)), frames):
        lines.append(f"# step {k} t {k / n_steps:.17g}")
        lines += [_fmt_row(r) for r in np.asarray(x).reshape(len(x), -1)]
    return "\n".join(lines) + "\n"


def _load_models(cfg, given):
    ckpt = cfg["checkpoint"] or os.path.join(_data_dir(cfg), "model.ckpt")
    flow, models = models_from_tensors(load_checkpoint(ckpt))
    if "flow" in given and cfg["flow"] != flow:
        raise CheckpointMismatch(f"{ckpt} holds a {flow} flow, not {cfg['flow']}")
    return flow, models


def _condition(cfg, model):
    label = T.ConditionLabel.parse(cfg["condition"])
    if label.kind != "null" and not model.conditional:
        raise CheckpointMismatch("checkpoint model is not conditional")
    return label.index if model.conditional else None


def cmd_sample(cfg, given=()):
    out = _out_dir(cfg)
    flow, models = _load_models(cfg, given)
    rng = stream(cfg["seed"], "sample")
    N = cfg["steps"]
    n = cfg["n_samples"]
    rec = record_steps(cfg["trajectory"], N)
    frames = [] if rec is not None else None
    written = []

    def run(res):
        if rec is None:
            return res
        x, fr = res
        frames.extend(fr)
        return x

    if flow == "pos":
        m = models["pos"]
        x = run(T.sample_euclidean(m, n, rng, N, _condition(cfg, m), cfg["guidance"], rec))
        written.append(_write(out, "samples.txt", format_table(x, "x y")))
    elif flow == "con":
        x = run(T.sample_euclidean(models["con"], n, rng, N, record=rec))
        written.append(_write(out, "samples.txt", format_table(x, "tau0 tau1")))
    elif flow == "so3":
        r = run(T.sample_rotations(models["ori"], n, rng, N, record=rec))
        written.append(_write(out, "samples.txt", format_table(r.reshape(n, 9))))
    elif flow == "torus":
        c = run(T.sample_torus(models["str_tor"], n, rng, N, record=rec))
        written.append(_write(out, "samples.txt", format_table(c, "chi1 chi2 chi3 chi4")))
    elif flow == "cat":
        if rec is not None:
            raise ConfigError("trajectories are recorded for continuous flows only")
        m = models["cat"]
        seq = T.sample_categorical(m, n * cfg["seq_len"], m.in_dim, rng, N)
        written.append(_write(out, "samples.txt",
                              format_table(seq.reshape(n, cfg["seq_len"]), "symbols")))
    else:
        written += _sample_joint(models, cfg, rng, rec, frames, out)
    if frames is not None:
        written.append(_write(out, "trajectory.txt", format_trajectory(frames, rec, N)))
    return written


def _sample_joint(models, cfg, rng, rec, frames, out):
    N = cfg["steps"]
    n_pts = cfg["surface_points"]
    L = cfg["n_res"]
    if models["str_pos"].out_dim != 3 * L:
        raise CheckpointMismatch(f"checkpoint was trained with a different n_res than {L}")
    clouds, structs = [], []
    for _ in range(cfg["n_samples"]):
        res = T.sample_euclidean(models["pos"], n_pts, rng, N, record=rec)
        if rec is not None:
            pos, fr = res
            if not frames:
                frames.extend(fr)
        else:
            pos = res
        rot = T.sample_rotations(models["ori"], n_pts, rng, N)
        tau = np.clip(T.sample_euclidean(models["con"], n_pts, rng, N), -1.0, 1.0)
        ups = T.sample_categorical(models["cat"], n_pts, JOINT_S, rng, N)
        clouds.append(surface.SurfaceCloud(pos=pos, normal=rot[:, :, 0], tau=tau, upsilon=ups))

        ca = T.sample_euclidean(models["str_pos"], 1, rng, N).reshape(L, 3)
        rr = T.sample_rotations(models["str_ori"], L, rng, N)
        tor = T.sample_torus(models["str_tor"], L, rng, N)
        soft = T.sample_euclidean(models["str_type"], 1, rng, N).reshape(L, -1)
        structs.append((flows_cont.decode_soft_type(soft), ca, rr, tor))
    return [_write(out, "samples.pts", surface.format_points(clouds)),
            _write(out, "structure.txt", format_structures(structs))]


# -- eval --------------------------------------------------------------------

REPORT_KEYS = ("chamfer", "nc", "iou", "rmsd", "aar")


def _sibling(path, name):
    return os.path.join(os.path.dirname(os.path.abspath(path)), name)


def evaluate(samples, reference, structs, ref_structs, spacing=1.0):
    """Per-sample metric lists and their means."""
    ref = reference[0]
    ref_s = ref_structs[0]
    per = {k: [] for k in REPORT_KEYS}
    for c in samples:
        per["chamfer"].append(metrics.chamfer(c.pos, ref.pos))
        per["nc"].append(metrics.normal_consistency(c.pos, c.normal, ref.pos, ref.normal))
        per["iou"].append(metrics.voxel_iou(c.pos, ref.pos, spacing))
    for types, ca, _, _ in structs:
        per["rmsd"].append(metrics.rmsd(ca, ref_s[1]))
        per["aar"].append(metrics.aar(types, ref_s[0]))
    report = {k: float(np.mean(v)) for k, v in per.items()}
    return report, per


def format_histograms(per, bins=10):
    """Gnuplot data: one ``index`` block per metric, ``centre count`` rows."""
    blocks = []
    for k in REPORT_KEYS:
        v = np.asarray(per[k], dtype=float)
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
        centres = 0.5 * (edges[1:] + edges[:-1])
        rows = [f"# {k}: bin_centre count"] + [f"{c:.17g} {int(n)}" for c, n in zip(centres, counts)]
        blocks.append("\n".join(rows))
    return "\n\n\n".join(blocks) + "\n"


def cmd_eval(cfg):
    if not cfg["samples"] or not cfg["reference"]:
        raise ConfigError("eval needs samples and reference paths")
    samples = _read_points(cfg["samples"])
    reference = _read_points(cfg["reference"])
    structs = read_structures(cfg["structure"] or _sibling(cfg["samples"], "structure.txt"))
    ref_structs = read_structures(cfg["ref_structure"]
                                  or _sibling(cfg["reference"], "reference_structure.txt"))
    report, per = evaluate(samples, reference, structs, ref_structs, cfg["spacing"])
    out = _out_dir(cfg)
    return [_write(out, "report.json", metrics.format_report(report)),
            _write(out, "metrics.dat", format_histograms(per))], report


# -- surface -----------------------------------------------------------------

def cmd_surface(cfg):
    out = _out_dir(cfg)
    rng = stream(cfg["seed"], "surface")
    atoms = surface.read_atoms(cfg["atoms"]) if cfg["atoms"] else \
        toydata.synthetic_peptide(cfg["n_res"], rng)
    cloud = surface.compute_surface(atoms, cfg["probe"], cfg["surface_points"], rng)
    return [_write(out, "surface.pts", surface.format_points(cloud))]
