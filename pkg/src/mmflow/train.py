"""Vector-field regressors, the combined multi-modality loss, classifier-free
conditioning, training loop and Euler samplers.

A batch is a dict mapping a term name to a :class:`TermBatch`.  Term names and
the loss weight each one is scaled by:

========  =======  ==========================================
term      weight   target
========  =======  ==========================================
pos       pos      x1 - x0 (surface point positions)
ori       ori      log_{Rt}(R1) / (1 - t) (surface frames)
cat       cat      clean categorical state (cross-entropy)
con       con      x1 - x0 (continuous surface features)
str_pos   str      x1 - x0 (residue positions)
str_ori   str      log_{Rt}(R1) / (1 - t) (residue frames)
str_tor   str      c1 - c0 (side-chain torsions)
str_type  str      a1 - a0 (soft one-hot residue types)
========  =======  ==========================================
"""

from dataclasses import dataclass, field

import numpy as np

from . import flows_cont, flows_discrete, flows_so3, geom3d
from .errors import ConfigError, EmptyBatch, NumericError, ShapeMismatch
from .nn import (AdamState, PlateauScheduler, adam_step, init_mlp, mlp_backward,
                 mlp_forward, time_embedding)

TERM_GROUP = {
    "pos": "pos", "ori": "ori", "cat": "cat", "con": "con",
    "str_pos": "str", "str_ori": "str", "str_tor": "str", "str_type": "str",
}
GROUPS = ("pos", "ori", "cat", "con", "str")

NULL, CYCLIC, DISULFIDE = 0, 1, 2
MAX_LENGTH = 64
NUM_CONDITIONS = 3 + MAX_LENGTH


@dataclass(frozen=True)
class ConditionLabel:
    """Opaque design condition; ``null`` is the reserved index 0."""

    kind: str = "null"
    length: int = 0

    def __post_init__(self):
        if self.kind not in ("null", "cyclic", "disulfide", "length"):
            raise ConfigError(f"unknown condition {self.kind!r}")
        if self.kind == "length" and not 1 <= self.length <= MAX_LENGTH:
            raise ConfigError(f"length condition must be in 1..{MAX_LENGTH}")

    @property
    def index(self):
        if self.kind == "length":
            return 2 + self.length
        return {"null": NULL, "cyclic": CYCLIC, "disulfide": DISULFIDE}[self.kind]

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text.startswith("length"):
            _, _, n = text.partition(":")
            try:
                return cls("length", int(n))
            except ValueError:
                raise ConfigError(f"bad length condition {text!r}") from None
        return cls(text)


@dataclass
class LossWeights:
    pos: float = 0.2
    ori: float = 0.2
    cat: float = 1.0
    con: float = 1.0
    str: float = 1.0

    def __post_init__(self):
        for g in GROUPS:
            if getattr(self, g) < 0:
                raise ConfigError(f"loss weight {g} must be nonnegative")

    def of(self, term):
        return getattr(self, TERM_GROUP[term])


@dataclass
class FieldModel:
    """MLP on ``[state features, time embedding, condition embedding]``.

    The condition embedding is ``base + delta[c]``; the null condition uses
    ``base`` alone.  Offsets start at zero and only move when that condition
    is actually seen in training.
    """

    mlp: object
    in_dim: int
    out_dim: int
    time_dim: int = 32
    cond_dim: int = 0
    cond_base: np.ndarray = None
    cond_delta: np.ndarray = None

    @property
    def conditional(self):
        return self.cond_dim > 0

    def params(self):
        ps = self.mlp.arrays()
        if self.conditional:
            ps += [self.cond_base, self.cond_delta]
        return ps

    def param_names(self):
        names = self.mlp.names()
        if self.conditional:
            names += ["cond_base", "cond_delta"]
        return names

    def _inputs(self, x, t, cond):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"expected (B, {self.in_dim}) inputs, got {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        parts = [x, time_embedding(t, self.time_dim)]
        if self.conditional:
            c = np.zeros(x.shape[0], dtype=np.int64) if cond is None else \
                np.broadcast_to(np.asarray(cond, dtype=np.int64), (x.shape[0],))
            parts.append(self.cond_base + self.cond_delta[c] * (c != NULL)[:, None])
        else:
            c = None
        return np.concatenate(parts, axis=1), c

    def forward(self, x, t, cond=None):
        z, c = self._inputs(x, t, cond)
        out, cache = mlp_forward(self.mlp, z, return_cache=True)
        return out, (cache, c)

    def __call__(self, x, t, cond=None):
        return self.forward(x, t, cond)[0]

    def backward(self, cache, upstream):
        mcache, c = cache
        grads, dz = mlp_backward(self.mlp, mcache, upstream)
        if self.conditional:
            gc = dz[:, self.in_dim + self.time_dim:]
            gbase = gc.sum(axis=0)
            gdelta = np.zeros_like(self.cond_delta)
            np.add.at(gdelta, c, gc)
            gdelta[NULL] = 0.0
            grads += [gbase, gdelta]
        return grads, dz[:, :self.in_dim]


def init_field_model(in_dim, out_dim, rng, hidden=64, layers=3, activation="silu",
                     time_dim=32, conditional=False, cond_dim=8):
    cd = cond_dim if conditional else 0
    sizes = [in_dim + time_dim + cd] + [hidden] * layers + [out_dim]
    mlp = init_mlp(sizes, rng, activation)
    m = FieldModel(mlp, in_dim, out_dim, time_dim, cd)
    if conditional:
        m.cond_base = rng.standard_normal(cd)
        m.cond_delta = np.zeros((NUM_CONDITIONS, cd))
    return m


# -- loss terms --------------------------------------------------------------

def field_mse(pred, target, squared=True):
    """Batch mean of ``||pred - target||^2`` (or of the plain norm)."""
    r = np.asarray(pred) - np.asarray(target)
    n = r.shape[0]
    sq = np.sum(r * r, axis=-1)
    if squared:
        return float(np.mean(sq)), 2.0 * r / n
    nrm = np.sqrt(sq)
    safe = np.where(nrm > 0, nrm, 1.0)
    return float(np.mean(nrm)), np.where(nrm[:, None] > 0, r / safe[:, None], 0.0) / n


@dataclass
class TermBatch:
    x: np.ndarray
    t: np.ndarray
    target: np.ndarray
    cond: np.ndarray = None

    def __len__(self):
        return len(self.x)


@dataclass
class LossResult:
    total: float
    breakdown: dict
    grads: dict = field(default_factory=dict)


def term_loss(term, pred, target, squared_con=True):
    if term == "cat":
        return (flows_discrete.dfm_loss(pred, target),
                flows_discrete.dfm_loss_grad(pred, target))
    squared = squared_con if term == "con" else True
    return field_mse(pred, target, squared)


def total_loss(batch, weights, models, squared_con=True, with_grads=True, extra=None):
    """Weighted sum of the per-modality flow-matching losses.

    Returns a :class:`LossResult` whose ``breakdown`` holds the unweighted
    loss of each weight group (``str`` sums its sub-terms; inactive groups
    are 0) and whose ``grads`` maps each term to gradients of the weighted
    total with respect to ``models[term].params()``.

    ``extra`` maps names to ``(weight, fn)`` for auxiliary constraints (e.g.
    backbone or torsion penalties); ``fn(batch, models)`` returns
    ``(loss, {term: grads})``.  No such constraints are defined here.
    """
    if not batch or all(len(b) == 0 for b in batch.values()):
        raise EmptyBatch("no samples in batch")
    breakdown = {g: 0.0 for g in GROUPS}
    grads = {}
    for term in sorted(batch):
        tb = batch[term]
        if term not in TERM_GROUP:
            raise ConfigError(f"unknown loss term {term!r}")
        if len(tb) == 0:
            continue
        model = models[term]
        pred, cache = model.forward(tb.x, tb.t, tb.cond)
        loss, dpred = term_loss(term, pred, tb.target, squared_con)
        breakdown[TERM_GROUP[term]] += loss
        if with_grads:
            grads[term] = model.backward(cache, weights.of(term) * dpred)[0]
    total = sum(getattr(weights, g) * breakdown[g] for g in GROUPS)
    for name, (w, fn) in sorted((extra or {}).items()):
        loss, g_extra = fn(batch, models)
        breakdown[name] = float(loss)
        total += w * loss
        if with_grads:
            for term, gs in g_extra.items():
                base = grads.get(term) or [np.zeros_like(p) for p in models[term].params()]
                grads[term] = [a + w * b for a, b in zip(base, gs)]
    return LossResult(float(total), breakdown, grads)


# -- classifier-free conditioning -------------------------------------------

def cfg_drop(cond, p_uncond, rng):
    """Replace each condition by null with probability ``p_uncond``."""
    cond = np.asarray(cond, dtype=np.int64)
    null = rng.random(cond.shape) < p_uncond
    return np.where(null, NULL, cond), null


def cfg_train_step(batch, models, weights, p_uncond, rng, optim=None, squared_con=True):
    """One classifier-free training step.

    Conditions in every term batch are independently nulled with probability
    ``p_uncond`` before the forward pass.  When ``optim`` is given the models
    are updated.  Returns ``(LossResult, null_mask_by_term)``.
    """
    if not 0.0 <= p_uncond <= 1.0:
        raise ConfigError("p_uncond must lie in [0, 1]")
    dropped = {}
    masks = {}
    for term in sorted(batch):
        tb = batch[term]
        if tb.cond is not None:
            c, m = cfg_drop(tb.cond, p_uncond, rng)
            tb = TermBatch(tb.x, tb.t, tb.target, c)
            masks[term] = m
        dropped[term] = tb
    res = total_loss(dropped, weights, models, squared_con)
    if optim is not None:
        optim.step(res.grads)
    return res, masks


def cfg_sample_field(v_cond, v_null, guidance_w):
    v_cond = np.asarray(v_cond, dtype=float)
    v_null = np.asarray(v_null, dtype=float)
    if v_cond.shape != v_null.shape:
        raise ShapeMismatch("conditional and null fields differ in shape")
    return (1.0 + guidance_w) * v_cond - guidance_w * v_null


def guided(model, cond=None, guidance_w=0.0):
    """Field callable ``f(x, t)`` with optional classifier-free guidance."""

    def f(x, t):
        if cond is None or not model.conditional:
            return model(x, t)
        vc = model(x, t, cond)
        if guidance_w == 0.0:
            return vc
        return cfg_sample_field(vc, model(x, t, NULL), guidance_w)

    return f


# -- optimizer ---------------------------------------------------------------

class Optimizer:
    """Adam over the parameters of several models with one global clip."""

    def __init__(self, models, lr, clip=1.0, scheduler=None):
        self.models = models
        self.terms = sorted(models)
        self.state = AdamState.zeros_like(self._params())
        self.lr = lr
        self.clip = clip
        self.scheduler = scheduler

    def _params(self):
        return [p for t in self.terms for p in self.models[t].params()]

    def step(self, grads):
        flat = []
        for t in self.terms:
            g = grads.get(t)
            if g is None:
                g = [np.zeros_like(p) for p in self.models[t].params()]
            flat += g
        return adam_step(self._params(), flat, self.state, self.lr, clip=self.clip)


# -- batch builders ----------------------------------------------------------

def sample_times(n, rng, t_max=flows_cont.T_MAX_TRAIN):
    return rng.uniform(0.0, t_max, size=n)


def euclidean_batch(x1, rng, cond=None):
    x1 = np.asarray(x1, dtype=float)
    t = sample_times(len(x1), rng)
    x0 = rng.standard_normal(x1.shape)
    s = flows_cont.linear_path(x0, x1, t)
    return TermBatch(s.xt, t, s.target_field, cond)


def _safe_prior_rotations(r1, rng):
    # the uniform prior almost never lands at the cut locus; redraw if it does
    r0 = geom3d.sample_uniform_rotation(rng, len(r1))
    while True:
        rel = np.swapaxes(r0, -1, -2) @ r1
        bad = np.trace(rel, axis1=-2, axis2=-1) <= -1.0 + 1e-5
        if not np.any(bad):
            return r0
        r0[bad] = geom3d.sample_uniform_rotation(rng, int(bad.sum()))


def so3_batch(r1, rng, cond=None):
    r1 = np.asarray(r1, dtype=float)
    r0 = _safe_prior_rotations(r1, rng)
    t = sample_times(len(r1), rng, flows_so3.T_MAX)
    s = flows_so3.so3_path(r0, r1, t)
    return TermBatch(s.rt.reshape(len(r1), 9), t, s.target_field, cond)


def torus_features(c):
    return np.concatenate([np.cos(c), np.sin(c)], axis=-1)


def torus_batch(c1, rng, cond=None):
    c1 = np.asarray(c1, dtype=float)
    t = sample_times(len(c1), rng)
    c0 = flows_cont.sample_torus_prior(c1.shape, rng)
    ct = flows_cont.torus_path(c0, c1, t)
    return TermBatch(torus_features(ct), t, flows_cont.torus_target(c0, c1), cond)


def one_hot(x, n):
    out = np.zeros(np.shape(x) + (n,))
    np.put_along_axis(out, np.asarray(x)[..., None], 1.0, axis=-1)
    return out


def categorical_batch(x1, S, rng, cond=None):
    path = flows_discrete.ConditionalPath("mask", S)
    x1 = np.asarray(x1, dtype=np.int64)
    t = rng.uniform(0.0, 1.0, size=len(x1))
    xt = flows_discrete.sample_conditional(path, x1, t, rng)
    return TermBatch(one_hot(xt, S), t, x1, cond)


def soft_type_batch(a1, rng, cond=None, scale=1.0):
    return euclidean_batch(flows_cont.soft_one_hot(a1, scale), rng, cond)


# -- samplers ----------------------------------------------------------------

def sample_euclidean(model, n, rng, n_steps, cond=None, guidance_w=0.0, record=None):
    x0 = rng.standard_normal((n, model.out_dim))
    f = guided(model, cond, guidance_w)
    return flows_cont.integrate(x0, f, n_steps, record=record)


def sample_rotations(model, n, rng, n_steps, cond=None, guidance_w=0.0, record=None):
    r0 = geom3d.sample_uniform_rotation(rng, n)
    f = guided(model, cond, guidance_w)
    return flows_so3.so3_integrate(r0, lambda r, t: f(r.reshape(n, 9), t), n_steps,
                                   record=record)


def sample_torus(model, n, rng, n_steps, cond=None, guidance_w=0.0, record=None):
    c0 = flows_cont.sample_torus_prior((n, model.out_dim), rng)
    f = guided(model, cond, guidance_w)
    return flows_cont.integrate(c0, lambda c, t: f(torus_features(c), t), n_steps,
                                record=record, wrap=True)


def categorical_posterior(model, S, cond=None):
    def post(xt, t):
        logits = model(one_hot(xt, S), t, cond) if model.conditional else \
            model(one_hot(xt, S), t)
        return np.exp(flows_discrete.log_softmax(logits))

    return post


def sample_categorical(model, n, S, rng, n_steps, cond=None):
    return flows_discrete.simulate_denoising(categorical_posterior(model, S, cond),
                                             S, n_steps, rng, size=n)


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 5e-4
    clip: float = 1.0
    p_uncond: float = 0.0
    log_every: int = 100
    plateau_factor: float = 0.8
    plateau_patience: int = 10
    min_lr: float = 5e-6
    squared_con: bool = True


def train(models, make_batch, cfg, rng, weights=None, on_log=None):
    """Train ``models`` on batches from ``make_batch(rng)``.

    Every ``log_every`` iterations the window-mean losses are logged and fed
    to the plateau rule.  Returns the list of log rows
    ``(iteration, {group: loss}, total, lr)``.
    """
    weights = weights or LossWeights()
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    optim = Optimizer(models, cfg.lr, cfg.clip)
    rows = []
    acc = {g: 0.0 for g in GROUPS}
    acc_total = 0.0
    count = 0
    for it in range(1, cfg.iterations + 1):
        batch = make_batch(rng)
        res, _ = cfg_train_step(batch, models, weights, cfg.p_uncond, rng, optim,
                                cfg.squared_con)
        if not np.isfinite(res.total):
            raise NumericError(f"non-finite loss at iteration {it}")
        for g in GROUPS:
            acc[g] += res.breakdown[g]
        acc_total += res.total
        count += 1
        if it % cfg.log_every == 0:
            means = {g: acc[g] / count for g in GROUPS}
            row = (it, means, acc_total / count, optim.lr)
            rows.append(row)
            if on_log:
                on_log(row)
            optim.lr = sched.step(acc_total / count)
            acc = {g: 0.0 for g in GROUPS}
            acc_total = 0.0
            count = 0
    return rows
