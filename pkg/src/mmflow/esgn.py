"""Equivariant surface graph network over a peptide and a receptor point cloud.

Nodes are indexed peptide first, then receptor.  Edges are ``(src, dst)``
rows sorted by ``(dst, src)`` so every aggregation runs in a fixed order.
Receptor coordinates stay fixed; only peptide points move.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CoincidentPoints, ConfigError
from .nn import Mlp, init_mlp, mlp_forward

NUM_UPSILON = 3


@dataclass
class SurfaceGraph:
    n_pep: int
    n_rec: int
    cutoff: float
    edges_pep: np.ndarray
    edges_rec: np.ndarray
    edges_inter: np.ndarray

    @property
    def n(self):
        return self.n_pep + self.n_rec

    @property
    def edges_intra(self):
        return _sort_edges(np.concatenate([self.edges_pep, self.edges_rec]))


@dataclass
class EsgnState:
    h: np.ndarray
    x: np.ndarray
    normal: np.ndarray
    n_pep: int
    layer: int = 0


def _sort_edges(e):
    e = np.asarray(e, dtype=np.int64).reshape(-1, 2)
    return e[np.lexsort((e[:, 0], e[:, 1]))]


def _pairs_within(x, cutoff):
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    close = d <= cutoff
    np.fill_diagonal(close, False)
    dst, src = np.nonzero(close)
    return _sort_edges(np.stack([src, dst], axis=1))


def build_graph(pep_pos, rec_pos, cutoff):
    """Connect every ordered pair of distinct points within ``cutoff``."""
    if cutoff <= 0:
        raise ConfigError("cutoff must be positive")
    pep = np.asarray(pep_pos, dtype=float).reshape(-1, 3)
    rec = np.asarray(rec_pos, dtype=float).reshape(-1, 3)
    n_pep = len(pep)
    e = _pairs_within(np.concatenate([pep, rec]), cutoff)
    src_pep = e[:, 0] < n_pep
    dst_pep = e[:, 1] < n_pep
    return SurfaceGraph(
        n_pep=n_pep, n_rec=len(rec), cutoff=float(cutoff),
        edges_pep=e[src_pep & dst_pep],
        edges_rec=e[~src_pep & ~dst_pep],
        edges_inter=e[src_pep != dst_pep],
    )


def brute_force_edges(x, cutoff):
    """Reference pair scan with explicit loops, for checking graph builds."""
    out = []
    for i in range(len(x)):
        for j in range(len(x)):
            if i != j and np.sqrt(np.sum((x[i] - x[j]) ** 2)) <= cutoff:
                out.append((j, i))
    return _sort_edges(np.array(out, dtype=np.int64))


# -- geometric edge features -------------------------------------------------

@dataclass
class BasisConfig:
    cutoff: float = 4.0
    n_rbf: int = 16
    n_legendre: int = 4
    n_bessel: int = 4
    squared: bool = False

    @property
    def sbf_dim(self):
        return self.n_legendre * self.n_bessel

    @property
    def edge_dim(self):
        return self.n_rbf + 2 * self.sbf_dim


@dataclass
class GeometricEdgeFeatures:
    rbf: np.ndarray
    sbf_i: np.ndarray
    sbf_j: np.ndarray

    def stacked(self):
        return np.concatenate([self.rbf, self.sbf_i, self.sbf_j], axis=-1)


def rbf_centres(cfg):
    top = cfg.cutoff**2 if cfg.squared else cfg.cutoff
    return np.linspace(0.0, top, cfg.n_rbf)


def rbf(d, cfg):
    mu = rbf_centres(cfg)
    width = mu[1] - mu[0] if len(mu) > 1 else 1.0
    return np.exp(-0.5 * ((np.asarray(d)[..., None] - mu) / width) ** 2)


def legendre(c, n):
    """``P_0 .. P_{n-1}`` at ``c`` by the three-term recurrence."""
    c = np.asarray(c, dtype=float)
    out = [np.ones_like(c), c]
    for l in range(1, n - 1):
        out.append(((2 * l + 1) * c * out[l] - l * out[l - 1]) / (l + 1))
    return np.stack(out[:n], axis=-1)


def bessel(d, cfg):
    """Zeroth-order spherical Bessel radial basis ``sin(k pi d / r) / d``."""
    k = np.arange(1, cfg.n_bessel + 1)
    d = np.asarray(d)[..., None]
    return np.sqrt(2.0 / cfg.cutoff) * np.sin(k * np.pi * d / cfg.cutoff) / d


def _cos_angle(n, v, dist):
    return np.clip(np.sum(n * v, axis=-1) / dist, -1.0, 1.0)


def edge_features(xi, ni, xj, nj, cfg=None):
    """Invariant features of the edge ``j -> i``; inputs may be batched."""
    cfg = cfg or BasisConfig()
    xij = np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float)
    dist = np.linalg.norm(xij, axis=-1)
    if np.any(dist == 0):
        raise CoincidentPoints("edge endpoints coincide")
    rb = rbf(dist**2 if cfg.squared else dist, cfg)
    radial = bessel(dist, cfg)

    def sbf(n, v):
        p = legendre(_cos_angle(np.asarray(n, dtype=float), v, dist), cfg.n_legendre)
        return (p[..., :, None] * radial[..., None, :]).reshape(*dist.shape, -1)

    return GeometricEdgeFeatures(rb, sbf(ni, xij), sbf(nj, -xij))


# -- parameters --------------------------------------------------------------

@dataclass
class LayerParams:
    f_m: Mlp
    w_m: np.ndarray
    b_m: float
    f_q: np.ndarray
    f_k: np.ndarray
    w_d: np.ndarray
    b_d: np.ndarray
    f_h: Mlp
    f_x_intra: Mlp
    f_x_inter: Mlp


@dataclass
class EsgnParams:
    f_e: np.ndarray
    layers: list
    basis: BasisConfig = field(default_factory=BasisConfig)

    @property
    def h_dim(self):
        return self.f_e.shape[1]


def init_esgn(rng, n_layers=2, h_dim=16, m_dim=16, k_dim=8, basis=None, gate_scale=0.1):
    basis = basis or BasisConfig()
    layers = []
    for _ in range(n_layers):
        layers.append(LayerParams(
            f_m=init_mlp([2 * h_dim + basis.edge_dim, m_dim, m_dim], rng),
            w_m=rng.standard_normal(m_dim) / np.sqrt(m_dim),
            b_m=0.0,
            f_q=rng.standard_normal((h_dim, k_dim)) / np.sqrt(h_dim),
            f_k=rng.standard_normal((h_dim, k_dim)) / np.sqrt(h_dim),
            w_d=rng.standard_normal((basis.n_rbf, h_dim)) / np.sqrt(basis.n_rbf),
            b_d=np.zeros(h_dim),
            f_h=init_mlp([h_dim + m_dim + h_dim, h_dim, h_dim], rng),
            f_x_intra=init_mlp([m_dim, m_dim, 1], rng, last_scale=gate_scale),
            f_x_inter=init_mlp([h_dim, h_dim, 1], rng, last_scale=gate_scale),
        ))
    f_e = rng.standard_normal((NUM_UPSILON, h_dim))
    return EsgnParams(f_e, layers, basis)


# -- message passing ---------------------------------------------------------

def segment_softmax(scores, seg, n):
    """Softmax of ``scores`` within groups sharing the same ``seg`` id."""
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, seg, scores)
    e = np.exp(scores - mx[seg])
    tot = np.zeros(n)
    np.add.at(tot, seg, e)
    return e / tot[seg]


def segment_sum(values, seg, n):
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, seg, values)
    return out


def _edge_geometry(state, edges, basis):
    src, dst = edges[:, 0], edges[:, 1]
    feats = edge_features(state.x[dst], state.normal[dst], state.x[src], state.normal[src], basis)
    return feats, state.x[dst] - state.x[src]


def intra_messages(state, graph, params, layer=None):
    """Reweighted intra-surface messages per edge of ``graph.edges_intra``.

    Returns ``(messages, weights)``; weights sum to one per receiving node.
    """
    lp = layer if layer is not None else params.layers[state.layer]
    edges = graph.edges_intra
    if len(edges) == 0:
        return np.zeros((0, lp.w_m.shape[0])), np.zeros(0)
    feats, _ = _edge_geometry(state, edges, params.basis)
    src, dst = edges[:, 0], edges[:, 1]
    z = np.concatenate([state.h[dst], state.h[src], feats.stacked()], axis=1)
    m = mlp_forward(lp.f_m, z)
    w = segment_softmax(m @ lp.w_m + lp.b_m, dst, graph.n)
    return w[:, None] * m, w


def inter_messages(state, graph, params, layer=None):
    """Distance-gated cross-attention messages per edge of ``graph.edges_inter``.

    Returns ``(messages, attention)``.
    """
    lp = layer if layer is not None else params.layers[state.layer]
    edges = graph.edges_inter
    if len(edges) == 0:
        return np.zeros((0, params.h_dim)), np.zeros(0)
    src, dst = edges[:, 0], edges[:, 1]
    d = np.linalg.norm(state.x[dst] - state.x[src], axis=1)
    q = state.h[dst] @ lp.f_q
    k = state.h[src] @ lp.f_k
    a = segment_softmax(np.sum(q * k, axis=1), dst, graph.n)
    gate = 1.0 / (1.0 + np.exp(-(rbf(d**2 if params.basis.squared else d, params.basis)
                                 @ lp.w_d + lp.b_d)))
    return a[:, None] * state.h[src] * gate, a


def _mean_update(gates, xij, dst, n):
    tot = segment_sum(gates * xij, dst, n)
    cnt = np.bincount(dst, minlength=n)
    upd = np.zeros((n, 3))
    has = cnt > 0
    upd[has] = tot[has] / cnt[has, None]
    return upd


def esgn_layer(state, graph, params, layer=None):
    lp = layer if layer is not None else params.layers[state.layer]
    n = graph.n
    m, _ = intra_messages(state, graph, params, lp)
    mu, _ = inter_messages(state, graph, params, lp)
    ei, ex = graph.edges_intra, graph.edges_inter
    agg_m = segment_sum(m, ei[:, 1], n) if len(ei) else np.zeros((n, lp.w_m.shape[0]))
    agg_mu = segment_sum(mu, ex[:, 1], n) if len(ex) else np.zeros((n, params.h_dim))
    h = state.h + mlp_forward(lp.f_h, np.concatenate([state.h, agg_m, agg_mu], axis=1))

    dx = np.zeros((n, 3))
    if len(ei):
        xij = state.x[ei[:, 1]] - state.x[ei[:, 0]]
        dx += _mean_update(mlp_forward(lp.f_x_intra, m), xij, ei[:, 1], n)
    if len(ex):
        xij = state.x[ex[:, 1]] - state.x[ex[:, 0]]
        dx += _mean_update(mlp_forward(lp.f_x_inter, mu), xij, ex[:, 1], n)
    dx[state.n_pep:] = 0.0
    return EsgnState(h, state.x + dx, state.normal, state.n_pep, state.layer + 1)


def init_state(pep, rec, params):
    """Embed FEPH classes; ``pep``/``rec`` are surface clouds."""
    ups = np.concatenate([np.asarray(pep.upsilon), np.asarray(rec.upsilon)]).astype(np.int64)
    x = np.concatenate([pep.pos, rec.pos]).astype(float)
    nrm = np.concatenate([pep.normal, rec.normal]).astype(float)
    return EsgnState(params.f_e[ups], x, nrm, len(pep.pos))


def run_layers(state, params, n_layers, cutoff, graphs=None):
    """Apply ``n_layers`` layers from ``state``, rebuilding the graph first
    each time; built graphs are appended to ``graphs`` when given."""
    for _ in range(n_layers):
        g = build_graph(state.x[:state.n_pep], state.x[state.n_pep:], cutoff)
        if graphs is not None:
            graphs.append(g)
        state = esgn_layer(state, g, params)
    return state


def esgn_forward(pep, rec, params, n_layers=None, cutoff=None, return_graphs=False):
    """Embed FEPH classes and run ``n_layers`` layers with graph rebuilds."""
    n_layers = len(params.layers) if n_layers is None else n_layers
    if n_layers < 1 or n_layers > len(params.layers):
        raise ConfigError(f"layer count must be in 1..{len(params.layers)}")
    cutoff = params.basis.cutoff if cutoff is None else cutoff
    graphs = []
    state = run_layers(init_state(pep, rec, params), params, n_layers, cutoff, graphs)
    return (state, graphs) if return_graphs else state
