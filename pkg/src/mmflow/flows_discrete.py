"""Discrete flow matching with continuous-time Markov chains.

A :class:`ConditionalPath` describes ``p_t(x | x1)`` on ``S`` states.  For the
``mask`` kind the last state ``S - 1`` is the mask and the data states are
``0 .. S-2``; the ``uniform`` kind has no mask and ``S`` data states.

Rates follow the ReLU construction

    R(x, j | x1) = ReLU(dp_j - dp_x) / (Z * p_x)

with ``dp = d/dt p_t(. | x1)``.  ``Z`` is the number of states in the support
of the path (``convention="support"``) or the full state count
(``convention="literal"``).  Only the support convention satisfies the
Kolmogorov forward equation for the mask path when ``S > 2``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MaskAsData, ZeroSupport

CONVENTIONS = ("support", "literal")


@dataclass(frozen=True)
class ConditionalPath:
    kind: str
    S: int

    def __post_init__(self):
        if self.kind not in ("mask", "uniform"):
            raise ValueError(f"unknown path kind {self.kind!r}")
        if self.S < 2:
            raise ValueError("need at least two states")

    @property
    def mask(self):
        return self.S - 1 if self.kind == "mask" else None

    @property
    def num_data(self):
        return self.S - 1 if self.kind == "mask" else self.S


@dataclass
class ClampCounter:
    """Counts Euler steps whose jump probabilities had to be clamped."""

    count: int = 0


def _check_x1(path, x1):
    if path.kind == "mask" and np.any(np.asarray(x1) == path.mask):
        raise MaskAsData("mask state given as clean data")


def path_probs(path, x1, t):
    """Full distribution ``p_t(. | x1)``; shape ``x1.shape + (S,)``."""
    _check_x1(path, x1)
    x1 = np.asarray(x1)
    onehot = np.zeros(x1.shape + (path.S,))
    np.put_along_axis(onehot, x1[..., None], 1.0, axis=-1)
    if path.kind == "mask":
        base = np.zeros(path.S)
        base[path.mask] = 1.0
    else:
        base = np.full(path.S, 1.0 / path.S)
    return t * onehot + (1.0 - t) * base


def path_prob_derivative(path, x1):
    """``d/dt p_t(. | x1)``, constant in t for both path kinds."""
    return path_probs(path, x1, 1.0) - path_probs(path, x1, 0.0)


def path_prob(path, xt, x1, t):
    return float(path_probs(path, x1, t)[..., xt])


def conditional_rate_matrix(path, x1, t, convention="support"):
    """Rate matrix ``R_t(x, j | x1)`` for all current states ``x``.

    Rows of states outside the support are zero.  Returns ``(R, support)``
    where ``support`` flags states with positive probability or positive
    inflow at time t (so the data state counts at t = 0 already).
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown rate convention {convention!r}")
    p = path_probs(path, x1, t)
    dp = path_prob_derivative(path, x1)
    support = (p > 0) | (dp > 0)
    z = support.sum() if convention == "support" else path.S
    occupied = p > 0
    safe_p = np.where(occupied, p, 1.0)
    r = np.maximum(dp[None, :] - dp[:, None], 0.0) / (z * safe_p[:, None])
    r = r * support[None, :] * occupied[:, None]
    np.fill_diagonal(r, 0.0)
    r[np.diag_indices(path.S)] = -r.sum(axis=1)
    return r, occupied


def rate_row(path, xt, x1, t, convention="support"):
    """Outgoing rates from ``xt``; the diagonal closes the row to zero."""
    r, occupied = conditional_rate_matrix(path, x1, t, convention)
    if not occupied[xt]:
        raise ZeroSupport(f"state {xt} has zero probability at t={t}")
    return r[xt].copy()


def ctmc_jump_probs(xt, row, dt, counter=None):
    """Transition distribution ``delta(xt, .) + row * dt``.

    Out-of-range entries are clamped and the result renormalized; the
    optional counter records how often that happened.
    """
    probs = np.array(row, dtype=float) * dt
    idx = np.asarray(xt)[..., None]
    np.put_along_axis(probs, idx, np.take_along_axis(probs, idx, -1) + 1.0, -1)
    bad = np.any((probs < 0.0) | (probs > 1.0), axis=-1)
    if np.any(bad):
        if counter is not None:
            counter.count += int(np.sum(bad))
        probs = np.clip(probs, 0.0, None)
        probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def _draw(probs, rng):
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = np.sum(u[:, None] >= cdf, axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def ctmc_euler_step(xt, row, dt, rng, counter=None):
    """One Euler jump of a CTMC.  Accepts a single state or a batch."""
    xt_arr = np.asarray(xt)
    probs = ctmc_jump_probs(xt_arr, row, dt, counter)
    out = _draw(probs, rng)
    if xt_arr.ndim == 0:
        return int(out[0])
    return out


def expected_rate_rows(path, xt, posterior, t, convention="support"):
    """Posterior-weighted rate rows ``sum_x1 q(x1) R_t(xt, . | x1)``.

    ``posterior`` has shape ``(B, num_data)``.  Conditional rates whose x1
    gives ``xt`` zero probability contribute nothing.
    """
    xt = np.asarray(xt)
    mats = np.stack([conditional_rate_matrix(path, k, t, convention)[0]
                     for k in range(path.num_data)])
    rows = np.empty((xt.shape[0], path.S))
    for s in np.unique(xt):
        sel = xt == s
        rows[sel] = posterior[sel] @ mats[:, s, :]
    return rows


def simulate_denoising(model_posterior, S, N, rng, size=None,
                       convention="support", counter=None):
    """Generate from the mask state with N Euler steps of the expected rate.

    ``model_posterior(xt, t)`` maps a batch of states to ``(B, S-1)`` rows of
    probabilities over the data states.  A state still masked after the final
    step is set to the posterior argmax.
    """
    path = ConditionalPath("mask", S)
    n = 1 if size is None else int(size)
    x = np.full(n, path.mask, dtype=np.int64)
    h = 1.0 / N
    for k in range(N):
        t = k * h
        post = np.asarray(model_posterior(x, t), dtype=float)
        rows = expected_rate_rows(path, x, post, t, convention)
        x = ctmc_euler_step(x, rows, h, rng, counter)
        if k == N - 1:
            left = x == path.mask
            if np.any(left):
                x[left] = np.argmax(post[left], axis=-1)
    return int(x[0]) if size is None else x


def simulate_conditional_marginals(path, x1, n_traj, N, record_ts, rng,
                                   convention="support"):
    """Empirical marginals of trajectories driven by ``R_t(. , . | x1)``.

    Trajectories start from ``p_0(. | x1)``.  Returns a dict mapping each
    requested time (rounded to the step grid) to the empirical distribution.
    """
    p0 = path_probs(path, x1, 0.0)
    x = _draw(np.broadcast_to(p0, (n_traj, path.S)), rng)
    want = {int(round(t * N)): t for t in record_ts}
    out = {}
    h = 1.0 / N
    for k in range(N):
        if k in want:
            out[want[k]] = np.bincount(x, minlength=path.S) / n_traj
        r, _ = conditional_rate_matrix(path, x1, k * h, convention)
        x = ctmc_euler_step(x, r[x], h, rng)
    if N in want:
        out[want[N]] = np.bincount(x, minlength=path.S) / n_traj
    return out


def kolmogorov_residual(path, x1, t, convention="support"):
    """``d/dt p_t - R_t^T p_t``; zero when the rates generate the path."""
    p = path_probs(path, x1, t)
    r, _ = conditional_rate_matrix(path, x1, t, convention)
    return path_prob_derivative(path, x1) - r.T @ p


def sample_conditional(path, x1, t, rng):
    """Draw ``xt ~ p_t(. | x1)`` for a batch of data states and times."""
    _check_x1(path, x1)
    x1 = np.asarray(x1)
    t = np.broadcast_to(np.asarray(t, dtype=float), x1.shape)
    keep = rng.random(x1.shape) < t
    if path.kind == "mask":
        noise = np.full(x1.shape, path.mask)
    else:
        noise = rng.integers(0, path.S, size=x1.shape)
    return np.where(keep, x1, noise)


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def dfm_loss(posterior_logits, x1):
    """Cross-entropy ``-log softmax(logits)[x1]``, averaged over a batch.

    The clean-data likelihood is maximized, so the loss carries the minus
    sign.
    """
    logits = np.asarray(posterior_logits, dtype=float)
    x1 = np.asarray(x1)
    if np.any(x1 >= logits.shape[-1]) or np.any(x1 < 0):
        raise MaskAsData("target must be a data state")
    lp = log_softmax(logits)
    return float(-np.mean(np.take_along_axis(np.atleast_2d(lp),
                                             np.atleast_1d(x1)[:, None], -1)))


def dfm_loss_grad(posterior_logits, x1):
    logits = np.atleast_2d(np.asarray(posterior_logits, dtype=float))
    x1 = np.atleast_1d(np.asarray(x1))
    p = np.exp(log_softmax(logits))
    np.put_along_axis(p, x1[:, None], np.take_along_axis(p, x1[:, None], -1) - 1.0, -1)
    g = p / logits.shape[0]
    return g.reshape(np.shape(posterior_logits))
