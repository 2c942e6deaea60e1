"""Shared oracles for the test suite."""

import numpy as np
from hypothesis import strategies as st

from mmflow import geom3d


def seeds():
    return st.integers(min_value=0, max_value=2**32 - 1)


def assert_rotation(r, tol=1e-9):
    r = np.asarray(r).reshape(-1, 3, 3)
    eye = np.eye(3)
    err = np.linalg.norm(np.swapaxes(r, -1, -2) @ r - eye, axis=(-2, -1))
    assert np.all(err <= tol), err.max()
    assert np.all(np.abs(np.linalg.det(r) - 1.0) <= tol)


def rel_err(a, b):
    """Norm-wise relative error, guarded for tiny references."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def numeric_grad(f, arrays, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays``
    (modified in place and restored)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            gf[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


# -- gradient suite ------------------------------------------------------------

def term_batches(rng, n=6, S=5, L=3, cond=True):
    """A small random batch for every loss term plus matching models."""
    from mmflow import flows_cont
    from mmflow import train as T

    c = rng.integers(0, T.NUM_CONDITIONS, size=n) if cond else None
    rots = geom3d.sample_uniform_rotation(rng, n)
    batches = {
        "pos": T.euclidean_batch(rng.standard_normal((n, 3)), rng, c),
        "ori": T.so3_batch(rots, rng, c),
        "cat": T.categorical_batch(rng.integers(0, S - 1, size=n), S, rng, c),
        "con": T.euclidean_batch(rng.uniform(-1, 1, (n, 2)), rng, c),
        "str_pos": T.euclidean_batch(rng.standard_normal((n, 3 * L)), rng, c),
        "str_ori": T.so3_batch(geom3d.sample_uniform_rotation(rng, n), rng, c),
        "str_tor": T.torus_batch(rng.uniform(0, 2 * np.pi, (n, 4)), rng, c),
        "str_type": T.euclidean_batch(
            flows_cont.soft_one_hot(rng.integers(0, 20, (n, L))).reshape(n, -1), rng, c),
    }
    dims = {"pos": (3, 3), "ori": (9, 3), "cat": (S, S - 1), "con": (2, 2),
            "str_pos": (3 * L, 3 * L), "str_ori": (9, 3), "str_tor": (8, 4),
            "str_type": (20 * L, 20 * L)}
    models = {}
    for term, (i, o) in dims.items():
        m = T.init_field_model(i, o, rng, hidden=8, layers=2, conditional=cond, cond_dim=4)
        for b in m.mlp.biases:
            b[:] = 0.1 * rng.standard_normal(b.shape)
        if cond:
            m.cond_delta[1:] = 0.3 * rng.standard_normal(m.cond_delta[1:].shape)
        models[term] = m
    return batches, models


def gradient_errors(seed, squared_con=True, eps=1e-5):
    """Worst norm-wise relative error per term between analytic and central
    finite-difference gradients of the weighted total loss."""
    from mmflow import train as T

    rng = np.random.default_rng(seed)
    batches, models = term_batches(rng)
    weights = T.LossWeights(*rng.uniform(0.5, 2.0, 5))
    worst = {}
    for term, tb in batches.items():
        one = {term: tb}
        res = T.total_loss(one, weights, models, squared_con=squared_con)

        def f():
            return T.total_loss(one, weights, models, squared_con=squared_con,
                                with_grads=False).total

        params = models[term].params()
        num = numeric_grad(f, params, eps)
        worst[term] = max(rel_err(a, b) for a, b in zip(res.grads[term], num))
    return worst


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE = {}


def criterion(number, title):
    """Record PASS/FAIL of an acceptance test for the terminal summary."""
    import functools

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            ACCEPTANCE[number] = (title, "FAIL", "")
            try:
                note = fn(*args, **kwargs)
            except BaseException as e:
                ACCEPTANCE[number] = (title, "FAIL", f"{type(e).__name__}: {e}".splitlines()[0])
                print(f"criterion {number}: FAIL {title}")
                raise
            ACCEPTANCE[number] = (title, "PASS", note or "")
            print(f"criterion {number}: PASS {title} {note or ''}")
        return run
    return wrap
