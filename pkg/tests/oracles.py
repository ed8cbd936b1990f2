"""Independent oracles used by the test suite.

Everything here is deliberately written without reusing the package's
gradient/solver code paths: finite differences, pure-python scalar math,
explicit enumeration. Slow and simple on purpose.
"""

import math

import numpy as np

from advcorr.network import (
    DenseLayer,
    Network,
    ParamVector,
    from_vector,
    param_offsets,
    to_vector,
)


def random_net(rng, dims, scale=1.0):
    layers = []
    for d_in, d_out in zip(dims, dims[1:]):
        w = rng.normal(0.0, scale / np.sqrt(d_in), size=(d_out, d_in))
        b = rng.normal(0.0, 0.1, size=d_out)
        layers.append(DenseLayer(w, b))
    return Network(layers)


def kink_safe_point(net, rng, margin=1e-3, tries=200):
    """A random input whose pre-activations are all well away from 0."""
    from advcorr.network import _forward_cached

    for _ in range(tries):
        x = rng.uniform(0.05, 0.95, size=net.input_dim)
        _, pres = _forward_cached(net, x[None, :])
        if min(np.abs(z).min() for z in pres) > margin:
            return x
    raise RuntimeError("could not find a kink-safe point")


def fd_params(fn, net, h=1e-5):
    """Central finite differences of scalar fn(net) w.r.t. every parameter."""
    base = to_vector(net)
    grad = np.empty(len(base))
    for j in range(len(base)):
        plus = base.copy()
        plus.values[j] += h
        minus = base.copy()
        minus.values[j] -= h
        grad[j] = (fn(from_vector(net, plus)) - fn(from_vector(net, minus))) / (2 * h)
    return grad


def fd_input(fn, x, h=1e-5):
    """Central finite differences of scalar fn(x) w.r.t. the input vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty(len(x))
    for j in range(len(x)):
        plus = x.copy()
        plus[j] += h
        minus = x.copy()
        minus[j] -= h
        grad[j] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def grads_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Coordinate-wise |a-b| <= atol + rtol*max(|a|,|b|); atol absorbs FD noise."""
    a = np.asarray(analytic)
    b = np.asarray(numeric)
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.maximum(np.abs(a), np.abs(b))))


def scalar_cross_entropy(logits, y):
    """Pure-python softmax cross-entropy for one point."""
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    return lse - logits[y]


def manual_mlp_backprop(net, x, i):
    """Loop-based parameter gradient of logit i for a 1-hidden-layer net."""
    assert len(net.layers) == 2
    W1, b1 = net.layers[0].weights, net.layers[0].biases
    W2, b2 = net.layers[1].weights, net.layers[1].biases
    z1 = W1 @ x + b1
    a1 = np.maximum(z1, 0.0)
    gW2 = np.zeros_like(W2)
    gW2[i, :] = a1
    gb2 = np.zeros_like(b2)
    gb2[i] = 1.0
    d1 = W2[i, :] * (z1 > 0)
    gW1 = np.outer(d1, x)
    gb1 = d1
    flat = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return ParamVector(flat, param_offsets(net.layer_dims))


def pareto_front_bruteforce(points):
    """O(n^2) dominance filter; a dominates b iff a<=b and a<b somewhere."""
    keep = []
    for j, (lj, vj) in enumerate(points):
        dominated = False
        for k, (lk, vk) in enumerate(points):
            if k == j:
                continue
            if lk <= lj and vk <= vj and (lk < lj or vk < vj):
                dominated = True
                break
        if not dominated:
            keep.append(j)
    return keep


def l1_vertex_max(d, radius):
    """Max of v·d over the 2m vertices of the l1 ball of given radius."""
    best = -math.inf
    for m in range(len(d)):
        for sign in (1.0, -1.0):
            best = max(best, sign * radius * d[m])
    return best


def pv(values):
    """ParamVector with a dummy single-layer layout, for raw QP tests."""
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, ((0, len(values)),))


def pool_from_arrays(G, r, delta=1e-5):
    from advcorr.cuts import Cut, CutMeta, CutPool

    pool = CutPool(delta)
    for i, (g, ri) in enumerate(zip(np.atleast_2d(G), np.atleast_1d(r))):
        pool.append(
            Cut(np.array(g, dtype=np.float64), float(ri), "adversary",
                CutMeta(iterate=0, adv_index=i, competing_label=0))
        )
    return pool


def random_feasible_qp(rng, J, n_cuts, offset_scale=1.5):
    """Random projection instance with a strictly feasible witness point."""
    G = rng.normal(size=(n_cuts, J))
    witness = rng.normal(size=J)
    r = G @ witness + rng.uniform(0.05, 1.0, n_cuts)
    anchor = witness + rng.normal(scale=offset_scale, size=J)
    return pv(anchor), pool_from_arrays(G, r), witness
