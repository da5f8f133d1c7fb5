"""Independent reference implementations shared by the unit tests and the
acceptance suite. These are slow and direct on purpose: dense linear solves,
plain Python loops, brute-force ranks."""
import math

import numpy as np
import scipy.sparse as sp

from cfbench.dataset import FeedbackKind, RatingDataset, SideInfo, binarize_and_confidence
from cfbench.mf import TrainConfig, Variant, train_mf_bias, train_mf_exp, train_mf_imp, train_mf_side


def random_graph(seed, max_nodes=50):
    """Symmetric non-negative weights, some isolated nodes."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_nodes + 1))
    dense = rng.random((n, n)) * (rng.random((n, n)) < rng.uniform(0.05, 0.5))
    dense = np.triu(dense, 1)
    dense = dense + dense.T
    isolated = rng.random(n) < 0.1
    dense[isolated, :] = 0
    dense[:, isolated] = 0
    return sp.csr_matrix(dense), rng


def dense_operator(adj, target):
    """A~^T plus the dangling redirection to ``target``, as a dense matrix."""
    m = np.asarray(adj.matrix.todense()).T.copy()
    m += np.outer(target, adj.dangling.astype(float))
    return m


def oracle_rwr(adj, q, c):
    n = adj.n_nodes
    return np.linalg.solve(np.eye(n) - (1 - c) * dense_operator(adj, q), c * q)


def random_ratings(seed, n_users=5, n_items=5, density=0.6, implicit=False):
    rng = np.random.default_rng(seed)
    triples = []
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                v = float(rng.integers(1, 200)) if implicit else float(rng.integers(1, 6))
                triples.append((f"u{u}", f"i{i}", v))
    kind = FeedbackKind.IMPLICIT if implicit else FeedbackKind.EXPLICIT
    return RatingDataset.from_triples(triples, kind, None if implicit else (1, 5, 1),
                                      users=[f"u{u}" for u in range(n_users)],
                                      items=[f"i{i}" for i in range(n_items)])


def random_side(seed, users, items):
    rng = np.random.default_rng(seed)
    ua = tuple((u, f"g:{rng.integers(2)}", 1.0) for u in users)
    ia = tuple((f"cat:{rng.integers(2)}", i, 1.0) for i in items)
    links = ((users[0], users[1]), (users[2], users[0]))
    return SideInfo(ua, ia, links)


def trained(variant, seed=0, epochs=1, **kw):
    """A model with non-trivial parameters for the given variant."""
    ds = random_ratings(seed, implicit=variant in (Variant.IMP,))
    cfg = TrainConfig(d=2, epochs=epochs, seed=seed, init_scale=0.5, **kw)
    if variant is Variant.EXP:
        return train_mf_exp(ds, cfg), ds, None
    if variant is Variant.IMP:
        data = binarize_and_confidence(ds, 0.01)
        return train_mf_imp(data, cfg), data, None
    if variant is Variant.BIAS:
        return train_mf_bias(ds, cfg), ds, None
    side = random_side(seed, ds.users, ds.items)
    return train_mf_side(ds, side, cfg), ds, side


def loop_objective(model, data, side, lam):
    """Second implementation of the loss: plain loops over observations."""
    implicit = hasattr(data, "confidence")
    base = data.base if implicit else data
    total = 0.0
    for k, (u, i, r) in enumerate(base.triples()):
        ui, ii = base.user_pos[u], base.item_pos[i]
        x, y = model.x[ui], model.y[ii]
        pred = sum(a * b for a, b in zip(x, y))
        reg = sum(a * a for a in x) + sum(b * b for b in y)
        if model.variant is Variant.BIAS:
            pred += model.mu + model.b_user[ui] + model.b_item[ii]
            reg += model.b_user[ui] ** 2 + model.b_item[ii] ** 2
        if implicit and model.variant is not Variant.BIAS:
            target, weight = 1.0, data.confidence[k]
        else:
            target, weight = (1.0 if implicit else r), 1.0
        total += weight * (target - pred) ** 2 + lam * reg
    if model.variant is Variant.SIDE:
        spos = {s: k for k, s in enumerate(model.user_attrs)}
        for u, s, a in side.user_observations():
            x, w = model.x[base.user_pos[u]], model.w[spos[s]]
            total += (a - sum(p * q for p, q in zip(x, w))) ** 2 + lam * (sum(p * p for p in x) + sum(q * q for q in w))
        tpos = {t: k for k, t in enumerate(model.item_attrs)}
        for t, i, b in side.item_attributes:
            z, y = model.z[tpos[t]], model.y[base.item_pos[i]]
            total += (b - sum(p * q for p, q in zip(z, y))) ** 2 + lam * (sum(p * p for p in z) + sum(q * q for q in y))
    return 0.5 * total


def brute_ranks(v):
    return [1 + sum(w > x for w in v) + (sum(w == x for w in v) - 1) / 2 for x in v]


def brute_rho(actual, predicted):
    s, t = brute_ranks(list(predicted)), brute_ranks(list(actual))
    n = len(s)
    ms, mt = sum(s) / n, sum(t) / n
    cov = sum((a - ms) * (b - mt) for a, b in zip(s, t))
    vs = sum((a - ms) ** 2 for a in s)
    vt = sum((b - mt) ** 2 for b in t)
    if vs == 0 or vt == 0:
        return math.nan
    return cov / math.sqrt(vs * vt)
