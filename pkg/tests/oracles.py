"""Independent reference implementations used by the metric tests.

Everything here is plain Python over lists of floats (``math.fsum`` for the
sums) so it shares no code path with the vectorized library.
"""

import math

import numpy as np
from scipy.optimize import linprog


def random_instance(rng, h=None, w=None, n_fix=None):
    h = h or int(rng.integers(2, 9))
    w = w or int(rng.integers(2, 9))
    P = rng.random((h, w))
    Q = rng.random((h, w)) ** 3
    F = np.zeros((h, w))
    k = n_fix or int(rng.integers(1, h * w))
    F.flat[rng.choice(h * w, size=k, replace=False)] = 1
    return P, Q, F


# ---------------------------------------------------------------------------
# brute-force oracles: plain Python loops over pixels
# ---------------------------------------------------------------------------


def flat(x):
    return [float(v) for v in np.asarray(x).ravel()]


def _normalized(x):
    vals = flat(x)
    s = math.fsum(vals)
    return [v / s for v in vals]


def _mean_std(vals):
    m = math.fsum(vals) / len(vals)
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals))


def kld_oracle(P, Q, eps):
    p, q = _normalized(P), _normalized(Q)
    return math.fsum(qi * math.log(eps + qi / (pi + eps)) for pi, qi in zip(p, q))


def cc_oracle(P, Q):
    p, q = flat(P), flat(Q)
    mp, sp = _mean_std(p)
    mq, sq = _mean_std(q)
    return math.fsum((a - mp) * (b - mq) for a, b in zip(p, q)) / len(p) / (sp * sq)


def nss_oracle(P, F):
    p, f = flat(P), flat(F)
    m, s = _mean_std(p)
    hits = [(a - m) / s for a, b in zip(p, f) if b == 1]
    return math.fsum(hits) / len(hits)


def sim_oracle(P, Q):
    return math.fsum(min(a, b) for a, b in zip(_normalized(P), _normalized(Q)))


def ig_oracle(P, B, F, eps):
    p, b, f = _normalized(P), _normalized(B), flat(F)
    terms = [math.log2(eps + pi) - math.log2(eps + bi) for pi, bi, fi in zip(p, b, f) if fi == 1]
    return math.fsum(terms) / len(terms)


def roc_area(points):
    """Trapezoid area of a list of (fpr, tpr) points, in order."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def auc_judd_oracle(P, F):
    p, f = flat(P), flat(F)
    pos = [a for a, b in zip(p, f) if b == 1]
    neg = [a for a, b in zip(p, f) if b == 0]
    points = [(0.0, 0.0)]
    for t in sorted(set(pos), reverse=True):
        tp = sum(1 for v in pos if v >= t) / len(pos)
        fp = sum(1 for v in neg if v >= t) / len(neg)
        points.append((fp, tp))
    points.append((1.0, 1.0))
    return roc_area(points)


def grid_auc_oracle(pos, neg, step):
    top = max(max(pos), max(neg))
    levels = []
    k = 0
    while k * step <= top + 1e-9 * step:
        levels.append(k * step)
        k += 1
    points = [(0.0, 0.0)]
    for t in reversed(levels):
        tp = sum(1 for v in pos if v >= t) / len(pos)
        fp = sum(1 for v in neg if v >= t) / len(neg)
        points.append((fp, tp))
    points.append((1.0, 1.0))
    return roc_area(points)


def emd_lp_oracle(P, Q):
    """Transportation LP over every source/target pixel pair."""
    h, w = P.shape
    p, q = _normalized(P), _normalized(Q)
    n = h * w
    coords = [(i // w, i % w) for i in range(n)]
    cost = [math.dist(coords[i], coords[j]) for i in range(n) for j in range(n)]
    A_eq, b_eq = [], []
    for i in range(n):
        A_eq.append([1.0 if k // n == i else 0.0 for k in range(n * n)])
        b_eq.append(p[i])
    for j in range(n):
        A_eq.append([1.0 if k % n == j else 0.0 for k in range(n * n)])
        b_eq.append(q[j])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun
