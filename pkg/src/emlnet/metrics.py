"""Reference saliency metrics.

These are the non-differentiable scores used for reporting.  Each metric
states its own normalization: distribution metrics (KLD, SIM, EMD, IG)
sum-normalize their inputs, correlation metrics (CC, NSS) standardize.

Metric names used in reports::

    NSS, CC, AUC-Judd, AUC-Borji, sAUC, KLD, SIM, EMD, IG
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from emlnet.core import (
    AllFixated,
    DegenerateInput,
    EmptyFixations,
    EmptyNegativePool,
    SaliencyError,
    ShapeMismatch,
    as_density,
    as_fixations,
    check_same_shape,
    normalize_sum,
    standardize,
)

METRIC_NAMES = ("NSS", "CC", "AUC-Judd", "AUC-Borji", "sAUC", "KLD", "SIM", "EMD", "IG")

# Column layouts for tabular reports.  "AUC" always means a named variant.
LAYOUTS = {
    "validation": ("NSS", "CC", "AUC-Judd", "sAUC", "KLD", "SIM"),
    "leaderboard": ("NSS", "CC", "AUC-Judd", "sAUC", "KLD", "IG", "SIM"),
    "benchmark": ("AUC-Judd", "SIM", "EMD", "AUC-Borji", "sAUC", "CC", "NSS", "KLD"),
}


@dataclass
class MetricConfig:
    epsilon: float = 1e-7
    auc_thresholds: int = 10
    borji_splits: int = 100
    emd_downsample: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.auc_thresholds < 2:
            raise ValueError("auc_thresholds must be >= 2")
        if self.borji_splits < 1:
            raise ValueError("borji_splits must be >= 1")
        if self.emd_downsample < 2:
            raise ValueError("emd_downsample must be >= 2")


@dataclass
class MetricEntry:
    name: str
    value: float = None
    reason: str = None

    @property
    def present(self):
        return self.value is not None


@dataclass
class MetricReport:
    """Ordered metric table for one prediction (or an aggregate of many)."""

    entries: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, name, value=None, reason=None):
        if name in self.names():
            raise ValueError(f"duplicate metric name {name!r}")
        self.entries.append(MetricEntry(name, None if value is None else float(value), reason))

    def names(self):
        return [e.name for e in self.entries]

    def __getitem__(self, name):
        for e in self.entries:
            if e.name == name:
                return e.value
        raise KeyError(name)

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def as_dict(self):
        return {e.name: e.value for e in self.entries}

    def to_tsv(self):
        """One ``name<TAB>value`` line per metric, 4 decimals, ``NA`` if absent."""
        lines = []
        for e in self.entries:
            lines.append(f"{e.name}\t{'NA' if e.value is None else f'{e.value:.4f}'}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        doc = {"metrics": [asdict(e) for e in self.entries], "metadata": self.metadata}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        report = cls(metadata=doc.get("metadata", {}))
        for e in doc["metrics"]:
            report.add(e["name"], e["value"], e.get("reason"))
        return report

    @classmethod
    def from_values(cls, values, metadata=None):
        report = cls(metadata=dict(metadata or {}))
        for name, value in values.items():
            report.add(name, value)
        return report


def format_row(values, columns, digits=3):
    """Space-separated metric values in ``columns`` order.

    ``values`` is a MetricReport or a name->value mapping; missing values
    render as ``-``.
    """
    if isinstance(values, MetricReport):
        values = values.as_dict()
    cells = []
    for name in columns:
        v = values.get(name)
        cells.append("-" if v is None else f"{v:.{digits}f}")
    return " ".join(cells)


def render_table(rows, layout="validation", digits=3):
    """Render ``[(label, report_or_mapping), ...]`` as a fixed-width text table."""
    columns = LAYOUTS[layout] if isinstance(layout, str) else tuple(layout)
    labels = [str(label) for label, _ in rows]
    label_w = max([len("Model")] + [len(s) for s in labels])
    col_w = [max(len(c), digits + 3) for c in columns]
    header = "Model".ljust(label_w) + "  " + "  ".join(c.rjust(w) for c, w in zip(columns, col_w))
    out = [header, "-" * len(header)]
    for label, values in rows:
        cells = format_row(values, columns, digits).split(" ")
        out.append(label.ljust(label_w) + "  " + "  ".join(c.rjust(w) for c, w in zip(cells, col_w)))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------


def kld(P, Q, eps=1e-7):
    """KL divergence of prediction ``P`` from ground-truth density ``Q``.

    Computed as ``sum Q * log(eps + Q / (P + eps))`` after sum-normalizing
    both maps.
    """
    P = as_density(P)
    Q = as_density(Q)
    check_same_shape(P, Q)
    p = normalize_sum(P)
    q = normalize_sum(Q)
    return float(np.sum(q * np.log(eps + q / (p + eps))))


def cc(P, Q):
    """Pearson correlation between two maps."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    check_same_shape(P, Q)
    return float(np.mean(standardize(P) * standardize(Q)))


def nss(P, F):
    """Mean standardized saliency at fixated pixels."""
    P = np.asarray(P, dtype=np.float64)
    F = as_fixations(F)
    check_same_shape(P, F)
    n_fix = F.sum()
    if n_fix == 0:
        raise EmptyFixations("fixation map is empty")
    return float(np.sum(standardize(P) * F) / n_fix)


def sim(P, Q):
    """Histogram intersection of the two sum-normalized maps."""
    P = as_density(P)
    Q = as_density(Q)
    check_same_shape(P, Q)
    return float(np.sum(np.minimum(normalize_sum(P), normalize_sum(Q))))


def info_gain(P, baseline, F, eps=1e-7):
    """Information gain (bits per fixation) of ``P`` over ``baseline``."""
    P = as_density(P)
    B = as_density(baseline)
    F = as_fixations(F)
    check_same_shape(P, B, F)
    n_fix = F.sum()
    if n_fix == 0:
        raise EmptyFixations("fixation map is empty")
    p = normalize_sum(P)
    b = normalize_sum(B)
    mask = F > 0
    return float(np.sum(np.log2(eps + p[mask]) - np.log2(eps + b[mask])) / n_fix)


def center_prior(shape, sigma_fraction=0.25):
    """Centered isotropic Gaussian, sum-normalized.

    ``sigma = sigma_fraction * min(height, width)``.
    """
    h, w = shape
    sigma = sigma_fraction * min(h, w)
    yy = np.arange(h) - (h - 1) / 2.0
    xx = np.arange(w) - (w - 1) / 2.0
    g = np.exp(-(yy[:, None] ** 2 + xx[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


# ---------------------------------------------------------------------------
# AUC family
# ---------------------------------------------------------------------------


def auc_judd(P, F):
    """ROC area with fixated pixels as positives and all others as negatives.

    Thresholds are the distinct saliency values found at fixated pixels; a
    pixel counts as positive when its value is >= the threshold.  The curve
    is closed with (0, 0) and (1, 1) and integrated with the trapezoid rule.
    """
    P = np.asarray(P, dtype=np.float64)
    F = as_fixations(F)
    check_same_shape(P, F)
    mask = F > 0
    n_pos = int(mask.sum())
    n_neg = mask.size - n_pos
    if n_pos == 0:
        raise EmptyFixations("fixation map is empty")
    if n_neg == 0:
        raise AllFixated("every pixel is fixated; no negatives")

    pos = np.sort(P[mask])
    neg = np.sort(P[~mask])
    thresholds = np.unique(pos)[::-1]
    # counts of values >= t, via the sorted arrays
    tp = (n_pos - np.searchsorted(pos, thresholds, side="left")) / n_pos
    fp = (n_neg - np.searchsorted(neg, thresholds, side="left")) / n_neg
    tpr = np.concatenate(([0.0], tp, [1.0]))
    fpr = np.concatenate(([0.0], fp, [1.0]))
    return float(np.trapezoid(tpr, fpr))


def _thresholded_auc(pos_vals, neg_vals, step):
    """AUC over a fixed threshold grid ``0, step, 2*step, ... <= max``."""
    top = max(pos_vals.max(), neg_vals.max())
    n_levels = int(math.floor(top / step + 1e-9))
    thresholds = (np.arange(n_levels + 1) * step)[::-1]
    pos = np.sort(pos_vals)
    neg = np.sort(neg_vals)
    tp = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    fp = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    tpr = np.concatenate(([0.0], tp, [1.0]))
    fpr = np.concatenate(([0.0], fp, [1.0]))
    return float(np.trapezoid(tpr, fpr))


def _minmax(P):
    lo, hi = P.min(), P.max()
    if hi == lo:
        return np.zeros_like(P)
    return (P - lo) / (hi - lo)


def auc_borji(P, F, cfg=None):
    """AUC against negatives drawn uniformly from the whole image.

    The saliency map is rescaled to [0, 1] and scored on a grid of
    ``cfg.auc_thresholds`` equal steps; the result is averaged over
    ``cfg.borji_splits`` random negative sets of size N.
    """
    cfg = cfg or MetricConfig()
    P = np.asarray(P, dtype=np.float64)
    F = as_fixations(F)
    check_same_shape(P, F)
    mask = F.ravel() > 0
    n_fix = int(mask.sum())
    if n_fix == 0:
        raise EmptyFixations("fixation map is empty")
    S = _minmax(P).ravel()
    pos = S[mask]
    rng = np.random.default_rng(cfg.rng_seed)
    step = 1.0 / cfg.auc_thresholds
    scores = []
    for _ in range(cfg.borji_splits):
        idx = rng.integers(0, S.size, size=n_fix)
        scores.append(_thresholded_auc(pos, S[idx], step))
    return float(np.mean(scores))


def sauc(P, F, other_F, cfg=None):
    """Shuffled AUC: negatives are fixation locations from other images.

    Each split samples ``min(N, pool size)`` distinct locations from the
    union of ``other_F``.
    """
    cfg = cfg or MetricConfig()
    P = np.asarray(P, dtype=np.float64)
    F = as_fixations(F)
    check_same_shape(P, F)
    mask = F.ravel() > 0
    n_fix = int(mask.sum())
    if n_fix == 0:
        raise EmptyFixations("fixation map is empty")
    pool = np.zeros(P.shape, dtype=bool)
    for other in other_F:
        other = as_fixations(other)
        check_same_shape(P, other)
        pool |= other > 0
    pool_idx = np.flatnonzero(pool.ravel())
    if pool_idx.size == 0:
        raise EmptyNegativePool("no fixations in the other maps")
    S = _minmax(P).ravel()
    pos = S[mask]
    rng = np.random.default_rng(cfg.rng_seed)
    step = 1.0 / cfg.auc_thresholds
    k = min(n_fix, pool_idx.size)
    scores = []
    for _ in range(cfg.borji_splits):
        idx = rng.permutation(pool_idx)[:k]
        scores.append(_thresholded_auc(pos, S[idx], step))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# EMD
# ---------------------------------------------------------------------------


def _import_pot():
    # keep POT from probing heavyweight array backends on import
    for name in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
    import ot

    return ot


def block_sum(values, max_side):
    """Sum ``factor x factor`` blocks so that neither side exceeds ``max_side``.

    ``factor = ceil(max(h, w) / max_side)``; ragged edge blocks are summed over
    the pixels they contain, so total mass is preserved.
    """
    arr = np.asarray(values, dtype=np.float64)
    h, w = arr.shape
    factor = int(math.ceil(max(h, w) / max_side))
    if factor <= 1:
        return arr
    H = -(-h // factor) * factor
    W = -(-w // factor) * factor
    padded = np.zeros((H, W))
    padded[:h, :w] = arr
    return padded.reshape(H // factor, factor, W // factor, factor).sum(axis=(1, 3))


def emd(P, Q, cfg=None):
    """Earth mover's distance between two maps, in (downsampled) pixel units.

    Both maps are block-summed to at most ``cfg.emd_downsample`` per side,
    sum-normalized, and compared with an exact network-simplex solve of the
    transportation problem under Euclidean ground distance.
    """
    cfg = cfg or MetricConfig()
    P = as_density(P)
    Q = as_density(Q)
    check_same_shape(P, Q)
    p = normalize_sum(block_sum(P, cfg.emd_downsample)).ravel()
    q = normalize_sum(block_sum(Q, cfg.emd_downsample)).ravel()
    shape = block_sum(P, cfg.emd_downsample).shape
    if np.array_equal(p, q):
        return 0.0
    src = np.flatnonzero(p > 0)
    dst = np.flatnonzero(q > 0)
    coords = np.indices(shape).reshape(2, -1).T.astype(np.float64)
    diff = coords[src][:, None, :] - coords[dst][None, :, :]
    cost = np.sqrt(np.sum(diff**2, axis=-1))
    ot = _import_pot()
    a = p[src]
    b = q[dst]
    b = b * (a.sum() / b.sum())
    value = ot.emd2(a, b, cost, numItermax=10_000_000)
    return max(float(value), 0.0)


# ---------------------------------------------------------------------------
# everything at once
# ---------------------------------------------------------------------------


def evaluate_all(P, Q, F, other_F=(), baseline=None, cfg=None, metadata=None):
    """Score one prediction with every metric.

    A metric whose preconditions fail is recorded as absent with the reason;
    only a shape mismatch between the inputs aborts the whole report.
    """
    cfg = cfg or MetricConfig()
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    check_same_shape(P, Q, F)
    for other in other_F:
        check_same_shape(P, other)
    if baseline is None:
        baseline = center_prior(P.shape)
    check_same_shape(P, baseline)

    jobs = {
        "NSS": lambda: nss(P, F),
        "CC": lambda: cc(P, Q),
        "AUC-Judd": lambda: auc_judd(P, F),
        "AUC-Borji": lambda: auc_borji(P, F, cfg),
        "sAUC": lambda: sauc(P, F, other_F, cfg),
        "KLD": lambda: kld(P, Q, cfg.epsilon),
        "SIM": lambda: sim(P, Q),
        "EMD": lambda: emd(P, Q, cfg),
        "IG": lambda: info_gain(P, baseline, F, cfg.epsilon),
    }
    meta = {"config": asdict(cfg)}
    meta.update(metadata or {})
    report = MetricReport(metadata=meta)
    for name in METRIC_NAMES:
        try:
            report.add(name, jobs[name]())
        except ShapeMismatch:
            raise
        except SaliencyError as err:
            report.add(name, None, f"{type(err).__name__}: {err}")
    return report


def mean_report(reports, metadata=None):
    """Unweighted per-metric mean over reports, skipping absent values."""
    names = []
    for r in reports:
        for n in r.names():
            if n not in names:
                names.append(n)
    out = MetricReport(metadata=dict(metadata or {}))
    for name in names:
        vals = [r[name] for r in reports if name in r.names() and r[name] is not None]
        if vals:
            out.add(name, float(np.mean(vals)))
        else:
            out.add(name, None, "no image produced a value")
    out.metadata["count"] = len(reports)
    return out
