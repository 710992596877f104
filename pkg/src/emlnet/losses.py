"""Differentiable training losses.

Each loss returns a :class:`LossValueGrad` holding the scalar value and the
gradient with respect to the raw prediction ``P``.

* ``cc_prime``   1 - CC(P, Q), in [0, 2]
* ``nss_prime``  mean over fixations of (standardized F - standardized P)
* ``kld_loss``   KLD after sum-normalizing P
* ``combined_loss`` their plain sum

The correlation losses accept ``sigma_floor``: when given, a constant (or
nearly constant) prediction is standardized with ``max(std, sigma_floor)``
instead of raising.  The trainer passes ``SIGMA_FLOOR``.  Ground-truth maps
are always checked strictly.
"""

from dataclasses import dataclass, field

import numpy as np

from emlnet.core import (
    DegenerateInput,
    EmptyFixations,
    SaliencyError,
    ZeroMass,
    as_fixations,
    check_same_shape,
    grid_stats,
    standardize,
)

SIGMA_FLOOR = 1e-8


@dataclass
class LossValueGrad:
    value: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)


def _prediction_stats(P, sigma_floor):
    stats = grid_stats(P)
    if stats.std == 0 and sigma_floor is None:
        raise DegenerateInput("prediction has zero variance")
    floored = sigma_floor is not None and stats.std < sigma_floor
    sigma = sigma_floor if floored else stats.std
    return stats.mean, sigma, floored


def cc_prime(P, Q, sigma_floor=None):
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    check_same_shape(P, Q)
    q_bar = standardize(Q)
    mu, sigma, floored = _prediction_stats(P, sigma_floor)
    n = P.size
    p_bar = (P - mu) / sigma
    corr = np.mean(p_bar * q_bar)
    if floored:
        # sigma is a constant here, only the mean shift is differentiated
        dcorr = (q_bar - q_bar.mean()) / (n * sigma)
    else:
        dcorr = (q_bar - corr * p_bar) / (n * sigma)
    return LossValueGrad(float(1.0 - corr), -dcorr)


def nss_prime(P, F, sigma_floor=None):
    P = np.asarray(P, dtype=np.float64)
    F = as_fixations(F)
    check_same_shape(P, F)
    n_fix = F.sum()
    if n_fix == 0:
        raise EmptyFixations("fixation map is empty")
    try:
        r_bar = standardize(F)
    except DegenerateInput:
        raise DegenerateInput("fixation map is constant (every pixel fixated)") from None
    mu, sigma, floored = _prediction_stats(P, sigma_floor)
    n = P.size
    p_bar = (P - mu) / sigma
    value = np.sum((r_bar - p_bar) * F) / n_fix
    centred = F - n_fix / n
    if floored:
        dsum = centred / sigma
    else:
        dsum = centred / sigma - np.sum(F * p_bar) * p_bar / (n * sigma)
    return LossValueGrad(float(value), -dsum / n_fix)


def kld_loss(P, Q, eps=1e-7):
    """KLD of the sum-normalized raw prediction from ``Q``.

    The gradient is taken through the normalization, so it is invariant to
    the overall scale of ``P`` up to a 1/sum(P) factor.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    check_same_shape(P, Q)
    total = P.sum()
    if not total > 0:
        raise ZeroMass("prediction has zero total mass")
    q_total = Q.sum()
    if not q_total > 0:
        raise ZeroMass("ground truth has zero total mass")
    p = P / total
    q = Q / q_total
    ratio = q / (p + eps)
    value = np.sum(q * np.log(eps + ratio))
    dp = -q * ratio / ((p + eps) * (eps + ratio))
    grad = (dp - np.sum(dp * p)) / total
    return LossValueGrad(float(value), grad)


def combined_loss(P, Q, F, eps=1e-7, sigma_floor=None):
    """``nss_prime + cc_prime + kld_loss`` with the gradients summed alike.

    A failing component re-raises its error with ``err.component`` set.
    """
    parts = {}
    for name, fn in (
        ("NSS'", lambda: nss_prime(P, F, sigma_floor)),
        ("CC'", lambda: cc_prime(P, Q, sigma_floor)),
        ("KLD", lambda: kld_loss(P, Q, eps)),
    ):
        try:
            parts[name] = fn()
        except SaliencyError as err:
            err.component = name
            err.args = (f"{name}: {err.args[0] if err.args else ''}",) + err.args[1:]
            raise
    value = parts["NSS'"].value + parts["CC'"].value + parts["KLD"].value
    grad = parts["NSS'"].grad + parts["CC'"].grad + parts["KLD"].grad
    return LossValueGrad(value, grad, {k: v.value for k, v in parts.items()})


def batch_combined_loss(P, Q, F, eps=1e-7, sigma_floor=SIGMA_FLOOR):
    """Mean combined loss over a batch of shape ``(B, H, W)``.

    Samples are reduced in index order so the result is reproducible.
    """
    P = np.asarray(P, dtype=np.float64)
    values = []
    grads = np.empty_like(P)
    for i in range(P.shape[0]):
        out = combined_loss(P[i], Q[i], F[i], eps, sigma_floor)
        values.append(out.value)
        grads[i] = out.grad
    B = P.shape[0]
    return LossValueGrad(float(np.sum(values) / B), grads / B)
