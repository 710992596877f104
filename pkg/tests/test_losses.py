import numpy as np
import pytest

from emlnet.core import DegenerateInput, EmptyFixations, ZeroMass
from emlnet.dataio import FixationRecord, fixations_to_binary, fixations_to_density
from emlnet.gradcheck import max_rel_error, numerical_grad
from emlnet.losses import (
    SIGMA_FLOOR,
    batch_combined_loss,
    cc_prime,
    combined_loss,
    kld_loss,
    nss_prime,
)


def instance(seed, size=8):
    rng = np.random.default_rng(seed)
    P = rng.random((size, size)) + 0.05
    Q = rng.random((size, size)) ** 2
    Q /= Q.sum()
    F = np.zeros((size, size))
    F.flat[rng.choice(size * size, size=int(rng.integers(1, 6)), replace=False)] = 1
    return P, Q, F


def assert_grad_ok(fn, P, analytic):
    rel, absolute = max_rel_error(analytic, numerical_grad(fn, P, h=1e-5))
    assert rel < 1e-4
    assert absolute < 1e-7


@pytest.mark.parametrize("seed", range(10))
def test_cc_prime_grad(seed):
    P, Q, _ = instance(seed)
    assert_grad_ok(lambda x: cc_prime(x, Q).value, P, cc_prime(P, Q).grad)


@pytest.mark.parametrize("seed", range(10))
def test_nss_prime_grad(seed):
    P, _, F = instance(seed)
    assert_grad_ok(lambda x: nss_prime(x, F).value, P, nss_prime(P, F).grad)


@pytest.mark.parametrize("seed", range(10))
def test_kld_loss_grad(seed):
    P, Q, _ = instance(seed)
    assert_grad_ok(lambda x: kld_loss(x, Q).value, P, kld_loss(P, Q).grad)


@pytest.mark.parametrize("seed", range(10))
def test_combined_grad_and_additivity(seed):
    P, Q, F = instance(seed)
    out = combined_loss(P, Q, F)
    assert_grad_ok(lambda x: combined_loss(x, Q, F).value, P, out.grad)
    parts = (nss_prime(P, F), cc_prime(P, Q), kld_loss(P, Q))
    assert out.value == parts[0].value + parts[1].value + parts[2].value
    assert np.array_equal(out.grad, parts[0].grad + parts[1].grad + parts[2].grad)


def test_cc_prime_endpoints():
    P = np.random.default_rng(0).random((6, 6))
    assert abs(cc_prime(P, P).value) < 1e-9
    assert abs(cc_prime(P, -P + 3).value - 2) < 1e-9
    with pytest.raises(DegenerateInput):
        cc_prime(np.ones((3, 3)), P[:3, :3])


def test_nss_prime_zero_at_fixations():
    F = np.zeros((5, 5))
    F[1, 2] = F[3, 3] = 1
    assert abs(nss_prime(F.copy(), F).value) < 1e-9
    with pytest.raises(DegenerateInput):
        nss_prime(np.random.default_rng(0).random((3, 3)), np.ones((3, 3)))
    with pytest.raises(EmptyFixations):
        nss_prime(np.random.default_rng(0).random((3, 3)), np.zeros((3, 3)))


def test_kld_loss_identity_and_scale():
    _, Q, _ = instance(1)
    assert kld_loss(3 * Q, Q).value < 1e-6
    P = np.random.default_rng(2).random(Q.shape)
    assert abs(kld_loss(2 * P, Q).value - kld_loss(P, Q).value) < 1e-9
    with pytest.raises(ZeroMass):
        kld_loss(np.zeros_like(Q), Q)


def test_stationary_points():
    _, Q, _ = instance(3)
    assert np.linalg.norm(cc_prime(5 * Q, Q).grad) < 1e-6
    # with eps inside the log the KLD gradient at P ~ Q is O(eps / q) per
    # pixel rather than zero, so the stationarity check uses a tiny eps
    assert np.linalg.norm(kld_loss(5 * Q, Q, eps=1e-12).grad) < 1e-6
    residual = kld_loss(5 * Q, Q).grad
    assert np.all(np.abs(residual) <= 2 * 1e-7 / Q / 5)


def test_combined_near_optimum():
    # many observers fixating one spot: the blurred map is nearly the
    # standardized fixation map at the fixation, and matches Q exactly
    rec = FixationRecord("x", [(16, 16)], 32, 32)
    Q = fixations_to_density(rec, 0.3)
    F = fixations_to_binary(rec)
    out = combined_loss(Q, Q, F)
    assert out.value < 1e-3


def test_combined_tags_failing_component():
    P = np.ones((4, 4))
    Q = np.random.default_rng(0).random((4, 4))
    F = np.zeros((4, 4))
    F[0, 0] = 1
    with pytest.raises(DegenerateInput) as info:
        combined_loss(P, Q, F)
    assert info.value.component == "NSS'"
    assert str(info.value).startswith("NSS'")


def test_finite_on_random_inputs():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        size = int(rng.integers(8, 33))
        P = rng.random((size, size))
        Q = rng.random((size, size))
        F = np.zeros((size, size))
        F.flat[rng.choice(size * size, size=int(rng.integers(1, 10)), replace=False)] = 1
        for out in (cc_prime(P, Q), nss_prime(P, F), kld_loss(P, Q), combined_loss(P, Q, F)):
            assert np.isfinite(out.value)
            assert np.all(np.isfinite(out.grad))
        assert 0 <= cc_prime(P, Q).value <= 2


def test_sigma_floor_accepts_constant_prediction():
    P = np.full((4, 4), 0.5)
    Q = np.random.default_rng(0).random((4, 4))
    F = np.zeros((4, 4))
    F[0, 0] = 1
    out = combined_loss(P, Q, F, sigma_floor=SIGMA_FLOOR)
    assert np.isfinite(out.value) and np.all(np.isfinite(out.grad))


def test_batch_loss_is_mean():
    items = [instance(s) for s in range(3)]
    P, Q, F = (np.stack(x) for x in zip(*items))
    out = batch_combined_loss(P, Q, F)
    singles = [combined_loss(p, q, f, sigma_floor=SIGMA_FLOOR) for p, q, f in items]
    assert abs(out.value - np.mean([s.value for s in singles])) < 1e-12
    assert np.allclose(out.grad, np.stack([s.grad for s in singles]) / 3, atol=0, rtol=1e-15)
