"""
Checking the loss gradients
===========================

Each loss term returns its value and its gradient with respect to the
prediction.  Here they are compared against central finite differences,
and the combined loss is checked to be the plain sum of its parts.
"""

import numpy as np

from emlnet.gradcheck import max_rel_error, numerical_grad
from emlnet.losses import cc_prime, combined_loss, kld_loss, nss_prime

rng = np.random.default_rng(0)
P = rng.random((8, 8)) + 0.05
Q = rng.random((8, 8)) ** 2
Q /= Q.sum()
F = np.zeros((8, 8))
F[2, 3] = F[6, 1] = F[4, 4] = 1

terms = {
    "NSS'": lambda x: nss_prime(x, F),
    "CC'": lambda x: cc_prime(x, Q),
    "KLD": lambda x: kld_loss(x, Q),
    "combined": lambda x: combined_loss(x, Q, F),
}

# %%
for name, fn in terms.items():
    out = fn(P)
    rel, absolute = max_rel_error(out.grad, numerical_grad(lambda x: fn(x).value, P))
    print(f"{name:9s} value {out.value:8.4f}   max rel err {rel:.1e}   abs err on tiny entries {absolute:.1e}")

# %%
# The combined loss is the sum of the three terms, to the last bit.
parts = [terms[k](P) for k in ("NSS'", "CC'", "KLD")]
total = terms["combined"](P)
print("value additive:", total.value == parts[0].value + parts[1].value + parts[2].value)
print("gradient additive:", np.array_equal(total.grad, parts[0].grad + parts[1].grad + parts[2].grad))

# %%
# Scale does not matter to any term: doubling the prediction leaves the
# loss unchanged.
print("scale invariant:", np.isclose(combined_loss(2 * P, Q, F).value, total.value, rtol=0, atol=1e-12))
