"""The reverse-mode engine underneath the traffic model.

Builds a small computation graph, backpropagates, and verifies gradients
against central finite differences.
"""

import numpy as np

from dynaflow import autodiff as ad
from dynaflow.autodiff import Tensor, conv2d, grad_check, softplus, tsum

rng = np.random.default_rng(0)

# scalar chain rule
x = Tensor(np.array([1.5]), requires_grad=True)
y = ad.mul(x, x)              # x^2
z = ad.add(ad.scale(y, 3.0), x)  # 3x^2 + x
z.backward()
print(f"d/dx (3x^2 + x) at x=1.5: {x.grad[0]} (expect {6 * 1.5 + 1.0})")

# a tiny conv "network"
image = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)), requires_grad=True)
kernel = Tensor(rng.normal(0, 0.5, (2, 1, 3, 3)), requires_grad=True)
feat = softplus(conv2d(image, kernel, pad=1))
loss = tsum(ad.mul(feat, feat))
loss.backward()
print(f"loss {float(loss.data):.4f}; kernel grad norm "
      f"{np.linalg.norm(kernel.grad):.4f}")

# verify against finite differences
image.zero_grad()
kernel.zero_grad()


def f(img, k):
    h = softplus(conv2d(img, k, pad=1))
    return tsum(ad.mul(h, h))


err = grad_check(f, [image, kernel], eps=1e-4)
print(f"max relative error vs central differences: {err:.2e}")
assert err < 1e-4
