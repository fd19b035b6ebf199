#!/usr/bin/env python3
"""Tour of the autodiff core: build a graph, backpropagate, and check
every gradient against central finite differences."""

import numpy as np

from sparselab import autodiff as ad

# scalar chain rule: L = (x*y + x)^2 at x=2, y=3
x = ad.Tensor(2.0, requires_grad=True, name="x")
y = ad.Tensor(3.0, requires_grad=True, name="y")
z = ad.add(ad.mul(x, y), x)
loss = ad.mul(z, z)
ad.backward(loss)
print("L =", loss.data, " dL/dx =", x.grad, " dL/dy =", y.grad)
# analytic: z = x(y+1) = 8, L = 64, dL/dx = 2z(y+1) = 64, dL/dy = 2zx = 32

# a small dense network with a smooth activation
rng = np.random.default_rng(0)
w1 = ad.Tensor(rng.normal(size=(3, 4)) * 0.5, requires_grad=True, name="w1")
w2 = ad.Tensor(rng.normal(size=(4, 2)) * 0.5, requires_grad=True, name="w2")
inputs = ad.Tensor(rng.normal(size=(8, 3)))
targets = np.zeros((8, 2))
targets[np.arange(8), rng.integers(0, 2, 8)] = 1.0

hidden = ad.mish(ad.matmul(inputs, w1))
logits = ad.matmul(hidden, w2)
loss = ad.softmax_cross_entropy(logits, targets)
ad.backward(loss)
print("\ncross entropy:", float(loss.data))

# verify dL/dw1 against the finite-difference oracle
def loss_at(flat):
    w1_ = ad.Tensor(flat.reshape(3, 4))
    h = ad.mish(ad.matmul(inputs, w1_))
    return float(ad.softmax_cross_entropy(ad.matmul(h, ad.Tensor(w2.data)), targets).data)

fd = ad.finite_diff_grad(loss_at, w1.data.ravel())
err = np.abs(w1.grad.ravel() - fd).max()
print("max |autodiff - finite difference| on dL/dw1:", err)

# Hessian-vector products agree with the dense double-difference Hessian
a = np.array([[2.0, 0.5], [0.5, 1.0]])
grad_fn = lambda t: a @ t            # gradient of 0.5 t^T A t
theta = np.array([0.3, -0.2])
v = np.array([1.0, 2.0])
hv = ad.hvp_finite_diff(grad_fn, theta, v)
print("\nHv =", hv, " exact =", a @ v)
