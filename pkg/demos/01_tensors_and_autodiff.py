"""Tour of the tensor core: build a tiny network by hand, backprop
through it, and verify every gradient against central finite differences.

Run: python3 demos/01_tensors_and_autodiff.py
"""

import numpy as np

from flowlab import numcore as nc

rng = np.random.default_rng(0)

print("=== forward ops ===")
a = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
eye = nc.Tensor(np.eye(2, dtype=np.float32))
print("matmul with identity keeps the matrix:\n", nc.matmul(a, eye).data)
print("softmax of a constant row is uniform:", nc.softmax(nc.Tensor([0.0, 0.0, 0.0])).data)

print("\n=== a two-layer network, recorded on a tape ===")
w1 = nc.Tensor(0.5 * rng.standard_normal((4, 8)).astype(np.float32), requires_grad=True)
w2 = nc.Tensor(0.5 * rng.standard_normal((8, 3)).astype(np.float32), requires_grad=True)
x = nc.Tensor(rng.standard_normal((5, 4)).astype(np.float32))
y = nc.Tensor(rng.standard_normal((5, 3)).astype(np.float32))

with nc.GradContext() as ctx:
    hidden = nc.gelu(nc.matmul(x, w1))
    loss = nc.mse(nc.matmul(hidden, w2), y)
    grads = ctx.backward(loss)
print(f"loss = {loss.item():.4f}")
print(f"|dL/dw1| = {np.abs(grads[w1]).mean():.4f}, |dL/dw2| = {np.abs(grads[w2]).mean():.4f}")

print("\n=== the tape is consumed after one traversal ===")
try:
    ctx.backward(loss)
except nc.GraphError as e:
    print("second backward correctly refused:", e)

print("\n=== finite differences agree with the analytic gradients ===")
def f(w):
    h = nc.gelu(nc.matmul(x, w))
    return nc.mse(nc.matmul(h, w2), y)

err = nc.grad_check(f, w1)
print(f"max relative error vs central differences: {err:.2e} (< 1e-3)")
