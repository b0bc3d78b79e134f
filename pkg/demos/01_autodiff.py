"""
Reverse-mode autodiff on channels-last tensors
==============================================

Builds a tiny conv -> pool -> dense -> sigmoid graph, backpropagates a
BCE loss and compares one gradient entry against a central difference.
"""

import numpy as np

from seamil.autodiff import Tape, Tensor, bce_loss, conv2d, dense, global_pool, reshape, sigmoid

rng = np.random.default_rng(0)
x = Tensor(rng.uniform(size=(8, 8, 3)))
kernel = Tensor(rng.normal(size=(3, 3, 3, 4)) * 0.3, requires_grad=True)
w = Tensor(rng.normal(size=(4, 1)), requires_grad=True)


def forward(k):
    h = reshape(global_pool(conv2d(x, k, 1, "same"), "max"), (1, 4))
    return bce_loss(sigmoid(dense(h, w)), 1.0)


with Tape() as tape:
    loss = forward(kernel)
tape.backward(loss)
print("loss", loss.item())

# nudge one kernel entry both ways
eps = 1e-6
idx = (1, 1, 0, 2)
up, down = kernel.data.copy(), kernel.data.copy()
up[idx] += eps
down[idx] -= eps
numeric = (forward(Tensor(up)).item() - forward(Tensor(down)).item()) / (2 * eps)
print("analytic", kernel.grad[idx], "numeric", numeric)
