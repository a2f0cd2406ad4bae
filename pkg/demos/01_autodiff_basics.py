"""
Tensors, tapes and gradient checks
==================================

A short walk through the numpy autodiff kernel everything else is built on.
"""

import numpy as np

from predalign import numkernel as nk
from predalign.numkernel import Tensor

# a leaf that asks for gradients
w = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
x = Tensor(np.array([[1.0, 1.0]]))
b = Tensor(np.zeros(2), requires_grad=True)

y = nk.relu(nk.dense(x, w, b))
loss = y.sum()
print("forward:", y.data)

# the tape lists operations consumers first
print("tape:", [node.kind for _, node in nk.Tape.from_loss(loss).nodes])

nk.backward(loss)
print("dL/dw:\n", w.grad)

# a recorded graph can only be replayed once
try:
    nk.backward(loss)
except RuntimeError as exc:
    print("second backward:", exc)

# binary cross entropy through a sigmoid at zero has slope -0.5
z = Tensor(np.array([0.0]), requires_grad=True)
nk.backward(nk.bce(nk.sigmoid(z), 1.0))
print("d bce / dz at 0:", z.grad[0])

# finite differences agree with the tape on a small convolution
rng = np.random.default_rng(0)
img = Tensor(rng.normal(size=(1, 2, 5, 5)))
kernel = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
bias = Tensor(np.zeros(3), requires_grad=True)


def conv_energy():
    out = nk.conv2d(img, kernel, bias, stride=2, padding=1)
    return (out * out).sum()


err = nk.grad_check(conv_energy, [kernel, bias])
print("conv2d worst relative error:", err)

# momentum SGD on a quadratic bowl
p = Tensor(np.array([4.0, -3.0]), requires_grad=True)
opt = nk.SGD([p], lr=0.1, momentum=0.5)
for step in range(30):
    opt.zero_grad()
    nk.backward((p * p).sum())
    opt.step()
print("after 30 steps:", np.round(p.data, 4))
