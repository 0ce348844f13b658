"""
The reverse-mode autodiff engine
================================

lcmuse ships its own small tensor library: dense numpy-backed tensors that
record every operation into a graph so gradients can be pulled back through
arbitrary compositions, including a second reverse pass through the first
(gradients of functions of gradients). This walkthrough builds a few graphs
by hand and checks every derivative against central finite differences.

Run from the repository root:  python3 demos/01_autodiff_engine.py
"""

import numpy as np

from lcmuse.tensor import Tensor, conv2d, grad, no_grad, norm2, relu, tensor

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# First-order: gradient of a scalar through conv -> relu -> norm
# ---------------------------------------------------------------------------
# `tensor(..., requires_grad=True)` marks a leaf we want derivatives for.
# Shapes follow the [channels, H, W] convention for images and
# [out_ch, in_ch, kH, kW] for convolution kernels.

x = tensor(rng.standard_normal((1, 8, 8)), requires_grad=True)
k1 = tensor(0.3 * rng.standard_normal((4, 1, 3, 3)), requires_grad=True)
k2 = tensor(0.3 * rng.standard_normal((1, 4, 3, 3)), requires_grad=True)

h = conv2d(x, k1)          # same-size convolution, zero padding
h = relu(h)                # elementwise max(., 0)
y = conv2d(h, k2)
loss = norm2(y)            # 0.5 * sum(y**2), a scalar

# `grad` walks the recorded graph backwards from the scalar root and
# returns one gradient tensor per requested leaf.
gx, gk1 = grad(loss, [x, k1])


def fd_grad(f, arr, step=1e-6):
    """Central finite differences of scalar f at a numpy array, elementwise."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = f()
        flat[i] = keep - step
        fm = f()
        flat[i] = keep
        out[i] = (fp - fm) / (2 * step)
    return g


def forward_loss():
    h = relu(conv2d(x, k1))
    return float(norm2(conv2d(h, k2)).data)


# Finite differences perturb the underlying storage in place, so the same
# tensor objects can be reused for every evaluation.
fx = fd_grad(forward_loss, x.data)
fk1 = fd_grad(forward_loss, k1.data)

err_x = np.abs(gx.numpy() - fx).max() / np.abs(fx).max()
err_k = np.abs(gk1.numpy() - fk1).max() / np.abs(fk1).max()
print(f"first-order vs finite differences: input grad rel err {err_x:.2e}, "
      f"kernel grad rel err {err_k:.2e}")

# ---------------------------------------------------------------------------
# Second-order: differentiate a function of a gradient
# ---------------------------------------------------------------------------
# The energy-model training objective needs d/dk of || d/dx E(x) ||^2 --
# a reverse pass through a reverse pass. `create_graph=True` keeps the
# first backward differentiable.

x2 = tensor(rng.standard_normal((1, 6, 6)), requires_grad=True)
k = tensor(0.4 * rng.standard_normal((1, 1, 3, 3)), requires_grad=True)


def energy(x_t: Tensor, k_t: Tensor) -> Tensor:
    return norm2(relu(conv2d(x_t, k_t)))


e = energy(x2, k)
(gx2,) = grad(e, [x2], create_graph=True)   # d e / d x, still a graph node
q = (gx2 * gx2).sum()                       # squared gradient norm
(gk,) = grad(q, [k])                        # d q / d k via second reverse pass


def q_of_k():
    e = energy(x2, k)
    (g,) = grad(e, [x2], create_graph=True)
    return float((g * g).sum().data)


fk = fd_grad(q_of_k, k.data, step=1e-5)
err2 = np.abs(gk.numpy() - fk).max() / np.abs(fk).max()
print(f"second-order (grad of squared grad-norm) rel err {err2:.2e}")

# ---------------------------------------------------------------------------
# Switching recording off
# ---------------------------------------------------------------------------
# Inside `no_grad()` nothing is recorded: forward-only evaluation at full
# speed. The mode is per-thread, so concurrent solves cannot disturb a
# training loop running elsewhere.

with no_grad():
    silent = relu(conv2d(x, k1))
print(f"recorded under no_grad: requires_grad={silent.requires_grad}")

assert err_x < 1e-8 and err_k < 1e-8 and err2 < 1e-6
print("all autodiff checks passed")
