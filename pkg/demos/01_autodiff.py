"""
Reverse-mode differentiation on a tape
======================================

Every op records a tape entry; ``backward`` replays the tape in reverse and
returns gradients for the leaves. Gradients are checked against central
finite differences evaluated in 64-bit.
"""

import numpy as np

from paon.autodiff import Tensor, backward, conv2d, gelu, pixel_shuffle, sum_, translate_bilinear
from paon.autodiff.gradcheck import gradcheck

rng = np.random.default_rng(0)

# a scalar function of two leaves
x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
k = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.3, requires_grad=True)
loss = sum_(gelu(conv2d(x, k, padding="circular")) ** 2)
grads = backward(loss)
print("loss", float(loss.data))
print("d loss / d kernel has shape", grads[k].shape)

# circular padding: a 3x3 convolution commutes with circular shifts
shifted = Tensor(np.roll(x.data, (1, 2), axis=(2, 3)))
a = np.roll(conv2d(x, k).data, (1, 2), axis=(2, 3))
b = conv2d(shifted, k).data
print("shift equivariance, max diff:", np.abs(a - b).max())

# pixel shuffle moves channel c*r*r + i*r + j to sub-pixel (i, j) of channel c
y = pixel_shuffle(Tensor(np.arange(8.0).reshape(1, 8, 1, 1)), 2)
print("pixel_shuffle of 0..7 ->\n", y.data[0])

# bilinear translation with per-channel, fractional shifts; the shifts get gradients too
shifts = rng.uniform(-1, 1, (2, 2))
errs = gradcheck(lambda img, s: sum_(translate_bilinear(img, s) ** 2), [x.data, shifts])
print("translate_bilinear gradient rel. errors (input, shifts):", ["%.1e" % e for e in errs])
