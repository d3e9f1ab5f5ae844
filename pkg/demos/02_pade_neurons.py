"""
Padé approximant neurons
========================

A Paon layer computes a ratio of two polynomial-in-x convolutions,
``P_M(x) / Q_N(x)``. Paon-A keeps the denominator at least one by taking
absolute values; Paon-S mixes two truncations so that the denominator is a
sum of squares. With ``N = 0`` the layer reduces to an ordinary
(``M = 1``) or quadratic / generative (``M > 1``) neuron.
"""

import numpy as np

from paon.autodiff import Tensor, backward, no_grad, sum_
from paon.errors import NumericDomainError
from paon.layers import PAU, PaonLayer, PaonSpec, Shifter, count_paon_parameters

rng = np.random.default_rng(1)
x = Tensor(rng.uniform(-1, 1, (2, 4, 8, 8)))

# parameter counts follow M + N kernels plus a bias (and a 1x1 shifter conv when active)
for spec in [PaonSpec(1, 0, "A", 4, 4), PaonSpec(3, 0, "A", 4, 4, shift=0), PaonSpec(2, 1, "S", 4, 4, shift=0)]:
    print(f"[{spec.M}/{spec.N}] {spec.variant} shift={spec.shift}: {count_paon_parameters(spec)} parameters")

# Paon-A: the denominator never drops below one, even with large kernels
layer_a = PaonLayer(PaonSpec(2, 1, "A", 4, 4), rng)
for h in layer_a.den:
    h.p.data = rng.standard_normal(h.p.shape).astype(np.float32) * 5
with no_grad():
    print("Paon-A smallest denominator:", layer_a.denominator(x).data.min())

# Paon-S stays finite even where the full-order denominator Q_N is zero
layer_s = PaonLayer(PaonSpec(2, 1, "S", 4, 4), rng)
out = layer_s(x)
print("Paon-S output finite:", bool(np.all(np.isfinite(out.data))))

# the unsafe vanilla form is opt-in and refuses to divide by a near-zero Q
vanilla = PaonLayer(PaonSpec(2, 1, "vanilla", 4, 4, allow_vanilla=True), rng)
vanilla.den[0].p.data[...] = 0
vanilla.den[0].p.data[:, :, 1, 1] = -np.eye(4, dtype=np.float32) / 0.5
try:
    vanilla(Tensor(np.full((1, 4, 3, 3), 0.5)))
except NumericDomainError as err:
    print("vanilla:", err)

# the shifter learns per-channel sub-pixel translations from pooled features;
# it starts at zero, i.e. as the identity
sh = Shifter(4, bound=1)
print("fresh shifter is identity:", np.allclose(sh(x).data, x.data))

# PAU: a learnable rational activation initialised to GELU
pau = PAU(7, 6)
t = Tensor(np.linspace(-3, 3, 7))
print("PAU(t)  :", np.round(pau(t).data, 4))
backward(sum_(pau(t)))
print("PAU coefficients receive gradients:", pau.num.grad.shape, pau.den.grad.shape)
