"""
The model zoo
=============

All five reference networks share one pipeline (feature conv, residual
blocks, global skip, pixel-shuffle upsampler, RGB conv); they differ in the
neuron used inside the residual blocks and in the activation.
"""

import numpy as np

from paon.autodiff import Tensor, no_grad
from paon.network import MODELS, build_network, count_network_parameters, preset, toy

for name in MODELS:
    cfg = preset(name)
    print(f"{name:9s} [{cfg.M}/{cfg.N}] {cfg.variant} act={cfg.activation:4s} block={cfg.block:3s} "
          f"shift={cfg.shift:2d}  params={count_network_parameters(cfg)}")

# a desk-scale PadeNet: 1 block of 8 channels
net = build_network(toy(preset("padenet")), seed=0)
lr = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 12, 9)))
with no_grad():
    sr = net(lr)
print("x2 output shape:", sr.shape)

for name, layer in net.paon_layers():
    print(f"  {name:12s} [{layer.spec.M}/{layer.spec.N}] {layer.spec.in_ch}->{layer.spec.out_ch}")

# x4 uses two upsampling stages
net4 = build_network(toy(preset("padenet", upscale=4)), seed=0)
with no_grad():
    print("x4 output shape:", net4(lr).shape)
