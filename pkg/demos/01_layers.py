"""Walk through the hand-written layers on a toy tensor.

Every layer is a pair of plain functions: a forward pass and a backward pass
that maps an upstream gradient to input and parameter gradients.  At the end
we compare one analytic gradient against central finite differences.

Run:  python3 demos/01_layers.py
"""
import numpy as np

from pyramid_iqa import numerics as nx

rng = np.random.default_rng(0)

# %% A batch of two single-channel 32x32 patches, NCHW layout
x = rng.random((2, 1, 32, 32))

# %% conv -> batch norm -> ELU -> 2x2 max pool, the unit repeated in each stream
conv = nx.init_conv(1, 4, rng, dtype="float64")
bn = nx.init_batchnorm(4, dtype="float64")
elu_cfg = nx.EluConfig(alpha=1.0)

z = nx.conv2d_forward(x, conv)           # 'same' padding keeps 32x32
y = nx.batchnorm_forward(z, bn, "train")  # batch statistics, running stats updated
a = nx.elu(y, elu_cfg)
p, argmax = nx.maxpool2x2(a)
print("conv", z.shape, "pool", p.shape)
print("per-channel mean after BN:", np.round(y.mean(axis=(0, 2, 3)), 12))
print("running mean moved to:", np.round(bn.running_mean, 4))

# %% Spatial pyramid pooling turns any 2^k map into a fixed-length vector
feats = nx.spp_forward(p, (1, 2, 4, 8))
print("SPP width", feats.shape[1], "=", nx.spp_width(4, (1, 2, 4, 8)))

# %% The feature pyramid fuses three depths of one stream into 3 * channels numbers
c3 = rng.standard_normal((2, 8, 32, 32))
c4 = rng.standard_normal((2, 8, 16, 16))
c5 = rng.standard_normal((2, 16, 8, 8))
fpn = nx.init_fpn((8, 8, 16), rng, channels=32, dtype="float64")
pyramid, cache = nx.fpn_forward(c3, c4, c5, fpn)
print("FPN output", pyramid.shape)

# %% Check the conv weight gradient of L = sum(conv(x) * R) by central differences
R = rng.standard_normal(z.shape)
_, gw, _ = nx.conv2d_backward(x, conv, R, need_input_grad=False)

h = 1e-6
num = np.zeros_like(conv.weights)
for i in np.ndindex(conv.weights.shape):
    old = conv.weights[i]
    conv.weights[i] = old + h
    up = np.sum(nx.conv2d_forward(x, conv) * R)
    conv.weights[i] = old - h
    down = np.sum(nx.conv2d_forward(x, conv) * R)
    conv.weights[i] = old
    num[i] = (up - down) / (2 * h)

rel = np.abs(gw - num).max() / np.abs(num).max()
print(f"conv weight gradient: max relative error {rel:.2e}")
