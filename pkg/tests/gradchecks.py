"""Finite-difference gradient checks, one function per layer type.

Each check builds a random float64 instance from ``seed``, contracts the
layer output with a random cotangent ``R`` (loss = sum(out * R)) and returns
the worst relative error between the analytic and central-difference
gradients over every input and parameter.
"""
import numpy as np

from pyramid_iqa import numerics as nx
from pyramid_iqa.model import ModelConfig, backward, build_model, forward

from conftest import central_diff, max_rel_error, rel_error_at

F64 = np.float64


def _conv(rng, cin, cout, k=3):
    return nx.ConvLayer(rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout))


def conv(seed, h=1e-6):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    layer = _conv(rng, 3, 4)
    R = rng.standard_normal((2, 4, 5, 5))

    def f():
        return float(np.sum(nx.conv2d_forward(x, layer) * R))

    gx, gw, gb = nx.conv2d_backward(x, layer, R)
    return max(max_rel_error(gx, central_diff(f, x, h)),
               max_rel_error(gw, central_diff(f, layer.weights, h)),
               max_rel_error(gb, central_diff(f, layer.bias, h)))


def batchnorm(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 4, 4)) * 2 + 1
    layer = nx.init_batchnorm(2, dtype=F64)
    layer.gamma[:] = rng.uniform(0.5, 2, 2)
    layer.beta[:] = rng.standard_normal(2)
    R = rng.standard_normal(x.shape)

    def f():
        return float(np.sum(nx.batchnorm_forward(x, layer, "train") * R))

    gx, gg, gb = nx.batchnorm_backward(x, layer, R)
    return max(max_rel_error(gx, central_diff(f, x)),
               max_rel_error(gg, central_diff(f, layer.gamma)),
               max_rel_error(gb, central_diff(f, layer.beta)))


def elu(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6)) * 2
    R = rng.standard_normal(x.shape)
    cfg = nx.EluConfig(1.0)

    def f():
        return float(np.sum(nx.elu(x, cfg) * R))

    return max_rel_error(nx.elu_backward(x, R, cfg), central_diff(f, x))


def maxpool(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 6, 6))
    R = rng.standard_normal((2, 2, 3, 3))

    def f():
        return float(np.sum(nx.maxpool2x2(x)[0] * R))

    _, idx = nx.maxpool2x2(x)
    return max_rel_error(nx.maxpool2x2_backward(R, idx), central_diff(f, x))


def spp(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))
    R = rng.standard_normal((2, nx.spp_width(3)))

    def f():
        return float(np.sum(nx.spp_forward(x) * R))

    return max_rel_error(nx.spp_backward(R, x.shape), central_diff(f, x))


def fpn(seed, h=1e-3):
    # the block is affine in every single entry, so a larger step loses no
    # accuracy to truncation and keeps rounding noise off small gradients
    rng = np.random.default_rng(seed)
    c3 = rng.standard_normal((2, 3, 8, 8))
    c4 = rng.standard_normal((2, 3, 4, 4))
    c5 = rng.standard_normal((2, 5, 2, 2))
    params = nx.init_fpn((3, 3, 5), rng, channels=4, dtype=F64)
    for layer in params.lateral + params.smooth:
        layer.bias[:] = rng.standard_normal(layer.bias.shape)
    R = rng.standard_normal((2, 12))

    def f():
        return float(np.sum(nx.fpn_forward(c3, c4, c5, params)[0] * R))

    _, cache = nx.fpn_forward(c3, c4, c5, params)
    g3, g4, g5, grads = nx.fpn_backward(cache, params, R)
    errs = [max_rel_error(g, central_diff(f, c, h)) for g, c in ((g3, c3), (g4, c4), (g5, c5))]
    for layers, glayers in ((params.lateral, grads.lateral), (params.smooth, grads.smooth)):
        for layer, g in zip(layers, glayers):
            errs.append(max_rel_error(g.weights, central_diff(f, layer.weights, h)))
            errs.append(max_rel_error(g.bias, central_diff(f, layer.bias, h)))
    return max(errs)


def linear(seed, h=1e-6):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6))
    layer = nx.LinearLayer(rng.standard_normal((3, 6)), rng.standard_normal(3))
    R = rng.standard_normal((4, 3))

    def f():
        return float(np.sum(nx.linear_forward(x, layer) * R))

    gx, gw, gb = nx.linear_backward(x, layer, R)
    return max(max_rel_error(gx, central_diff(f, x, h)),
               max_rel_error(gw, central_diff(f, layer.weights, h)),
               max_rel_error(gb, central_diff(f, layer.bias, h)))


# Central differences at h=1e-6 resolve gradients only down to about 1e-9
# absolute (rounding in the forward pass), so whole-model comparisons floor the
# relative-error denominator at 1e-4, roughly 1000x below typical entries.
E2E_FLOOR = 1e-4
# Conv biases feeding batch norm are cancelled by the mean subtraction: their
# true gradient is exactly zero and the difference quotient is pure noise.
FD_NOISE = 1e-8


def structural_zero(name):
    return ".conv" in name and name.endswith(".bias") and not name.startswith("fpn.")


def slim_model(seed, variant="full", max_entries=None):
    """End-to-end check of every parameter tensor of the slim model.

    ``max_entries`` limits how many randomly chosen entries per tensor are
    differenced (all of them when None).  Returns the worst relative error;
    structurally zero gradients are asserted separately.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig.slim(variant=variant, seed=seed, dtype="float64")
    model = build_model(cfg)
    for name, p in model.parameters().items():
        if name.endswith((".bias", ".beta")):
            p[...] = 0.1 * rng.standard_normal(p.shape)
    d = rng.random((2, 1, 64, 64))
    r = rng.random((2, 1, 64, 64)) * 0.3
    R = rng.standard_normal(2)

    def f():
        return float(np.dot(forward(model, d, r, "train")[0], R))

    scores, cache = forward(model, d, r, "train")
    grads = backward(model, cache, R)
    worst = 0.0
    for name, p in model.parameters().items():
        if max_entries is None or p.size <= max_entries:
            index = np.arange(p.size)
        else:
            index = rng.choice(p.size, size=max_entries, replace=False)
        num = central_diff(f, p, index=index)
        if structural_zero(name):
            assert np.abs(grads[name]).max() < 1e-12, name
            assert np.abs(num.reshape(-1)[index]).max() < FD_NOISE, name
            continue
        worst = max(worst, rel_error_at(grads[name], num, index, floor=E2E_FLOOR))
    return worst


LAYER_CHECKS = {
    "conv": conv,
    "batchnorm": batchnorm,
    "elu": elu,
    "maxpool": maxpool,
    "spp": spp,
    "fpn": fpn,
    "linear": linear,
}
