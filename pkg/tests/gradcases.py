"""Random instances for per-op gradient checks: name -> (make_inputs(rng), make_fn(rng))."""
import numpy as np

from dfcn import autodiff as ad


def rand(rng, *shape):
    return rng.standard_normal(shape)


def _off_kink(x, gap=0.05):
    return np.sign(x) * (np.abs(x) + gap)


OPS = {
    "gather_group": (lambda r: [rand(r, 7, 3)],
                     lambda r: (lambda f, idx=r.integers(0, 7, (5, 4)): ad.gather_group(f, idx))),
    "conv_1xK": (lambda r: [rand(r, 3, 8, 2), rand(r, 4, 2, 2), rand(r, 4)], lambda r: ad.conv_1xK),
    "conv_1xNd": (lambda r: [rand(r, 3, 4, 3), rand(r, 2, 4, 3), rand(r, 2)], lambda r: ad.conv_1xNd),
    "pointwise_mlp": (lambda r: [rand(r, 2, 3, 4), rand(r, 5, 4), rand(r, 5)], lambda r: ad.pointwise_mlp),
    "relu": (lambda r: [_off_kink(rand(r, 4, 5))], lambda r: ad.relu),
    "max_over_group": (lambda r: [rand(r, 3, 5, 2)], lambda r: ad.max_over_group),
    "concat_channels": (lambda r: [rand(r, 3, 2), rand(r, 3, 4)], lambda r: ad.concat_channels),
    "add_elementwise": (lambda r: [rand(r, 3, 2), rand(r, 3, 2)], lambda r: ad.add_elementwise),
    "reshape": (lambda r: [rand(r, 3, 4)], lambda r: (lambda x: ad.reshape(x, (2, 6)))),
    "softmax_rows": (lambda r: [rand(r, 4, 5)], lambda r: ad.softmax_rows),
    "weighted_sum_rows": (lambda r: [rand(r, 6, 3)],
                          lambda r: (lambda s, i=r.integers(0, 6, (4, 3)), w=r.uniform(size=(4, 3)):
                                     ad.weighted_sum_rows(s, i, w))),
}
