"""Stochastic sampling helpers that stay differentiable."""

import numpy as np

from . import tensor as T
from ..errors import ConfigurationError


def gumbel_noise(rng, shape, dtype, eps=1e-10):
    u = rng.random(size=shape)
    return (-np.log(-np.log(u + eps) + eps)).astype(dtype)


def gumbel_softmax_sample(logits, temperature, rng=None, hard=False, noise=None):
    """Concrete relaxation of a categorical draw over the last axis.

    Adds Gumbel noise to the logits and pushes the sum through a
    tempered softmax.  With ``hard`` the forward value is the one-hot
    argmax while the gradient flows through the soft sample
    (straight-through).  Pass ``noise`` to replay a fixed draw (or
    zeros to strip the stochasticity in tests).
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    logits = T.as_tensor(logits)
    if noise is None:
        if rng is None:
            raise ConfigurationError("gumbel_softmax_sample needs either rng or noise")
        noise = gumbel_noise(rng, logits.data.shape, logits.data.dtype)
    soft = T.softmax((logits + T.Tensor(noise)) * (1.0 / temperature), axis=-1)
    if not hard:
        return soft
    idx = soft.data.argmax(axis=-1)
    onehot = np.zeros_like(soft.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    # forward: one-hot; backward: gradient of the soft sample
    return T.add(T.Tensor(onehot - soft.data), soft)
