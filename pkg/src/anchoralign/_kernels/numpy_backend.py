"""Pure-numpy implementations of the hot kernels.

This is the fallback backend; the compiled backend in ``_ckernels`` mirrors
these signatures exactly.  Backward kernels accumulate into ``acc`` (the
caller owns the buffer) so both backends share the same calling convention.
"""

import numpy as np

NAME = "numpy"


def row_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_bwd(y, gy, acc):
    dot = (gy * y).sum(axis=1, keepdims=True)
    acc += y * (gy - dot)


def row_normalize(x):
    norms = np.sqrt((x * x).sum(axis=1))
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe[:, None], norms


def row_normalize_bwd(y, norms, gy, acc):
    safe = np.where(norms == 0.0, 1.0, norms)
    dot = (gy * y).sum(axis=1, keepdims=True)
    out = (gy - y * dot) / safe[:, None]
    out[norms == 0.0] = 0.0
    acc += out


def sigmoid(x):
    # exp(-|x|) never overflows; the two stable branches share it.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_bwd(y, gy, acc):
    acc += gy * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_bwd(y, gy, acc):
    acc += gy * (1.0 - y * y)


def relu(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, gy, acc):
    acc += gy * (x > 0.0)


def exp(x):
    return np.exp(x)


def exp_bwd(y, gy, acc):
    acc += gy * y


def log(x):
    return np.log(x)


def log_bwd(x, gy, acc):
    acc += gy / x


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """One in-place Adam step on flat views; bias1/bias2 are 1-beta^t terms."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / bias1
    vhat = v / bias2
    param -= lr * mhat / (np.sqrt(vhat) + eps)
