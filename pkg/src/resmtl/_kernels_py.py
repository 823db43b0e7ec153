"""Pure-Python (numpy) kernel fallback.

Same call surface as the compiled extension in ``_kernels.pyx``.  All
functions take and return C-contiguous float64 arrays; shape checking is
the caller's job (see ``numcore``).
"""

import numpy as np


def matmul(a, b):
    return a @ b


def matmul_at(a, b):
    """a.T @ b without materializing the transpose."""
    return a.T @ b


def matmul_bt(a, b):
    """a @ b.T without materializing the transpose."""
    return a @ b.T


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return np.where(x > 0.0, upstream, 0.0)


def softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    """One fused Adam update on flat views; mutates param, m and v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
