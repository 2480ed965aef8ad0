"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``KDSEQ_DISABLE_NUMBA=1`` (or run without numba installed) to force the
numpy implementations. Both paths compute the same quantities; they may differ
in the last few bits because summation order differs.
"""
import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAS_NUMBA and not _flag("KDSEQ_DISABLE_NUMBA")
BACKEND = "numba" if USE_NUMBA else "numpy"


# --- pure numpy -------------------------------------------------------------

def np_dense_forward(x, w, b, relu):
    z = x @ w + b
    if relu:
        return z, np.maximum(z, 0.0)
    return z, z


def np_dense_backward(x, w, dz):
    return x.T @ dz, dz.sum(axis=0), dz @ w.T


def np_relu_backward(da, z):
    return np.where(z > 0.0, da, 0.0)


def np_softmax_xent(logits, labels):
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    sumexp = expz.sum(axis=1)
    rows = np.arange(b)
    loss = float(np.sum(np.log(sumexp) - shifted[rows, labels]) / b)
    grad = expz / sumexp[:, None]
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def np_masked_mse(student, target, mask):
    n = student.shape[0] * student.shape[1]
    diff = (student - target) * mask[:, None]
    return float(np.sum(diff * diff) / n), diff * (2.0 / n)


def np_mean_stack(stack):
    out = stack[0].copy()
    for i in range(1, stack.shape[0]):
        out += stack[i]
    return out / stack.shape[0]


# --- numba ------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def nb_dense_forward(x, w, b, relu):
        z = np.dot(x, w)
        rows, cols = z.shape
        a = np.empty_like(z)
        for i in range(rows):
            for j in range(cols):
                v = z[i, j] + b[j]
                z[i, j] = v
                if relu and v <= 0.0:
                    a[i, j] = 0.0
                else:
                    a[i, j] = v
        return z, a

    @njit(cache=True)
    def nb_dense_backward(x, w, dz):
        dw = np.dot(x.T, dz)
        rows, cols = dz.shape
        db = np.zeros(cols)
        for i in range(rows):
            for j in range(cols):
                db[j] += dz[i, j]
        return dw, db, np.dot(dz, w.T)

    @njit(cache=True)
    def nb_relu_backward(da, z):
        out = np.empty_like(da)
        rows, cols = da.shape
        for i in range(rows):
            for j in range(cols):
                out[i, j] = da[i, j] if z[i, j] > 0.0 else 0.0
        return out

    @njit(cache=True)
    def nb_softmax_xent(logits, labels):
        b, c = logits.shape
        grad = np.empty_like(logits)
        total = 0.0
        for i in range(b):
            m = logits[i, 0]
            for j in range(1, c):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(c):
                e = np.exp(logits[i, j] - m)
                grad[i, j] = e
                s += e
            total += np.log(s) - (logits[i, labels[i]] - m)
            for j in range(c):
                grad[i, j] = grad[i, j] / s / b
            grad[i, labels[i]] -= 1.0 / b
        return total / b, grad

    @njit(cache=True)
    def nb_masked_mse(student, target, mask):
        b, c = student.shape
        n = b * c
        grad = np.zeros_like(student)
        total = 0.0
        for i in range(b):
            if not mask[i]:
                continue
            for j in range(c):
                d = student[i, j] - target[i, j]
                total += d * d
                grad[i, j] = d * (2.0 / n)
        return total / n, grad

    @njit(cache=True)
    def nb_mean_stack(stack):
        k, rows, cols = stack.shape
        out = np.zeros((rows, cols))
        for t in range(k):
            for i in range(rows):
                for j in range(cols):
                    out[i, j] += stack[t, i, j]
        return out / k


if USE_NUMBA:
    dense_forward = nb_dense_forward
    dense_backward = nb_dense_backward
    relu_backward = nb_relu_backward
    _softmax_xent = nb_softmax_xent
    _masked_mse = nb_masked_mse
    mean_stack = nb_mean_stack
else:
    dense_forward = np_dense_forward
    dense_backward = np_dense_backward
    relu_backward = np_relu_backward
    _softmax_xent = np_softmax_xent
    _masked_mse = np_masked_mse
    mean_stack = np_mean_stack


def softmax_xent(logits, labels):
    loss, grad = _softmax_xent(logits, labels)
    return float(loss), grad


def masked_mse(student, target, mask):
    loss, grad = _masked_mse(student, target, mask)
    return float(loss), grad
