"""Independent reference computations used by the tests."""
import math

import numpy as np


def central_diff(f, theta, h=1e-5):
    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    it = np.nditer(theta, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = theta[i]
        theta[i] = orig + h
        up = f(theta)
        theta[i] = orig - h
        down = f(theta)
        theta[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def loop_forward(layers, x):
    """Per-example, per-unit evaluation of a ReLU MLP with plain Python floats."""
    out = []
    for row in np.asarray(x, dtype=float).tolist():
        a = row
        for li, (w, b) in enumerate(layers):
            z = [sum(a[i] * w[i][j] for i in range(len(a))) + b[j] for j in range(len(b))]
            a = z if li == len(layers) - 1 else [max(v, 0.0) for v in z]
        out.append(a)
    return np.array(out)


def loop_cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits).tolist(), labels):
        m = max(row)
        total += -(row[y] - m - math.log(sum(math.exp(v - m) for v in row)))
    return total / len(labels)
