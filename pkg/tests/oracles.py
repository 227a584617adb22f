"""Independent reference implementations used as test oracles."""
import math

import numpy as np


def direct_convolution(values, kernel):
    """Quadruple loop, zero padding outside the map."""
    n = values.shape[0]
    r = kernel.shape[0] // 2
    out = np.zeros_like(values, dtype=np.float64)
    for y in range(n):
        for x in range(n):
            acc = 0.0
            for v in range(-r, r + 1):
                for u in range(-r, r + 1):
                    sy, sx = y - v, x - u
                    if 0 <= sy < n and 0 <= sx < n:
                        acc += values[sy, sx] * kernel[v + r, u + r]
            out[y, x] = acc
    return out


def kernel_value(u, v, sx, sy, theta):
    up = math.cos(theta) * u + math.sin(theta) * v
    vp = -math.sin(theta) * u + math.cos(theta) * v
    return math.exp(-(up ** 2 / (2 * sx ** 2) + vp ** 2 / (2 * sy ** 2))) / (2 * math.pi * sx * sy)


def huber(d):
    return 0.5 * d * d if abs(d) <= 1 else abs(d) - 0.5
