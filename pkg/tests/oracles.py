"""Independent reference computations shared by the test modules.

Everything here is written with plain loops / math so it shares no code path
with the package implementations it checks.
"""

import math


def ccc_two_pass(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * sxy / (vx + vy + (mx - my) ** 2)


def pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return sxy / (sx * sy)


def mse_direct(x, y):
    return sum((a - b) ** 2 for a, b in zip(x, y)) / len(x)


def gaussian_cell(t, g, delta, sigma, n, N):
    mu = g + (n - (N + 1) / 2) * delta
    return math.exp(-((t - mu) ** 2) / (2 * sigma**2))


def sampling_matrix_direct(g, delta, sigma, N, T):
    rows = []
    for n in range(1, N + 1):
        row = [gaussian_cell(t, g, delta, sigma, n, N) for t in range(T)]
        s = sum(row)
        rows.append([v / s for v in row])
    return rows


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
