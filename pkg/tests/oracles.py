"""Independent reference implementations shared by the test modules."""
import math

import numpy as np

FS = 16000


def mirror_images(room, src, order):
    """Breadth-first mirroring of the source across the six walls.

    Returns {rounded position: (position, reflection product)}.  Walls are
    x=0, x=Lx, y=0, ... in that order; a wall is never hit twice in a row.
    """
    L = room.dims
    beta = np.sqrt(1.0 - np.asarray(room.absorption))
    found = {}
    frontier = [(np.asarray(src, float), 1.0, -1)]
    key = tuple(np.round(frontier[0][0], 9))
    found[key] = (frontier[0][0], 1.0)
    for _ in range(order):
        nxt = []
        for pos, amp, last in frontier:
            for wall in range(6):
                if wall == last:
                    continue
                ax, hi = divmod(wall, 2)
                p = pos.copy()
                p[ax] = 2 * L[ax] - p[ax] if hi else -p[ax]
                k = tuple(np.round(p, 9))
                if k in found:
                    continue
                a = amp * beta[wall]
                found[k] = (p, a)
                nxt.append((p, a, wall))
        frontier = nxt
    return found


def oracle_rir(room, src, rcv, fs=FS):
    imgs = mirror_images(room, src, room.max_order)
    contrib = []
    for p, a in imgs.values():
        if a == 0:
            continue
        d = float(np.linalg.norm(p - np.asarray(rcv)))
        contrib.append((int(round(d / room.speed_of_sound * fs)), a / (4 * math.pi * d), d))
    n = int(math.ceil(max(c[2] for c in contrib) / room.speed_of_sound * fs)) + 64
    h = np.zeros(n)
    for k, v, _ in contrib:
        h[k] += v
    return h


def regressors(y, order):
    """Rows u(t) = [y(t), y(t-1), ..., y(t-order+1)] with zero history."""
    X = np.zeros((y.size, order))
    for k in range(order):
        X[k:, k] = y[: y.size - k]
    return X


def geometric_series(s, gain, delay):
    """Mic signal of a single pure-delay loop with loop gain ``gain`` and round trip ``delay``."""
    out = np.zeros(s.size)
    for n in range(s.size // delay + 1):
        out[n * delay:] += gain**n * s[: s.size - n * delay]
    return out
