"""Independent reference computations used by the tests."""
import itertools

import numpy as np


def nodal_stiffness(d, N, M, L):
    """Assemble the weighted graph Laplacian node by node (no Kronecker products)."""
    shape = (N + 1,) * (d - 1) + (M + 1,)
    h = [L / N] * (d - 1) + [L / M]
    nodes = list(np.ndindex(*shape))
    index = {p: i for i, p in enumerate(nodes)}
    K = np.zeros((len(nodes), len(nodes)))

    def width(a, i):
        return h[a] * (0.5 if i in (0, shape[a] - 1) else 1.0)

    for p in nodes:
        for a in range(d):
            if p[a] + 1 >= shape[a]:
                continue
            q = list(p)
            q[a] += 1
            q = tuple(q)
            area = np.prod([width(b, p[b]) for b in range(d) if b != a])
            c = area / h[a]
            i, j = index[p], index[q]
            K[i, i] += c
            K[j, j] += c
            K[i, j] -= c
            K[j, i] -= c
    return K, shape


def relaxed_qp(K, F_gamma, bottom_idx, w, lo=-1.0, hi=1.0):
    """min 1/2 F' K^+ F over bottom fluxes s in [lo, hi] with sum w s = sum F_gamma.

    F = F_gamma - w s on bottom nodes.  Exhaustive enumeration of which
    constraints are active; each face solves an equality-constrained QP.
    """
    Kp = np.linalg.pinv(K)
    n = len(bottom_idx)
    P = np.zeros((K.shape[0], n))
    P[bottom_idx, np.arange(n)] = -w
    # energy(s) = 1/2 (F_gamma + P s)' Kp (F_gamma + P s)
    H = P.T @ Kp @ P
    c = P.T @ Kp @ F_gamma
    e0 = 0.5 * F_gamma @ Kp @ F_gamma
    G = F_gamma.sum()
    best = np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pattern = np.array(pattern)
        fixed = pattern != 2
        s = np.where(pattern == 0, lo, hi).astype(float)
        free = ~fixed
        if free.any():
            nf = free.sum()
            A = np.zeros((nf + 1, nf + 1))
            A[:nf, :nf] = H[np.ix_(free, free)]
            A[:nf, nf] = w[free]
            A[nf, :nf] = w[free]
            rhs = np.zeros(nf + 1)
            rhs[:nf] = -(c[free] + H[np.ix_(free, fixed)] @ s[fixed])
            rhs[nf] = G - w[fixed] @ s[fixed]
            sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
            s[free] = sol[:nf]
        if abs(w @ s - G) > 1e-9 or np.any(s < lo - 1e-9) or np.any(s > hi + 1e-9):
            continue
        val = e0 + c @ s + 0.5 * s @ H @ s
        best = min(best, val)
    return best


def square_wave_sigma(period, L, h):
    """Per-area periodic stripe energy: 4/p jumps plus sum_q M(k_q) |c_q|^2.

    The coefficients come from a direct DFT sum over one sampled period
    (no FFT, no closed form); M is the Dirichlet-top slab multiplier.
    """
    m = int(round(period / h))
    x = (np.arange(m) + 0.5) * h
    vals = np.where(x < period / 2, 1.0, -1.0)
    j = np.arange(m)
    total = 0.0
    for q in range(-(m // 2) + 1, m // 2 + 1):
        c = np.sum(vals * np.exp(-2j * np.pi * q * j / m)) / m
        k = 2 * np.pi * abs(q) / period
        mult = L / 2 if k == 0 else np.tanh(k * L) / (2 * k)
        total += mult * abs(c) ** 2
    return 4.0 / period + total
