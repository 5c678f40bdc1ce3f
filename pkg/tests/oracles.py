"""Independent re-implementations used as test oracles.

Kept deliberately naive: scalar loops and literal formulas, no shared code
with the package.
"""
import math

import numpy as np


def roll_plane_derivative(state, u, m=580.0, mt1=36.26, mt2=36.26, I=63.3316,
                          L=1.524, c=(710.70, 710.70), cn=(0.71, 0.71),
                          k=(19357.2, 19357.2), kn=(15000.0, 15000.0),
                          kt=(96319.76, 96319.76)):
    q1, q2, q3, q4, d1, d2, d3, d4 = [float(x) for x in state]

    def FK(s, x):
        return k[s] * x + kn[s] * x ** 3

    def FC(s, x):
        return c[s] * x + cn[s] * (0.2 * math.tanh(10 * x))

    M = np.array([[m / 2, m / 2, 0, 0],
                  [-I / L, I / L, 0, 0],
                  [0, 0, mt1, 0],
                  [0, 0, 0, mt2]])
    fK = np.array([
        FK(0, q1 - q3) + FK(1, q2 - q4),
        L / 2 * (FK(1, q2 - q4) - FK(0, q1 - q3)),
        FK(0, q3 - q1) + kt[0] * q3,
        FK(1, q4 - q2) + kt[1] * q4,
    ])
    fC = np.array([
        FC(0, d1 - d3) + FC(1, d2 - d4),
        L / 2 * (FC(0, d3 - d1) - FC(1, d4 - d2)),
        FC(0, d3 - d1),
        FC(1, d4 - d2),
    ])
    fU = np.array([0.0, 0.0, kt[0] * u[0], kt[1] * u[1]])
    qdd = np.linalg.solve(M, fU - fK - fC)
    return np.array([d1, d2, d3, d4, *qdd])


def multisine_value(a, w, phi, t):
    total = 0.0
    for al, wl, pl in zip(a, w, phi):
        total += al * math.sin(wl * t + pl)
    return max(a) / sum(a) * total


def filter_residuals(A, B1, B2, C1, D11, D12, C2, D21, D22, bz, bv, br, U):
    """Scalar-loop rollout from the zero state."""
    nz, nv = A.shape[0], D11.shape[0]
    z = [0.0] * nz
    out = []
    for u in U:
        w = [0.0] * nv
        for i in range(nv):
            s = bv[i] + sum(C1[i, j] * z[j] for j in range(nz))
            s += sum(D12[i, j] * u[j] for j in range(len(u)))
            s += sum(D11[i, j] * w[j] for j in range(i))
            w[i] = math.tanh(s)
        r = br + sum(C2[0, j] * z[j] for j in range(nz))
        r += sum(D21[0, j] * w[j] for j in range(nv))
        r += sum(D22[0, j] * u[j] for j in range(len(u)))
        out.append(r)
        z = [bz[i] + sum(A[i, j] * z[j] for j in range(nz))
             + sum(B1[i, j] * w[j] for j in range(nv))
             + sum(B2[i, j] * u[j] for j in range(len(u))) for i in range(nz)]
    return np.array(out)
