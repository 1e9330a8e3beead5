"""Independent oracles and hand-built fixtures shared by the test modules."""
import math

import numpy as np

from sparsemod.model import HyperParams, ModelParams
from sparsemod.task import TaskSpec, sample_dataset


def jacobi_singular_values(a, tol=1e-15, max_sweeps=100):
    """One-sided Jacobi SVD; returns singular values in descending order.

    Rotates column pairs until all are mutually orthogonal, then reads the
    column norms.  Shares no code with numpy.linalg or the power iteration.
    """
    u = np.array(a, dtype=float, copy=True)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = u[:, i] @ u[:, i]
                beta = u[:, j] @ u[:, j]
                gamma = u[:, i] @ u[:, j]
                if gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1 + zeta * zeta))
                c = 1 / math.sqrt(1 + t * t)
                s = c * t
                ui = u[:, i].copy()
                u[:, i] = c * ui - s * u[:, j]
                u[:, j] = s * ui + c * u[:, j]
        if off < tol:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def near_tight_bound_params(w=100.0):
    """Weights at which the gradient norm sits just under the bound.

    Tokens embed at (-1, -1) and (1, 1) so B = 1.  A tiny rank-one V fixes
    the direction of xi so the MLP Jacobian term vanishes, and a single
    strong hidden unit pushes every sample towards class 1.  On a batch whose
    targets are all 0 the gradient is then dominated by the U block, which is
    within about 1% of the bound.
    """
    spec = TaskSpec()
    E = np.array([[-1.0, -1.0], [1.0, 1.0]])
    P = np.zeros((spec.L, 2))
    P[:, 0] = 10.0
    P[:, 1] = np.linspace(-1.0, 1.0, spec.L)
    V = 1e-6 * np.outer([1.0, 0.0], [1.0, 0.0])
    W = np.zeros((32, 2))
    W[0, 0] = w
    U = np.zeros((2, 32))
    U[:, 0] = (3.5 / w) / math.sqrt(2)
    params = ModelParams(E=E, P=P, q=np.zeros(2), V=V, W=W, U=U)
    ds = sample_dataset(512, spec, 0)
    return params, ds.subset(np.flatnonzero(ds.targets == 0))


def small_hyper(d=2, h=8, L=6, k=3, p=2, **kw):
    return HyperParams(d=d, h=h, spec=TaskSpec(L=L, k=k, p=p), **kw)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
