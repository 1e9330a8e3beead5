# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched loss/gradient kernel; mirrors ``_kernel_py.loss_and_grad``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, erfc

cnp.import_array()

cdef double GUARD = 1e-12
cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline double smooth(double r) noexcept nogil:
    if r >= 1.0:
        return 1.0
    if r <= 0.0:
        return 0.0
    return r * r * (3.0 - 2.0 * r)


cdef inline double smooth_prime(double r) noexcept nogil:
    if r >= 1.0 or r <= 0.0:
        return 0.0
    return 6.0 * r * (1.0 - r)


cdef inline void project(const double* v, double* out, Py_ssize_t d, bint smoothed, double* r_out) noexcept nogil:
    cdef double r = 0.0, scale
    cdef Py_ssize_t i
    for i in range(d):
        r += v[i] * v[i]
    r = sqrt(r)
    r_out[0] = r
    scale = 1.0 / (r if r > GUARD else GUARD)
    if smoothed:
        scale *= smooth(r)
    for i in range(d):
        out[i] = v[i] * scale


cdef inline void project_vjp(const double* v, double r, const double* g, double* out,
                             Py_ssize_t d, bint smoothed) noexcept nogil:
    cdef double radial = 0.0, rr, S, dS
    cdef Py_ssize_t i
    rr = r if r > GUARD else 1.0
    for i in range(d):
        radial += v[i] * g[i]
    radial /= rr
    if r > GUARD:
        if smoothed:
            S = smooth(r)
            dS = smooth_prime(r)
            for i in range(d):
                out[i] = S * (g[i] - v[i] / rr * radial) / rr + dS * v[i] / rr * radial
        else:
            for i in range(d):
                out[i] = (g[i] - v[i] / rr * radial) / rr
    else:
        if smoothed:
            S = smooth(r)
            dS = smooth_prime(r)
            for i in range(d):
                out[i] = (S * g[i] + dS * v[i] * radial) / GUARD
        else:
            for i in range(d):
                out[i] = g[i] / GUARD


def loss_and_grad(const double[:, ::1] E, const double[:, ::1] P, const double[::1] q, const double[:, ::1] V,
                  const double[:, ::1] W, const double[:, ::1] U, const cnp.int64_t[:, ::1] xs,
                  const cnp.int64_t[::1] ys, bint smoothed=False, bint want_grad=True):
    cdef Py_ssize_t n = xs.shape[0], L = xs.shape[1]
    cdef Py_ssize_t p = E.shape[0], d = E.shape[1], h = W.shape[0]
    cdef Py_ssize_t b, t, i, j, v, best
    cdef double rd = sqrt(<double>d)
    cdef double acc, mx, tot, x, pdf, sg, rxi, loss_sum = 0.0, err_sum = 0.0
    cdef long correct = 0
    cdef cnp.int64_t y

    a_np = np.empty((L, d)); z_np = np.empty((L, d)); ga_np = np.empty((L, d))
    ra_np = np.empty(L); s_np = np.empty(L); gs_np = np.empty(L)
    cdef double[:, ::1] a = a_np, z = z_np, ga = ga_np
    cdef double[::1] ra = ra_np, s = s_np, gs = gs_np
    cdef double[::1] c = np.empty(d), xi = np.empty(d), xib = np.empty(d), psi = np.empty(d)
    cdef double[::1] gpsi = np.empty(d), gxib = np.empty(d), gxi = np.empty(d), gc = np.empty(d)
    cdef double[::1] tmp = np.empty(d), gzt = np.empty(d), gat = np.empty(d)
    cdef double[::1] pre = np.empty(h), act = np.empty(h), gpre = np.empty(h), cdf = np.empty(h)
    cdef double[::1] zeta = np.empty(p), mu = np.empty(p)

    dE_np = np.zeros((p, d)); dP_np = np.zeros((L, d)); dq_np = np.zeros(d)
    dV_np = np.zeros((d, d)); dW_np = np.zeros((h, d)); dU_np = np.zeros((d, h))
    cdef double[:, ::1] dE = dE_np, dP = dP_np, dV = dV_np, dW = dW_np, dU = dU_np
    cdef double[::1] dq = dq_np

    with nogil:
        for b in range(n):
            # embedding + projection
            for t in range(L):
                for i in range(d):
                    a[t, i] = E[xs[b, t], i] + P[t, i]
                project(&a[t, 0], &z[t, 0], d, smoothed, &ra[t])
            # attention
            mx = -1e308
            for t in range(L):
                acc = 0.0
                for i in range(d):
                    acc += z[t, i] * q[i]
                s[t] = acc / rd
                if s[t] > mx:
                    mx = s[t]
            tot = 0.0
            for t in range(L):
                s[t] = exp(s[t] - mx)
                tot += s[t]
            for t in range(L):
                s[t] /= tot
            for i in range(d):
                acc = 0.0
                for t in range(L):
                    acc += z[t, i] * s[t]
                c[i] = acc
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += V[i, j] * c[j]
                xi[i] = acc
            project(&xi[0], &xib[0], d, smoothed, &rxi)
            # MLP with residual
            for j in range(h):
                acc = 0.0
                for i in range(d):
                    acc += W[j, i] * xib[i]
                pre[j] = acc
                cdf[j] = 0.5 * erfc(-acc * INV_SQRT2)
                act[j] = acc * cdf[j]
            for i in range(d):
                acc = xi[i]
                for j in range(h):
                    acc += U[i, j] * act[j]
                psi[i] = acc
            # tied unembedding + softmax
            mx = -1e308
            best = 0
            for v in range(p):
                acc = 0.0
                for i in range(d):
                    acc += E[v, i] * psi[i]
                zeta[v] = acc
                if acc > mx:
                    mx = acc
                    best = v
            tot = 0.0
            for v in range(p):
                mu[v] = exp(zeta[v] - mx)
                tot += mu[v]
            for v in range(p):
                mu[v] /= tot
            y = ys[b]
            loss_sum += log(tot) - (zeta[y] - mx)
            err_sum += 1.0 - mu[y]
            if best == y:
                correct += 1
            if not want_grad:
                continue

            # backward
            mu[y] -= 1.0
            for i in range(d):
                acc = 0.0
                for v in range(p):
                    dE[v, i] += mu[v] * psi[i]
                    acc += mu[v] * E[v, i]
                gpsi[i] = acc
            for j in range(h):
                acc = 0.0
                for i in range(d):
                    dU[i, j] += gpsi[i] * act[j]
                    acc += U[i, j] * gpsi[i]
                x = pre[j]
                pdf = INV_SQRT_2PI * exp(-0.5 * x * x)
                gpre[j] = acc * (cdf[j] + x * pdf)
            for i in range(d):
                acc = 0.0
                for j in range(h):
                    dW[j, i] += gpre[j] * xib[i]
                    acc += W[j, i] * gpre[j]
                gxib[i] = acc
            project_vjp(&xi[0], rxi, &gxib[0], &tmp[0], d, smoothed)
            for i in range(d):
                gxi[i] = gpsi[i] + tmp[i]
            for i in range(d):
                for j in range(d):
                    dV[i, j] += gxi[i] * c[j]
            for j in range(d):
                acc = 0.0
                for i in range(d):
                    acc += V[i, j] * gxi[i]
                gc[j] = acc
            sg = 0.0
            for t in range(L):
                acc = 0.0
                for i in range(d):
                    acc += z[t, i] * gc[i]
                gs[t] = acc
                sg += s[t] * acc
            for t in range(L):
                gs[t] = s[t] * (gs[t] - sg) / rd
                for i in range(d):
                    dq[i] += gs[t] * z[t, i]
                    gzt[i] = s[t] * gc[i] + gs[t] * q[i]
                project_vjp(&a[t, 0], ra[t], &gzt[0], &gat[0], d, smoothed)
                for i in range(d):
                    dP[t, i] += gat[i]
                    dE[xs[b, t], i] += gat[i]

    if not want_grad:
        return loss_sum, correct, err_sum, None
    return loss_sum, correct, err_sum, (dE_np, dP_np, dq_np, dV_np, dW_np, dU_np)
