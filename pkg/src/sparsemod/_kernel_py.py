"""Numpy implementation of the batched loss/gradient kernel.

Same contract as the compiled ``_kernel`` extension; used when the extension
is unavailable or when ``SPARSEMOD_KERNEL=python`` is set.
"""
import math

import numpy as np

from .numerics import NORM_GUARD, gelu, gelu_prime, smoothstep, smoothstep_prime


def _project(v, smoothed):
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    out = v / np.maximum(r, NORM_GUARD)
    if smoothed:
        out = smoothstep(r) * out
    return out, r


def _project_vjp(v, r, g, smoothed):
    """Vector-Jacobian product of the (smoothed) sphere projection at ``v``."""
    big = r > NORM_GUARD
    rr = np.where(big, r, 1.0)
    vbar = v / rr
    radial = np.sum(vbar * g, axis=-1, keepdims=True)
    tangential = np.where(big, (g - vbar * radial) / rr, g / NORM_GUARD)
    if not smoothed:
        return tangential
    S = smoothstep(r)
    dS = smoothstep_prime(r)
    return np.where(big, S * tangential + dS * vbar * radial, (S * g + dS * v * radial) / NORM_GUARD)


def loss_and_grad(E, P, q, V, W, U, xs, ys, smoothed=False, want_grad=True):
    """Sums over the batch.

    Returns ``(loss_sum, n_correct, err_sum, grads)`` where ``err_sum`` is the
    sum of ``1 - mu_y`` and ``grads`` is ``(dE, dP, dq, dV, dW, dU)`` of the
    summed loss, or ``None`` when ``want_grad`` is false.
    """
    n, L = xs.shape
    p, d = E.shape
    rd = math.sqrt(d)
    a = E[xs] + P[None, :, :]
    z, ra = _project(a, smoothed)
    logits = z @ q / rd
    logits = logits - logits.max(axis=1, keepdims=True)
    s = np.exp(logits)
    s /= s.sum(axis=1, keepdims=True)
    c = np.einsum("nl,nld->nd", s, z)
    xi = c @ V.T
    xib, rxi = _project(xi, smoothed)
    pre = xib @ W.T
    act = gelu(pre)
    psi = xi + act @ U.T
    zeta = psi @ E.T
    zs = zeta - zeta.max(axis=1, keepdims=True)
    ez = np.exp(zs)
    tot = ez.sum(axis=1)
    mu = ez / tot[:, None]
    rows = np.arange(n)
    loss_sum = float(np.sum(np.log(tot) - zs[rows, ys]))
    correct = int(np.sum(np.argmax(zeta, axis=1) == ys))
    err_sum = float(np.sum(1.0 - mu[rows, ys]))
    if not want_grad:
        return loss_sum, correct, err_sum, None

    gzeta = mu.copy()
    gzeta[rows, ys] -= 1.0
    dE = gzeta.T @ psi
    gpsi = gzeta @ E
    dU = gpsi.T @ act
    gpre = (gpsi @ U) * gelu_prime(pre)
    dW = gpre.T @ xib
    gxi = gpsi + _project_vjp(xi, rxi, gpre @ W, smoothed)
    dV = gxi.T @ c
    gc = gxi @ V
    gs = z @ gc[:, :, None]
    gs = gs[:, :, 0]
    glog = s * (gs - np.sum(s * gs, axis=1, keepdims=True)) / rd
    dq = np.einsum("nl,nld->d", glog, z)
    gz = s[:, :, None] * gc[:, None, :] + glog[:, :, None] * q[None, None, :]
    ga = _project_vjp(a, ra, gz, smoothed)
    dP = ga.sum(axis=0)
    onehot = (xs[:, :, None] == np.arange(p)[None, None, :]).astype(np.float64)
    dE += np.einsum("nlp,nld->pd", onehot, ga)
    return loss_sum, correct, err_sum, (dE, dP, dq, dV, dW, dU)
