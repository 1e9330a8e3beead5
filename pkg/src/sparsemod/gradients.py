"""Three gradient engines for the cross-entropy loss and a cross-check report.

* ``backprop_loss_gradient``: reverse mode through the whole network,
  embeddings included (runs on the batched kernel).
* ``closed_form_loss_gradient``: the per-logit block formulas for q, V, W, U
  with frozen embeddings, weighted by the residual ``mu - onehot(y)``.
* ``finite_difference_gradient``: central differences of the loss, evaluated
  by a standalone stacked forward pass.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel
from . import numerics as nx
from .errors import DegenerateXi, EmptyDataset
from .model import PARAM_NAMES, ModelParams, forward_batch

ATTN_MLP = frozenset({"q", "V", "W", "U"})
ALL_PARAMS = frozenset(PARAM_NAMES)
XI_MIN_NORM = 1e-9


@dataclass
class GradientSet:
    dE: np.ndarray
    dP: np.ndarray
    dq: np.ndarray
    dV: np.ndarray
    dW: np.ndarray
    dU: np.ndarray
    mask: frozenset = ALL_PARAMS

    def __post_init__(self):
        self.mask = frozenset(self.mask)
        for name in PARAM_NAMES:
            if name not in self.mask:
                getattr(self, "d" + name)[...] = 0.0

    @classmethod
    def zeros_like(cls, params, mask=ALL_PARAMS):
        return cls(*(np.zeros_like(a) for _, a in params.items()), mask=mask)

    def __getitem__(self, name):
        return getattr(self, "d" + name)

    def __setitem__(self, name, value):
        setattr(self, "d" + name, value)

    def items(self):
        return [(n, self[n]) for n in PARAM_NAMES]

    def norm(self, names=PARAM_NAMES):
        return float(math.sqrt(sum(float(np.sum(self[n] ** 2)) for n in names)))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.items())

    def copy(self):
        return GradientSet(*(a.copy() for _, a in self.items()), mask=self.mask)


def _check_batch(batch):
    if len(batch) == 0:
        raise EmptyDataset("gradient of an empty batch")


# --- reverse mode -----------------------------------------------------------

def backprop_loss_gradient(params, batch, mask=ALL_PARAMS, smoothed=False):
    """Exact gradient of the mean loss; ``dE`` sums the embedding and unembedding paths."""
    _check_batch(batch)
    _, _, _, grads = kernel.loss_and_grad(params, batch.inputs, batch.targets, smoothed)
    n = len(batch)
    return GradientSet(*(g / n for g in grads), mask=mask)


# --- closed form ------------------------------------------------------------

@dataclass
class LemmaBlocks:
    delta_z: np.ndarray      # (d, L)
    a_z: np.ndarray          # (L, L) diagonal
    sigma_xibar: np.ndarray  # (h, h) diagonal
    m_proj: np.ndarray       # (d, d)
    q_mat: np.ndarray        # (d, d)
    c_x: np.ndarray = None   # (d,) residual-weighted token embedding, needs a label


def _blocks_batch(params, tr, sample_offset=0):
    """Batched block matrices; every array has a leading sample axis."""
    n, d, L = tr.z.shape
    xi_norm = np.linalg.norm(tr.xi, axis=-1)
    bad = np.flatnonzero(xi_norm <= XI_MIN_NORM)
    if bad.size:
        i = int(bad[0]) + sample_offset
        raise DegenerateXi(f"|xi| = {xi_norm[bad[0]]:.3g} <= {XI_MIN_NORM} at sample {i}", i)
    s = tr.attn
    centering = np.eye(L)[None] - s[:, :, None] * np.ones(L)[None, None, :]
    delta_z = tr.z @ centering / math.sqrt(d)
    a_z = s[:, :, None] * np.eye(L)[None]
    sigma = nx.gelu_prime(tr.act_pre)[:, :, None] * np.eye(params.h)[None]
    xb = tr.xi_bar
    m_proj = (np.eye(d)[None] - xb[:, :, None] * xb[:, None, :]) / xi_norm[:, None, None]
    q_mat = params.U[None] @ sigma @ params.W[None] @ m_proj
    return delta_z, a_z, sigma, m_proj, q_mat


def lemma_blocks(params, trace, y=None):
    """Block matrices of the closed-form gradient for one forward trace.

    ``c_x`` is filled when the label ``y`` is given.
    """
    tr = _batched(trace)
    blocks = [b[0] for b in _blocks_batch(params, tr)]
    c_x = None
    if y is not None:
        resid = trace.mu.copy()
        resid[y] -= 1.0
        c_x = resid @ params.E
    return LemmaBlocks(*blocks, c_x=c_x)


def _batched(trace):
    from .model import ForwardTrace
    return ForwardTrace(**{k: np.asarray(v)[None] for k, v in vars(trace).items()})


def _logit_grads_batch(params, tr, blocks, j):
    delta_z, a_z, sigma, _, q_mat = blocks
    e_j = params.E[j]
    d = params.d
    vz = params.V[None] @ tr.z                                 # (n, d, L)
    perturbed = (np.eye(d)[None] + np.swapaxes(q_mat, 1, 2)) @ e_j   # (n, d)
    dq = (delta_z @ a_z @ np.swapaxes(vz, 1, 2) @ perturbed[:, :, None])[:, :, 0]
    pooled = (tr.z @ tr.attn[:, :, None])[:, :, 0]
    dV = perturbed[:, :, None] * pooled[:, None, :]
    dW = (sigma @ (params.U.T @ e_j))[:, :, None] * tr.xi_bar[:, None, :]
    dU = e_j[None, :, None] * nx.gelu(tr.act_pre)[:, None, :]
    return dq, dV, dW, dU


def closed_form_logit_grads(params, trace, j):
    """Gradients of logit ``j`` with respect to q, V, W and U for one trace."""
    tr = _batched(trace)
    blocks = _blocks_batch(params, tr)
    return tuple(g[0] for g in _logit_grads_batch(params, tr, blocks, j))


def query_grad_proof_form(params, trace, j):
    """Query gradient written as ``Delta A [(I + Q) V z]^T E(j)``."""
    b = lemma_blocks(params, trace)
    inner = (np.eye(params.d) + b.q_mat) @ params.V @ trace.z
    return b.delta_z @ b.a_z @ inner.T @ params.E[j]


def closed_form_loss_gradient(params, batch, chunk=4096):
    """Mean over the batch of ``sum_j (mu_j - 1{y=j}) * grad zeta_j``; dE = dP = 0."""
    _check_batch(batch)
    out = GradientSet.zeros_like(params, mask=ATTN_MLP)
    n = len(batch)
    for start in range(0, n, chunk):
        xs = batch.inputs[start:start + chunk]
        ys = batch.targets[start:start + chunk]
        tr = forward_batch(params, xs)
        blocks = _blocks_batch(params, tr, sample_offset=start)
        resid = tr.mu.copy()
        resid[np.arange(len(ys)), ys] -= 1.0
        for j in range(params.p):
            grads = _logit_grads_batch(params, tr, blocks, j)
            w = resid[:, j]
            for name, g in zip(("q", "V", "W", "U"), grads):
                out[name] += np.tensordot(w, g, axes=(0, 0))
    for name in ATTN_MLP:
        out[name] /= n
    return out


# --- finite differences -----------------------------------------------------

def _rmatmul(x, m):
    """``x @ m^T`` for stacks ``x`` (Kx, n, a) and ``m`` (Km, b, a) with Kx or Km equal to 1.

    Folding the stack axis into one GEMM is much faster than a batched matmul.
    """
    kx, n, a = x.shape
    km, rows, _ = m.shape
    if km == 1:
        return (x.reshape(kx * n, a) @ m[0].T).reshape(kx, n, rows)
    if kx == 1:
        return np.swapaxes((m.reshape(km * rows, a) @ x[0].T).reshape(km, rows, n), 1, 2)
    return x @ np.swapaxes(m, -1, -2)


def _stacked_losses(params, name, perturbed, xs, ys, smoothed):
    """Mean loss for each of ``K`` variants of tensor ``name`` (others held fixed).

    Stages upstream of ``name`` are evaluated once and broadcast over variants.
    """
    arrs = {k: a[None] for k, a in params.items()}
    arrs[name] = perturbed
    E, P, q, V, W, U = (arrs[k] for k in PARAM_NAMES)
    d = params.d
    proj = nx.smoothed_normalize if smoothed else nx.normalize
    if name in ("E", "P"):
        z = proj(E[:, xs] + P[:, None])                        # (K, n, L, d)
    else:
        z = proj(params.E[xs] + params.P[None])[None]          # (1, n, L, d)
    if name in ("E", "P", "q"):
        logits = (z @ q[:, None, :, None])[..., 0] / math.sqrt(d)
        attn = nx.softmax(logits, axis=-1)
        pooled = (attn[..., None, :] @ z)[..., 0, :]           # (K, n, d)
    else:
        attn = nx.softmax(z[0] @ params.q / math.sqrt(d), axis=-1)
        pooled = np.einsum("nl,nld->nd", attn, z[0])[None]
    xi = _rmatmul(pooled, V)
    act = nx.gelu(_rmatmul(proj(xi), W))
    psi = xi + _rmatmul(act, U)
    zeta = _rmatmul(psi, E)                                    # (K, n, p)
    logp = nx.log_softmax(zeta, axis=-1)
    picked = np.take_along_axis(logp, np.broadcast_to(ys[None, :, None], logp.shape[:2] + (1,)), -1)
    return -picked[..., 0].mean(axis=-1)


def _proj_scale(r, smoothed):
    """Factor ``c(|v|)`` with ``project(v) = c * v`` for either normalisation."""
    c = 1.0 / np.maximum(r, nx.NORM_GUARD)
    return nx.smoothstep(r) * c if smoothed else c


def _base_stages(params, xs, smoothed):
    proj = nx.smoothed_normalize if smoothed else nx.normalize
    z = proj(params.E[xs] + params.P[None])
    attn = nx.softmax(z @ params.q / math.sqrt(params.d), axis=-1)
    pooled = np.einsum("nl,nld->nd", attn, z)
    xi = pooled @ params.V.T
    xi_bar = xi * _proj_scale(np.linalg.norm(xi, axis=-1), smoothed)[:, None]
    pre = xi_bar @ params.W.T
    act = nx.gelu(pre)
    psi = xi + act @ params.U.T
    return {"pooled": pooled, "xi": xi, "xi_bar": xi_bar, "pre": pre, "act": act,
            "psi": psi, "zeta": psi @ params.E.T}


def _mean_nll(zeta, ys):
    logp = nx.log_softmax(zeta, axis=-1)
    return -logp[:, np.arange(len(ys)), ys].mean(axis=-1)


def _coordinate_losses(params, name, idx, delta, st, ys, smoothed):
    """Loss after adding ``delta[k]`` to flat entry ``idx[k]`` of V, W or U.

    One entry of these matrices moves the activations by a rank-one amount,
    so the perturbed forward pass is rebuilt from the cached base stages.
    """
    rows, cols = np.unravel_index(idx, getattr(params, name).shape)
    k, n = len(idx), len(ys)
    E, W, U = params.E, params.W, params.U
    if name == "U":
        shift = delta[:, None] * st["act"][:, cols].T                       # (K, n)
        return _mean_nll(st["zeta"][None] + shift[:, :, None] * E[:, rows].T[:, None, :], ys)
    if name == "W":
        pre_i = st["pre"][:, rows].T + delta[:, None] * st["xi_bar"][:, cols].T
        d_act = nx.gelu(pre_i) - st["act"][:, rows].T
        return _mean_nll(st["zeta"][None] + d_act[:, :, None] * (E @ U[:, rows]).T[:, None, :], ys)
    # V: one coordinate of xi moves, then the projection rescales the whole vector
    shift = delta[:, None] * st["pooled"][:, cols].T                        # (K, n)
    xi_i = st["xi"][:, rows].T                                               # (K, n)
    r2 = np.sum(st["xi"] ** 2, axis=-1)[None] + shift * (2.0 * xi_i + shift)
    c = _proj_scale(np.sqrt(np.maximum(r2, 0.0)), smoothed)
    xi_w = (st["xi"] @ W.T)[None] + shift[:, :, None] * W[:, rows].T[:, None, :]
    act = nx.gelu(c[:, :, None] * xi_w)                                      # (K, n, h)
    zeta = (st["xi"] @ E.T)[None] + shift[:, :, None] * E[:, rows].T[:, None, :]
    zeta = zeta + (act.reshape(k * n, -1) @ (E @ U).T).reshape(k, n, -1)
    return _mean_nll(zeta, ys)


def finite_difference_gradient(params, batch, step=1e-5, mask=ALL_PARAMS, smoothed=False,
                               max_elements=2_000_000):
    """Central differences ``(L(t + s e_i) - L(t - s e_i)) / 2s`` for every unmasked coordinate."""
    _check_batch(batch)
    if step <= 0:
        raise ValueError("step must be positive")
    xs, ys = batch.inputs, batch.targets
    out = GradientSet.zeros_like(params, mask=mask)
    n, L = xs.shape
    stages = _base_stages(params, xs, smoothed) if mask & {"V", "W", "U"} else None
    for name in PARAM_NAMES:
        if name not in mask:
            continue
        base = getattr(params, name)
        size = base.size
        # memory per variant: full sequences upstream of the pooling, vectors after it
        upstream = n * L * params.d if name in ("E", "P", "q") else 0
        per_variant = upstream + n * (2 * params.d + params.h + params.p)
        chunk = max(1, max_elements // per_variant)
        flat_grad = np.empty(size)
        for start in range(0, size, chunk):
            idx = np.arange(start, min(size, start + chunk))
            k = len(idx)
            if name in ("V", "W", "U"):
                lp = _coordinate_losses(params, name, idx, np.full(k, step), stages, ys, smoothed)
                lm = _coordinate_losses(params, name, idx, np.full(k, -step), stages, ys, smoothed)
            else:
                plus = np.repeat(base.ravel()[None], k, axis=0)
                minus = plus.copy()
                plus[np.arange(k), idx] += step
                minus[np.arange(k), idx] -= step
                shape = (k,) + base.shape
                lp = _stacked_losses(params, name, plus.reshape(shape), xs, ys, smoothed)
                lm = _stacked_losses(params, name, minus.reshape(shape), xs, ys, smoothed)
            flat_grad[idx] = (lp - lm) / (2.0 * step)
        out[name][...] = flat_grad.reshape(base.shape)
    return out


# --- cross-check ------------------------------------------------------------

def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), 1e-8)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


@dataclass
class CheckReport:
    """Per-tensor max relative error for each engine pair."""

    errors: dict = field(default_factory=dict)   # pair -> tensor -> error
    tolerances: dict = field(default_factory=dict)
    n_checks: int = 0

    def merge(self, pair, tensor, err):
        slot = self.errors.setdefault(pair, {})
        slot[tensor] = max(slot.get(tensor, 0.0), err)

    def failures(self):
        return sorted(
            (pair, t) for pair, per in self.errors.items()
            for t, e in per.items() if not e <= self.tolerances[pair]
        )

    @property
    def passed(self):
        return not self.failures()

    def to_dict(self):
        return {
            "passed": self.passed,
            "n_checks": self.n_checks,
            "tolerances": self.tolerances,
            "max_rel_error": self.errors,
            "failures": [list(f) for f in self.failures()],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


DEFAULT_TOLERANCES = {
    "closed_form_vs_backprop": 1e-10,
    "closed_form_vs_fd": 1e-6,
    "backprop_vs_fd": 1e-6,
}


def gradient_check(params, batch, tolerances=None, step=1e-5, report=None, engines=None):
    """Compare the three engines on q, V, W, U and accumulate into ``report``.

    ``engines`` may supply precomputed gradients (keys ``closed_form``,
    ``backprop``, ``fd``); used for fault-injection tests.
    """
    tol = dict(DEFAULT_TOLERANCES, **(tolerances or {}))
    report = report or CheckReport(tolerances=tol)
    for pair, t in tol.items():
        report.tolerances.setdefault(pair, t)
    engines = dict(engines or {})
    if "closed_form" not in engines:
        engines["closed_form"] = closed_form_loss_gradient(params, batch)
    if "backprop" not in engines:
        engines["backprop"] = backprop_loss_gradient(params, batch, mask=ATTN_MLP)
    if "fd" not in engines:
        engines["fd"] = finite_difference_gradient(params, batch, step=step, mask=ATTN_MLP)
    pairs = {
        "closed_form_vs_backprop": ("closed_form", "backprop"),
        "closed_form_vs_fd": ("closed_form", "fd"),
        "backprop_vs_fd": ("backprop", "fd"),
    }
    for pair, (a, b) in pairs.items():
        for name in sorted(ATTN_MLP, key=PARAM_NAMES.index):
            report.merge(pair, name, relative_error(engines[a][name], engines[b][name]))
    report.n_checks += 1
    return report
