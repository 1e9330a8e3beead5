"""Gradient norms, the error term and gradient bound, sparsity, clusters, loss events."""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import numerics as nx
from .errors import BoundViolation, EmptyDataset, EmptyProbeSet, TooFewRows
from .model import PARAM_NAMES, forward_batch


def per_layer_grad_norms(grads):
    return {n: float(np.linalg.norm(grads[n])) for n in PARAM_NAMES}


def _tv_to_onehot(mu, ys):
    resid = mu.copy()
    resid[np.arange(len(ys)), ys] -= 1.0
    return 0.5 * np.sum(np.abs(resid), axis=-1)


def classification_error(params, dataset, smoothed=False):
    """Mean total-variation distance between predictions and the one-hot labels."""
    if len(dataset) == 0:
        raise EmptyDataset("classification_error on an empty dataset")
    mu = forward_batch(params, dataset.inputs, smoothed).mu
    return float(np.mean(_tv_to_onehot(mu, dataset.targets)))


def bound_terms(params, seq_len=None, B=None):
    seq_len = params.L if seq_len is None else seq_len
    B = float(np.max(np.abs(params.E))) if B is None else B
    v = nx.operator_norm(params.V)
    w = nx.operator_norm(params.W)
    u = nx.operator_norm(params.U)
    d = params.d
    inner = (
        (2 * seq_len * math.sqrt(d) * v * (1 + math.sqrt(2 / math.pi) * w * w * u)) ** 2
        + d * (1 + 2 * w * u) ** 2
        + 4 * u * u
        + w * w
    )
    return B, {"V": v, "W": w, "U": u}, math.sqrt(4 * d * B * B * inner)


def bound_constant(params, seq_len=None, B=None):
    """Factor ``b`` with ``|grad_{q,V,W,U} L| <= b * sqrt(error_term)`` for frozen embeddings.

    ``seq_len`` stands in for the number of attended columns; it defaults to L.
    """
    return bound_terms(params, seq_len, B)[2]


@dataclass
class BoundReport:
    grad_norm: float
    error_term: float
    B: float
    op_norms: dict
    b_tilde: float
    slack: float

    @property
    def holds(self):
        return self.slack >= -1e-9


BOUND_SLACK = 1e-9


def assert_bound(grad_norm, error_term, params, b_scale=1.0, epoch=None):
    """Raise BoundViolation unless ``grad_norm <= b * sqrt(error_term) + 1e-9``.

    ``b_scale`` multiplies B (the largest embedding entry); 0.5 gives the violation fixture.
    Returns the bound value.
    """
    B = b_scale * float(np.max(np.abs(params.E)))
    bound = bound_constant(params, B=B) * math.sqrt(max(error_term, 0.0))
    if not grad_norm <= bound + BOUND_SLACK:
        where = "" if epoch is None else f"epoch {epoch}: "
        raise BoundViolation(f"{where}gradient norm {grad_norm:.6g} exceeds bound {bound:.6g}")
    return bound


def gradient_bound(params, dataset, B=None):
    from .gradients import closed_form_loss_gradient

    err = classification_error(params, dataset)
    B, ops, b_tilde = bound_terms(params, B=B)
    grad_norm = closed_form_loss_gradient(params, dataset).norm(("q", "V", "W", "U"))
    return BoundReport(grad_norm, err, B, ops, b_tilde, b_tilde * math.sqrt(err) - grad_norm)


def activation_sparsity(params, dataset, epsilon, smoothed=False):
    """Fraction of MLP activations with absolute value below ``epsilon``."""
    if len(dataset) == 0:
        raise EmptyDataset("activation_sparsity on an empty dataset")
    act = np.abs(forward_batch(params, dataset.inputs, smoothed).act)
    eps = np.atleast_1d(np.asarray(epsilon, dtype=np.float64))
    if np.any(eps <= 0):
        raise ValueError("epsilon must be positive")
    flat = np.sort(act.ravel())
    frac = np.searchsorted(flat, eps, side="left") / flat.size
    return float(frac[0]) if np.ndim(epsilon) == 0 else frac


SPARSITY_GRID = np.logspace(-5, 2, 29)


@dataclass
class ClusterReport:
    centroids: dict          # prefix class -> centroid of xi
    within_max: float
    within_mean: float
    between_min: float
    between_mean: float
    detected: int
    threshold: float

    def to_dict(self):
        out = asdict(self)
        out["centroids"] = {",".join(map(str, k)): list(map(float, v)) for k, v in self.centroids.items()}
        return out


def _pairwise(x):
    return np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)


def single_linkage_count(points, rel_threshold=0.1):
    dist = _pairwise(points)
    tau = rel_threshold * float(dist.max(initial=0.0))
    if tau == 0.0:
        return 1, tau
    n, _ = connected_components(dist <= tau, directed=False)
    return int(n), tau


def cluster_report(params, probe, smoothed=False, rel_threshold=0.1):
    if len(probe) == 0:
        raise EmptyProbeSet("cluster_report needs at least one probe sequence")
    xi = forward_batch(params, probe.inputs, smoothed).xi
    groups = {}
    for c, v in zip(probe.classes, xi):
        groups.setdefault(c, []).append(v)
    centroids = {c: np.mean(v, axis=0) for c, v in groups.items()}
    within = [_pairwise(np.array(v)) for v in groups.values()]
    within_max = max(float(w.max()) for w in within)
    pair_vals = np.concatenate([w[np.triu_indices(len(w), 1)] for w in within])
    within_mean = float(pair_vals.mean()) if pair_vals.size else 0.0
    cent = np.array(list(centroids.values()))
    if len(cent) > 1:
        between = _pairwise(cent)[np.triu_indices(len(cent), 1)]
        between_min, between_mean = float(between.min()), float(between.mean())
    else:
        between_min = between_mean = 0.0
    detected, tau = single_linkage_count(xi, rel_threshold)
    return ClusterReport(centroids, within_max, within_mean, between_min, between_mean, detected, tau)


@dataclass
class LossEvents:
    drops: list
    spikes: list


def _window_mean(x, lo, hi):
    lo, hi = max(lo, 0), min(hi, len(x))
    return float(np.mean(x[lo:hi]))


def detect_loss_events(metrics, window=5, drop_frac=0.25, spike_frac=0.2, key="train_loss"):
    """Epochs of sharp loss drops and of loss spikes.

    The decrease at row ``i`` is the mean loss over the ``window`` rows before
    ``i`` minus the mean over ``i`` and the ``window - 1`` rows after. A drop
    is a local maximum of that decrease exceeding ``drop_frac`` of the loss
    range. A spike is the peak of a contiguous run of rows whose loss exceeds
    the running minimum of earlier rows by at least ``spike_frac`` of the range.
    """
    if len(metrics) < 3:
        raise TooFewRows(f"need at least 3 metric rows, got {len(metrics)}")
    epochs = [m.epoch for m in metrics]
    loss = np.array([getattr(m, key) for m in metrics], dtype=np.float64)
    span = float(loss.max() - loss.min())
    if span == 0.0:
        return LossEvents([], [])
    n = len(loss)
    dec = np.array([
        _window_mean(loss, i - window, i) - _window_mean(loss, i, i + window) if i > 0 else -np.inf
        for i in range(n)
    ])
    drops = []
    for i in range(1, n):
        left = dec[i - 1]
        right = dec[i + 1] if i + 1 < n else -np.inf
        if dec[i] > drop_frac * span and dec[i] > left and dec[i] >= right:
            if drops and i - drops[-1] < window:
                if dec[i] > dec[drops[-1]]:
                    drops[-1] = i
                continue
            drops.append(i)
    running_min = np.minimum.accumulate(loss)
    above = np.zeros(n, dtype=bool)
    above[1:] = loss[1:] - running_min[:-1] >= spike_frac * span
    spikes = []
    i = 0
    while i < n:
        if above[i]:
            j = i
            while j + 1 < n and above[j + 1]:
                j += 1
            spikes.append(i + int(np.argmax(loss[i:j + 1])))
            i = j + 1
        else:
            i += 1
    return LossEvents(sorted(epochs[i] for i in drops), sorted(epochs[i] for i in spikes))


def report(run, sparsity_grid=SPARSITY_GRID, bound_every=1):
    """Machine-readable summary of a finished run."""
    from .task import sample_dataset

    cfg = run.config
    train_set = sample_dataset(cfg.n_train, cfg.hyper.spec, cfg.seed, "data")
    events = detect_loss_events(run.metrics) if len(run.metrics) >= 3 else LossEvents([], [])
    slack = [
        {"epoch": m.epoch, "grad_norm": m.grad_attn_mlp, "bound": m.bound, "slack": m.bound - m.grad_attn_mlp}
        for m in run.metrics[::bound_every]
    ]
    out = {
        "final": run.metrics[-1].to_dict(),
        "events": asdict(events),
        "bound_slack": slack,
        "sparsity": {
            "epsilon": list(map(float, sparsity_grid)),
            "fraction": list(map(float, activation_sparsity(run.params, train_set, sparsity_grid, cfg.hyper.smoothed))),
        },
    }
    if run.probe is not None and len(run.probe):
        out["clusters"] = cluster_report(run.params, run.probe, cfg.hyper.smoothed).to_dict()
    try:
        out["bound_final"] = asdict(gradient_bound(run.params, train_set)) if not cfg.hyper.smoothed else None
    except Exception as exc:  # noqa: BLE001 - degenerate xi leaves the report usable
        out["bound_final"] = {"error": str(exc)}
    return out


def report_json(run):
    return json.dumps(report(run), indent=2, sort_keys=True)
