"""Adam training loop, curriculum finetuning and hyperparameter sweeps."""
import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import kernel
from .diagnostics import assert_bound, bound_constant
from .errors import BoundViolation, InvalidExpansion, NumericFailure  # noqa: F401
from .gradients import ALL_PARAMS, ATTN_MLP, GradientSet
from . import numerics as nx
from .model import PARAM_NAMES, HyperParams, ModelParams, extra_token_rows, forward_batch, init_params
from .seeding import stream
from .snapshot import record_snapshot
from .task import TaskSpec, build_probe_set, sample_dataset

log = logging.getLogger(__name__)

GRAD_LOG_MODES = ("full_batch_norms", "minibatch_norms")


@dataclass(frozen=True)
class TrainConfig:
    hyper: HyperParams = field(default_factory=HyperParams)
    n_train: int = 2048
    n_test: int = 2048
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-2
    mlp_lr_discount: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    mask: frozenset = ALL_PARAMS
    seed: int = 0
    snapshot_every: int = 10
    grad_log: str = "full_batch_norms"
    check_bound: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mask", frozenset(self.mask))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.batch_size <= self.n_train:
            raise ValueError("batch_size must lie in [0, n_train]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.grad_log not in GRAD_LOG_MODES:
            raise ValueError(f"grad_log must be one of {GRAD_LOG_MODES}")
        if not self.mask <= ALL_PARAMS:
            raise ValueError(f"unknown tensors in mask: {sorted(self.mask - ALL_PARAMS)}")

    @property
    def theory_mode(self):
        return self.mask == ATTN_MLP

    def to_dict(self):
        out = asdict(self)
        out["mask"] = sorted(self.mask, key=PARAM_NAMES.index)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        hyper = dict(obj.pop("hyper", {}))
        spec = TaskSpec(**hyper.pop("spec", {}))
        obj["hyper"] = HyperParams(spec=spec, **hyper)
        if "mask" in obj:
            obj["mask"] = frozenset(obj["mask"])
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj)


def theory_mode(config):
    """Same config with E and P frozen."""
    return replace(config, mask=ATTN_MLP)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({n: np.zeros_like(a) for n, a in params.items()},
                   {n: np.zeros_like(a) for n, a in params.items()})


def adam_update(state, params, grads, config):
    """One bias-corrected Adam step in place; W and U use ``lr * mlp_lr_discount``."""
    b1, b2 = config.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name in PARAM_NAMES:
        if name not in config.mask:
            continue
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        lr = config.lr * (config.mlp_lr_discount if name in ("W", "U") else 1.0)
        getattr(params, name)[...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
    return state, params


METRIC_COLUMNS = (
    "epoch", "train_loss", "test_loss", "train_acc", "test_acc",
    "grad_E", "grad_P", "grad_q", "grad_V", "grad_W", "grad_U",
    "grad_attn_mlp", "error_term", "bound",
)


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    grad_E: float
    grad_P: float
    grad_q: float
    grad_V: float
    grad_W: float
    grad_U: float
    grad_attn_mlp: float
    error_term: float
    bound: float

    def as_row(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]

    def to_dict(self):
        return asdict(self)


@dataclass
class RunArtifacts:
    config: TrainConfig
    metrics: list
    snapshots: list
    params: ModelParams
    probe: object = None


def _grads(params, xs, ys, smoothed, mask):
    loss, correct, err, g = kernel.loss_and_grad(params, xs, ys, smoothed)
    n = len(ys)
    return loss / n, correct / n, err / n, GradientSet(*(a / n for a in g), mask=ALL_PARAMS)


def _eval(params, ds, smoothed):
    loss, correct, err, _ = kernel.loss_and_grad(params, ds.inputs, ds.targets, smoothed, want_grad=False)
    n = len(ds)
    return loss / n, correct / n, err / n


def _metrics_row(epoch, params, config, train, test, last_grads):
    smoothed = config.hyper.smoothed
    if config.grad_log == "full_batch_norms" or last_grads is None:
        train_loss, train_acc, err, grads = _grads(params, train.inputs, train.targets, smoothed, config.mask)
    else:
        train_loss, train_acc, err = _eval(params, train, smoothed)
        grads = last_grads
    test_loss, test_acc, _ = _eval(params, test, smoothed)
    norms = {n: float(np.linalg.norm(grads[n])) for n in PARAM_NAMES}
    attn_mlp = grads.norm(("q", "V", "W", "U"))
    bound = bound_constant(params) * math.sqrt(max(err, 0.0))
    row = MetricsRow(epoch, train_loss, test_loss, train_acc, test_acc,
                     *(norms[n] for n in PARAM_NAMES), attn_mlp, err, bound)
    if not (math.isfinite(train_loss) and math.isfinite(test_loss)):
        raise NumericFailure("non-finite loss", epoch=epoch)
    full = config.grad_log == "full_batch_norms" or last_grads is None
    if full and config.theory_mode and config.check_bound:
        assert_bound(attn_mlp, err, params, epoch=epoch)
    return row


def train(config, initial_params=None, probe=None, progress=None):
    """Run Adam on a freshly sampled training set; deterministic in ``config.seed``.

    Metrics are logged at epoch 0 (initialisation) and after every epoch.
    """
    hyper = config.hyper
    spec = hyper.spec
    smoothed = hyper.smoothed
    train_set = sample_dataset(config.n_train, spec, config.seed, "data")
    test_set = sample_dataset(config.n_test, spec, config.seed, "test")
    params = (initial_params.copy() if initial_params is not None else init_params(hyper, config.seed))
    if params.p != spec.p or params.d != hyper.d or params.h != hyper.h or params.L != spec.L:
        raise ValueError("initial parameters do not match the configured shapes")
    probe = probe if probe is not None else build_probe_set(spec)
    state = AdamState.zeros(params)
    shuffle = stream(config.seed, "shuffle")
    batch = config.batch_size or config.n_train

    metrics = [_metrics_row(0, params, config, train_set, test_set, None)]
    snapshots = []
    if config.snapshot_every:
        snapshots.append(record_snapshot(0, params, probe, metrics[-1], smoothed))
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(config.n_train)
        grads = None
        for step, start in enumerate(range(0, config.n_train, batch)):
            idx = order[start:start + batch]
            _, _, _, grads = _grads(params, train_set.inputs[idx], train_set.targets[idx], smoothed, config.mask)
            if not grads.is_finite():
                raise NumericFailure("non-finite gradient", epoch=epoch, step=step)
            adam_update(state, params, grads, config)
        row = _metrics_row(epoch, params, config, train_set, test_set, grads)
        metrics.append(row)
        last = epoch == config.epochs
        if config.snapshot_every and (epoch % config.snapshot_every == 0 or last):
            snapshots.append(record_snapshot(epoch, params, probe, row, smoothed))
        if progress is not None:
            progress(row)
    return RunArtifacts(config, metrics, snapshots, params, probe)


def fit_cluster_readout(params, dataset, margin=25.0, sharpness=1e3, smoothed=False):
    """Replace the MLP of a ``d == 2`` clustering head by a least-squares fit.

    Hidden units come in opposite-sign pairs with a kink half way between
    neighbouring cluster directions of the normalized sentence embedding;
    ``U`` is then solved so every logit gap reaches ``margin``.  Intended for
    embeddings whose clusters are already separated, such as the idealized one.
    """
    if params.d != 2:
        raise ValueError("fit_cluster_readout needs d == 2")
    trace = forward_batch(params, dataset.inputs, smoothed)
    theta = np.arctan2(trace.xi_bar[:, 1], trace.xi_bar[:, 0])
    centres = np.unique(np.round(theta, 12))
    kinks = (centres[1:] + centres[:-1]) / 2
    n_units = 2 * len(kinks) + 2
    if n_units > params.h:
        raise ValueError(f"{len(centres)} clusters need h >= {n_units}")
    W = np.zeros((params.h, 2))
    for i, m in enumerate(kinks):
        normal = np.array([np.sin(m), -np.cos(m)])
        W[2 * i], W[2 * i + 1] = sharpness * normal, -sharpness * normal
    # two smooth units supply an offset and a slope
    mid = centres.mean()
    W[n_units - 2] = [np.cos(mid), np.sin(mid)]
    W[n_units - 1] = [np.sin(mid), -np.cos(mid)]
    feats = nx.gelu(trace.xi_bar @ W.T)
    target_logits = margin * (np.eye(params.p)[dataset.targets] - 1.0 / params.p)
    psi_star = np.linalg.lstsq(params.E, target_logits.T, rcond=None)[0].T
    # E may be rank deficient, so rescale until the smallest gap hits the margin
    logits = psi_star @ params.E.T
    rows = np.arange(len(logits))
    rival = np.where(np.eye(params.p, dtype=bool)[dataset.targets], -np.inf, logits).max(axis=1)
    gap = (logits[rows, dataset.targets] - rival).min()
    if gap <= 0:
        raise ValueError("token embedding cannot separate the classes linearly")
    psi_star *= margin / gap
    U = np.linalg.lstsq(feats, psi_star - trace.xi, rcond=None)[0].T
    return params.replace(W=W, U=U)


def expand_vocabulary(params, new_p, seed):
    if new_p <= params.p:
        raise InvalidExpansion(f"new vocabulary size {new_p} must exceed {params.p}")
    rows = extra_token_rows(new_p - params.p, params.d, seed)
    return params.replace(E=np.vstack([params.E, rows]))


def finetune(pretrained, new_p, config):
    """Continue training on the task with vocabulary ``new_p``, adding fresh token rows."""
    params = expand_vocabulary(pretrained, new_p, config.seed)
    spec = replace(config.hyper.spec, p=new_p)
    config = replace(config, hyper=replace(config.hyper, spec=spec))
    return train(config, initial_params=params)


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in metrics:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.as_row()])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [MetricsRow(**{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}) for row in r]


# --- sweeps -----------------------------------------------------------------

SWEEP_AXES = ("batch_size", "h", "lr", "mlp_lr_discount")


def _cell_config(base, cell, seed):
    cell = dict(cell)
    hyper = base.hyper
    if "h" in cell:
        hyper = replace(hyper, h=int(cell.pop("h")))
    return replace(base, hyper=hyper, seed=seed, snapshot_every=0, **cell)


def _run_cell(args):
    base, cell, seed = args
    try:
        run = train(_cell_config(base, cell, seed))
        return run.metrics[-1].test_acc, None
    except Exception as exc:  # noqa: BLE001 - recorded per cell, sweep continues
        log.warning("sweep cell %s seed %s failed: %s", cell, seed, exc)
        return float("nan"), f"{type(exc).__name__}: {exc}"


@dataclass
class SweepRow:
    cell: dict
    accuracies: list
    errors: list

    @property
    def mean(self):
        vals = [a for a in self.accuracies if math.isfinite(a)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std(self):
        vals = [a for a in self.accuracies if math.isfinite(a)]
        return float(np.std(vals)) if vals else float("nan")


def hyper_sweep(grid, seeds, base=None, workers=1):
    """Final test accuracy for every grid cell and seed.

    Init, data and shuffle streams depend only on the seed, so cells sharing a
    seed start from identical weights and see identical batches.
    """
    base = base or TrainConfig()
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ValueError(f"cannot sweep over {sorted(unknown)}")
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must be nonempty")
    axes = [a for a in SWEEP_AXES if a in grid]
    cells = [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]
    jobs = [(base, cell, seed) for cell in cells for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = []
    for i, cell in enumerate(cells):
        chunk = results[i * len(seeds):(i + 1) * len(seeds)]
        rows.append(SweepRow(cell, [a for a, _ in chunk], [e for _, e in chunk]))
    return rows


def write_sweep_csv(rows, seeds, path):
    axes = [a for a in SWEEP_AXES if rows and a in rows[0].cell]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(axes + [f"seed_{s}" for s in seeds] + ["mean", "std"])
        for row in rows:
            w.writerow([row.cell[a] for a in axes] + [repr(a) for a in row.accuracies]
                       + [repr(row.mean), repr(row.std)])
