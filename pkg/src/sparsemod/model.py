"""One-layer transformer for sparse modular addition.

Shapes, for vocabulary ``p``, length ``L``, width ``d`` and ``h`` hidden units::

    E (p, d)   token embedding, reused as the unembedding
    P (L, d)   position embedding
    q (d,)     attention query
    V (d, d)   value matrix
    W (h, d)   MLP receptors (rows w_i)
    U (d, h)   MLP assemblers (columns u_i)
"""
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ClusterCollision, EmptyDataset
from .seeding import stream
from .task import TaskSpec, build_probe_set, ideal_cluster_count

PARAM_NAMES = ("E", "P", "q", "V", "W", "U")
NORM_VARIANTS = ("standard", "smoothed")
PARAMS_FORMAT = "sparsemod-params/v1"


@dataclass(frozen=True)
class HyperParams:
    d: int = 2
    h: int = 32
    spec: TaskSpec = field(default_factory=TaskSpec)
    norm_variant: str = "standard"

    def __post_init__(self):
        if self.d < 1 or self.h < 1:
            raise ValueError(f"need d >= 1 and h >= 1, got d={self.d}, h={self.h}")
        if self.norm_variant not in NORM_VARIANTS:
            raise ValueError(f"norm_variant must be one of {NORM_VARIANTS}")

    @property
    def smoothed(self):
        return self.norm_variant == "smoothed"


@dataclass
class ModelParams:
    E: np.ndarray
    P: np.ndarray
    q: np.ndarray
    V: np.ndarray
    W: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.ascontiguousarray(getattr(self, f.name), dtype=np.float64))
        p, d = self.E.shape
        h = self.W.shape[0]
        expected = {"P": (self.P.shape[0], d), "q": (d,), "V": (d, d), "W": (h, d), "U": (d, h)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def p(self):
        return self.E.shape[0]

    @property
    def L(self):
        return self.P.shape[0]

    @property
    def d(self):
        return self.E.shape[1]

    @property
    def h(self):
        return self.W.shape[0]

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def copy(self):
        return ModelParams(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def replace(self, **arrays):
        kw = {n: getattr(self, n) for n in PARAM_NAMES}
        kw.update(arrays)
        return ModelParams(**kw).copy()

    def flat(self, names=PARAM_NAMES):
        return np.concatenate([getattr(self, n).ravel() for n in names])

    def norm(self, names=PARAM_NAMES):
        return float(np.linalg.norm(self.flat(names)))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.items())

    def to_dict(self):
        return {"format": PARAMS_FORMAT, **{n: a.tolist() for n, a in self.items()}}

    @classmethod
    def from_dict(cls, obj):
        fmt = obj.get("format", PARAMS_FORMAT)
        if fmt != PARAMS_FORMAT:
            raise ValueError(f"unsupported params format {fmt!r}")
        d = len(obj["q"])
        h = len(obj["W"])
        arrays = {n: np.array(obj[n], dtype=np.float64) for n in PARAM_NAMES}
        arrays["E"] = arrays["E"].reshape(-1, d)
        arrays["P"] = arrays["P"].reshape(-1, d)
        arrays["V"] = arrays["V"].reshape(d, d)
        arrays["W"] = arrays["W"].reshape(h, d)
        arrays["U"] = arrays["U"].reshape(d, h)
        return cls(**arrays)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, getattr(other, n)) for n, a in self.items())


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def init_params(hyper, seed):
    """Standard-normal embeddings; uniform(+-1/sqrt(fan_in)) for q, V, W, U."""
    rng = stream(seed, "init")
    spec, d, h = hyper.spec, hyper.d, hyper.h
    E = rng.standard_normal((spec.p, d))
    P = rng.standard_normal((spec.L, d))
    # q acts on d-vectors; V and W take d inputs; U takes h
    q = _uniform(rng, 1.0 / math.sqrt(d), d)
    V = _uniform(rng, 1.0 / math.sqrt(d), (d, d))
    W = _uniform(rng, 1.0 / math.sqrt(d), (h, d))
    U = _uniform(rng, 1.0 / math.sqrt(h), (d, h))
    return ModelParams(E, P, q, V, W, U)


def extra_token_rows(n_rows, d, seed):
    """Fresh token-embedding rows, drawn like ``init_params`` draws ``E``."""
    return stream(seed, "expand").standard_normal((n_rows, d))


@dataclass
class ForwardTrace:
    """Intermediates of a forward pass; leading axis is the batch when batched."""

    z: np.ndarray        # (..., d, L) normalised embeddings, one column per position
    attn: np.ndarray     # (..., L)
    xi: np.ndarray       # (..., d)
    xi_bar: np.ndarray   # (..., d)
    act_pre: np.ndarray  # (..., h)
    act: np.ndarray      # (..., h)
    psi: np.ndarray      # (..., d)
    zeta: np.ndarray     # (..., p)
    mu: np.ndarray       # (..., p)

    def __getitem__(self, i):
        return ForwardTrace(**{f.name: getattr(self, f.name)[i] for f in fields(self)})


def _project(v, smoothed):
    return nx.smoothed_normalize(v) if smoothed else nx.normalize(v)


def forward_batch(params, xs, smoothed=False):
    xs = np.atleast_2d(np.asarray(xs, dtype=np.int64))
    d = params.d
    a = params.E[xs] + params.P[None, :, :]             # (n, L, d)
    z_rows = _project(a, smoothed)                      # (n, L, d)
    logits = z_rows @ params.q / math.sqrt(d)           # (n, L)
    attn = nx.softmax(logits, axis=-1)
    pooled = np.einsum("nl,nld->nd", attn, z_rows)      # z @ attn
    xi = pooled @ params.V.T
    xi_bar = _project(xi, smoothed)
    act_pre = xi_bar @ params.W.T
    act = nx.gelu(act_pre)
    psi = xi + act @ params.U.T
    zeta = psi @ params.E.T
    mu = nx.softmax(zeta, axis=-1)
    return ForwardTrace(np.swapaxes(z_rows, 1, 2), attn, xi, xi_bar, act_pre, act, psi, zeta, mu)


def forward(params, x, smoothed=False):
    """Forward pass for a single sequence ``x``; returns an unbatched trace."""
    return forward_batch(params, np.asarray(x)[None, :], smoothed)[0]


def per_sample_losses(params, xs, ys, smoothed=False):
    tr = forward_batch(params, xs, smoothed)
    logp = nx.log_softmax(tr.zeta, axis=-1)
    return -logp[np.arange(len(ys)), ys], tr


def batch_eval(params, dataset, smoothed=False):
    """Mean cross-entropy and argmax accuracy (ties go to the smallest class)."""
    if len(dataset) == 0:
        raise EmptyDataset("batch_eval on an empty dataset")
    losses, tr = per_sample_losses(params, dataset.inputs, dataset.targets, smoothed)
    pred = np.argmax(tr.mu, axis=-1)
    return float(np.mean(losses)), float(np.mean(pred == dataset.targets))


def idealized_token_coords(p):
    return np.array([6.0**v / (1.0 + 6.0**p) for v in range(p)])


def build_idealized_embedding(hyper, position_scale=1.0, query_scale=50.0):
    """Hand-built clustering head for ``d == 2`` with a zero MLP.

    Prefix positions share one position embedding and spurious positions
    another, and the query points at the prefix one, so the sentence
    embedding depends only on the multiset of prefix tokens.
    """
    if hyper.d != 2:
        raise ValueError("the idealized embedding is defined for d == 2 only")
    spec = hyper.spec
    E = np.zeros((spec.p, 2))
    E[:, 0] = idealized_token_coords(spec.p)
    P = np.zeros((spec.L, 2))
    P[: spec.k, 1] = position_scale
    P[spec.k :, 1] = -position_scale
    q = np.array([0.0, query_scale])
    V = np.eye(2)
    params = ModelParams(E, P, q, V, np.zeros((hyper.h, 2)), np.zeros((2, hyper.h)))
    _check_cluster_separation(params, spec, hyper.smoothed)
    return params


def _check_cluster_separation(params, spec, smoothed):
    probe = build_probe_set(spec, [(0,) * (spec.L - spec.k)])
    xi = forward_batch(params, probe.inputs, smoothed).xi
    centroids = {}
    for c, v in zip(probe.classes, xi):
        centroids.setdefault(c, v)
    pts = np.array(list(centroids.values()))
    if len(pts) != ideal_cluster_count(spec):
        raise ClusterCollision("prefix classes missing from probe set")
    diff = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(diff, np.inf)
    if diff.min() < 1e-6:
        raise ClusterCollision(f"two prefix classes map within {diff.min():.3g} of each other")
