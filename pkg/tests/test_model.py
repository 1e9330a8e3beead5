import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsemod.errors import ClusterCollision, EmptyDataset
from sparsemod.model import (HyperParams, ModelParams, batch_eval, build_idealized_embedding, forward,
                             forward_batch, init_params, per_sample_losses)
from sparsemod.task import TaskSpec, build_probe_set, make_dataset, prefix_class, sample_dataset


def loop_forward(params, x):
    """Scalar-loop reference: one position and one hidden unit at a time."""
    d = params.d
    zs = []
    for t, tok in enumerate(x):
        a = params.E[tok] + params.P[t]
        n = math.sqrt(sum(v * v for v in a))
        zs.append(a / max(n, 1e-12))
    scores = [float(z @ params.q) / math.sqrt(d) for z in zs]
    m = max(scores)
    w = [math.exp(s - m) for s in scores]
    attn = [v / sum(w) for v in w]
    pooled = sum(a * z for a, z in zip(attn, zs))
    xi = params.V @ pooled
    xi_bar = xi / max(np.linalg.norm(xi), 1e-12)
    hidden = []
    for row in params.W:
        u = float(row @ xi_bar)
        hidden.append(u * 0.5 * math.erfc(-u / math.sqrt(2)))
    psi = xi + params.U @ np.array(hidden)
    zeta = params.E @ psi
    e = np.exp(zeta - zeta.max())
    return e / e.sum()


def test_init_deterministic_and_shapes():
    hyper = HyperParams(d=3, h=7)
    a, b = init_params(hyper, 5), init_params(hyper, 5)
    assert a == b
    assert a != init_params(hyper, 6)
    assert a.E.shape == (2, 3) and a.P.shape == (12, 3) and a.W.shape == (7, 3) and a.U.shape == (3, 7)
    assert np.all(np.abs(a.U) <= 1 / math.sqrt(7))


def test_init_embedding_std():
    hyper = HyperParams(d=50, h=1, spec=TaskSpec(p=2000))
    e = init_params(hyper, 0).E
    assert e.size == 100_000
    assert abs(e.std() - 1.0) <= 0.02


def test_params_shape_validation():
    p = init_params(HyperParams(), 0)
    with pytest.raises(ValueError):
        p.replace(W=np.zeros((3, 3)))


def test_params_dict_round_trip():
    p = init_params(HyperParams(d=3), 1)
    assert ModelParams.from_dict(p.to_dict()) == p


def test_forward_zero_value_gives_uniform():
    p = init_params(HyperParams(), 0).replace(V=np.zeros((2, 2)))
    tr = forward(p, [1] * 12)
    assert np.all(tr.xi == 0) and np.all(tr.psi == 0) and np.all(tr.zeta == 0)
    np.testing.assert_array_equal(tr.mu, [0.5, 0.5])


def test_forward_zero_query_gives_uniform_attention():
    p = init_params(HyperParams(), 0).replace(q=np.zeros(2))
    np.testing.assert_allclose(forward(p, [0] * 12).attn, np.full(12, 1 / 12), rtol=1e-15)


def test_forward_random_d3():
    p = init_params(HyperParams(d=3), 2)
    tr = forward(p, sample_dataset(1, TaskSpec(), 0).inputs[0])
    assert tr.mu.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(np.linalg.norm(tr.z, axis=0), 1.0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3, 5]))
def test_forward_matches_loop_reference(seed, d):
    hyper = HyperParams(d=d, h=6, spec=TaskSpec(p=3))
    p = init_params(hyper, seed)
    xs = sample_dataset(4, hyper.spec, seed).inputs
    mu = forward_batch(p, xs).mu
    for x, m in zip(xs, mu):
        np.testing.assert_allclose(m, loop_forward(p, x), rtol=1e-12, atol=1e-15)


def test_batch_eval_uniform_predictor():
    p = init_params(HyperParams(), 0).replace(V=np.zeros((2, 2)))
    ds = sample_dataset(500, TaskSpec(), 4)
    loss, acc = batch_eval(p, ds)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert acc == pytest.approx(np.mean(ds.targets == 0))


def test_batch_eval_matches_per_sample_mean():
    p = init_params(HyperParams(), 3)
    ds = sample_dataset(2048, TaskSpec(), 3)
    loss, _ = batch_eval(p, ds)
    indep = math.fsum(-math.log(loop_forward(p, x)[y]) for x, y in zip(ds.inputs[:2048], ds.targets))
    assert loss == pytest.approx(indep / len(ds), abs=1e-10)


def test_batch_eval_perfect_predictions():
    from sparsemod.training import fit_cluster_readout

    hyper = HyperParams()
    ds = sample_dataset(256, hyper.spec, 0)
    p = fit_cluster_readout(build_idealized_embedding(hyper), ds, margin=40.0)
    loss, acc = batch_eval(p, ds)
    assert acc == 1.0 and loss < 1e-15


def test_batch_eval_empty():
    with pytest.raises(EmptyDataset):
        batch_eval(init_params(HyperParams(), 0), make_dataset(np.zeros((0, 12)), TaskSpec()))


def test_per_sample_losses_nonnegative():
    p = init_params(HyperParams(), 0)
    ds = sample_dataset(64, TaskSpec(), 0)
    losses, _ = per_sample_losses(p, ds.inputs, ds.targets)
    assert np.all(losses >= 0)


@pytest.mark.parametrize("p_vocab,groups", [(2, 6), (3, 21)])
def test_idealized_embedding_clusters(p_vocab, groups):
    hyper = HyperParams(spec=TaskSpec(p=p_vocab))
    params = build_idealized_embedding(hyper)
    probe = build_probe_set(hyper.spec)
    xi = forward_batch(params, probe.inputs).xi
    by_class = {}
    for c, v in zip(probe.classes, xi):
        by_class.setdefault(c, []).append(v)
    assert len(by_class) == groups
    for pts in by_class.values():
        pts = np.array(pts)
        assert np.max(np.abs(pts - pts[0])) <= 1e-12


def test_idealized_prefix_permutation():
    hyper = HyperParams()
    params = build_idealized_embedding(hyper)
    x = [1, 0, 0, 1, 1, 0, 1, 0, 1, 1, 0, 0]
    y = [0, 1, 1, 1, 0] + x[5:]
    assert prefix_class(x, hyper.spec) == prefix_class(y, hyper.spec)
    np.testing.assert_allclose(forward(params, x).xi, forward(params, y).xi, atol=1e-12, rtol=0)


def test_idealized_requires_d2_and_separation():
    with pytest.raises(ValueError):
        build_idealized_embedding(HyperParams(d=3))
    with pytest.raises(ClusterCollision):
        build_idealized_embedding(HyperParams(), position_scale=1e9)
