import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsemod.errors import InvalidToken, SuffixLengthMismatch
from sparsemod.task import (TaskSpec, build_probe_set, ideal_cluster_count, make_dataset, prefix_class,
                            read_csv, sample_dataset, target, targets, write_csv)

SPEC = TaskSpec()


def test_target_examples():
    assert target([1, 1, 1, 1, 1] + [0] * 7, SPEC) == 1
    assert target([1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1], SPEC) == 1
    spec3 = TaskSpec(p=3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert target([2, 2, 1, 0, 1] + list(rng.integers(0, 3, 7)), spec3) == 0


def test_target_rejects_bad_tokens():
    with pytest.raises(InvalidToken):
        target([2] * 12, SPEC)
    with pytest.raises(InvalidToken):
        target([0] * 11, SPEC)


@pytest.mark.parametrize("kw", [dict(k=13), dict(k=-1), dict(p=1)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        TaskSpec(**kw)


def test_sample_dataset_deterministic_and_readonly():
    a = sample_dataset(2048, SPEC, 0)
    b = sample_dataset(2048, SPEC, 0)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.targets.tobytes() == b.targets.tobytes()
    with pytest.raises(ValueError):
        a.inputs[0, 0] = 1
    assert not np.array_equal(a.inputs, sample_dataset(2048, SPEC, 1).inputs)
    assert not np.array_equal(a.inputs, sample_dataset(2048, SPEC, 0, "test").inputs)


def test_sample_dataset_token_frequencies():
    ds = sample_dataset(100_000, SPEC, 7)
    freq = ds.inputs.mean(axis=0)
    assert np.all(np.abs(freq - 0.5) <= 0.01)


def test_singleton_dataset():
    ds = sample_dataset(1, SPEC, 3)
    assert len(ds) == 1
    assert ds.targets[0] == target(ds.inputs[0], SPEC)


def test_prefix_class_examples():
    assert prefix_class([1, 0, 1, 0, 1] + [0] * 7, SPEC) == (2, 3)


@given(st.lists(st.integers(0, 2), min_size=12, max_size=12), st.randoms())
def test_prefix_class_invariances(x, rnd):
    spec = TaskSpec(p=3)
    prefix, suffix = x[:5], x[5:]
    rnd.shuffle(prefix)
    other_suffix = [rnd.randrange(3) for _ in suffix]
    assert prefix_class(x, spec) == prefix_class(prefix + suffix, spec)
    assert prefix_class(x, spec) == prefix_class(x[:5] + other_suffix, spec)
    assert target(x, spec) == target(prefix + other_suffix, spec)


@pytest.mark.parametrize("k,p,expected", [(5, 2, 6), (5, 3, 21), (0, 2, 1)])
def test_ideal_cluster_count(k, p, expected):
    spec = TaskSpec(k=k, p=p)
    assert ideal_cluster_count(spec) == expected
    brute = {tuple(np.bincount(c, minlength=p)) for c in itertools.product(range(p), repeat=k)}
    assert len(brute) == expected


def test_probe_set_sizes():
    probe = build_probe_set(SPEC)
    assert len(probe) == 96
    assert len(build_probe_set(SPEC, [])) == 0
    spec3 = TaskSpec(p=3)
    probe3 = build_probe_set(spec3, [(0,) * 7])
    assert len(probe3) == 243
    assert len(set(probe3.classes)) == 21
    np.testing.assert_array_equal(probe3.targets, targets(probe3.inputs, spec3))


def test_probe_set_order_is_prefix_major():
    probe = build_probe_set(SPEC)
    assert probe.inputs[:3, :5].tolist() == [[0] * 5] * 3
    assert probe.inputs[3, :5].tolist() == [0, 0, 0, 0, 1]


def test_probe_set_rejects_bad_suffix():
    with pytest.raises(SuffixLengthMismatch):
        build_probe_set(SPEC, [(0, 0)])
    with pytest.raises(InvalidToken):
        build_probe_set(SPEC, [(5,) * 7])


def test_csv_round_trip(tmp_path):
    ds = sample_dataset(50, SPEC, 2)
    write_csv(ds, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv", SPEC)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == ",".join([f"x{i}" for i in range(1, 13)] + ["y"])


def test_make_dataset_labels():
    xs = np.array([[1] * 12, [0] * 12])
    assert make_dataset(xs, SPEC).targets.tolist() == [1, 0]
