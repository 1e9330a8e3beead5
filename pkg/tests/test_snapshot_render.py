import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sparsemod.errors import CorruptLine, SchemaVersionMismatch, TooFewRows
from sparsemod.model import HyperParams, build_idealized_embedding, init_params
from sparsemod.render import PANELS_2D, PANELS_ND, FrameLayout, mu_to_rgb, render_frame, render_metrics
from sparsemod.snapshot import RunLog, make_header, read_run_log, record_snapshot, write_run_log
from sparsemod.task import TaskSpec, build_probe_set
from sparsemod.training import METRIC_COLUMNS, TrainConfig, train

NS = "{http://www.w3.org/2000/svg}"
SPEC = TaskSpec()


def fake_metrics(epoch, **kw):
    row = {c: 0.5 for c in METRIC_COLUMNS}
    row.update(epoch=epoch, **kw)
    return row


def make_log(n=3, d=2):
    hyper = HyperParams(d=d)
    probe = build_probe_set(SPEC)
    log = RunLog(make_header(TrainConfig(hyper=hyper), probe))
    for i in range(n):
        log.append(record_snapshot(10 * i, init_params(hyper, i), probe, fake_metrics(10 * i)))
    return log, probe


def groups(svg_text):
    root = ET.fromstring(svg_text)
    return [g for g in root.iter(NS + "g") if g.get("id")]


def test_snapshot_is_a_copy():
    params = init_params(HyperParams(), 0)
    snap = record_snapshot(0, params, build_probe_set(SPEC), fake_metrics(0))
    params.W[...] = 0.0
    assert np.any(snap.params.W != 0)


def test_epoch_zero_snapshot_reproducible():
    a = train(TrainConfig(n_train=32, n_test=16, epochs=1, batch_size=16)).snapshots[0]
    b = train(TrainConfig(n_train=32, n_test=16, epochs=1, batch_size=16)).snapshots[0]
    assert a == b


def test_run_log_rejects_out_of_order():
    log, probe = make_log(2)
    with pytest.raises(ValueError):
        log.append(record_snapshot(10, init_params(HyperParams(), 0), probe, fake_metrics(10)))


def test_run_log_round_trip(tmp_path):
    log, _ = make_log(3)
    write_run_log(log, tmp_path / "run.jsonl")
    assert read_run_log(tmp_path / "run.jsonl") == log


def test_truncated_last_line(tmp_path):
    log, _ = make_log(3)
    path = tmp_path / "run.jsonl"
    write_run_log(log, path)
    text = path.read_text()
    path.write_text(text[: len(text) - 200])
    with pytest.raises(CorruptLine) as err:
        read_run_log(path)
    assert err.value.line_number == 4
    partial = read_run_log(path, strict=False)
    assert [s.epoch for s in partial.snapshots] == [0, 10]
    assert "_error" in partial.header


def test_schema_mismatch(tmp_path):
    path = tmp_path / "run.jsonl"
    path.write_text(json.dumps({"schema": "v0"}) + "\n")
    with pytest.raises(SchemaVersionMismatch):
        read_run_log(path)


def test_default_run_log_parses_line_by_line(tmp_path):
    cfg = TrainConfig(n_train=64, n_test=32, epochs=99, batch_size=64, snapshot_every=1)
    run = train(cfg)
    log = RunLog(make_header(cfg, run.probe), run.snapshots)
    write_run_log(log, tmp_path / "run.jsonl")
    lines = (tmp_path / "run.jsonl").read_text().splitlines()
    assert len(lines) == 101
    records = [json.loads(line) for line in lines]
    assert records[0]["schema"] == "v1"
    assert [r["epoch"] for r in records[1:]] == list(range(100))


def test_frame_2d_has_eight_panels():
    log, probe = make_log(1)
    layout = FrameLayout.from_probe(probe, history=[s.metrics for s in log.snapshots])
    ids = [g.get("id") for g in groups(render_frame(log.snapshots[0], layout))]
    assert ids == list(PANELS_2D) and len(ids) == 8


def test_frame_3d_degrades_to_two_panels():
    log, probe = make_log(1, d=3)
    layout = FrameLayout.from_probe(probe, history=[s.metrics for s in log.snapshots])
    ids = [g.get("id") for g in groups(render_frame(log.snapshots[0], layout))]
    assert ids == list(PANELS_ND) and len(ids) == 2


def test_frame_is_pure():
    log, probe = make_log(1)
    layout = FrameLayout.from_probe(probe, history=[s.metrics for s in log.snapshots])
    assert render_frame(log.snapshots[0], layout) == render_frame(log.snapshots[0], layout)


def test_idealized_frame_properties():
    hyper = HyperParams()
    probe = build_probe_set(SPEC)
    snap = record_snapshot(0, build_idealized_embedding(hyper), probe, fake_metrics(0))
    root = ET.fromstring(render_frame(snap, FrameLayout.from_probe(probe, history=[snap.metrics])))
    attn = {}
    for el in root.iter():
        if el.get("class") == "attn-cell":
            attn.setdefault(int(el.get("data-row")), {})[int(el.get("data-col"))] = float(el.get("data-value"))
    assert len(attn) == len(probe)
    for row in attn.values():
        assert sum(row[t] for t in range(SPEC.k)) >= 0.99
    centres = set()
    for el in root.iter():
        if el.get("class") == "pos-marker":
            if el.tag == NS + "circle":
                centres.add((el.get("cx"), el.get("cy")))
            else:
                centres.add((f"{float(el.get('x')) + 4:.3f}", f"{float(el.get('y')) + 4:.3f}"))
    assert len(centres) == 2


def test_mu_to_rgb_range():
    for mu in ([1.0, 0.0], [0.5, 0.5], [0.2, 0.3, 0.5]):
        rgb = mu_to_rgb(np.array(mu))
        assert np.all((0 <= np.asarray(rgb)) & (np.asarray(rgb) <= 1))


def test_metrics_svg_two_rows():
    log, _ = make_log(2)
    ids = [g.get("id") for g in groups(render_metrics(log))]
    assert ids == ["loss", "accuracy", "grad-norms-log", "grad-norms-linear"]


def test_metrics_svg_spike_visible():
    rows = []
    for e in range(20):
        spike = e == 12
        rows.append(fake_metrics(e, train_loss=2.0 if spike else 1.0 - 0.02 * e, grad_q=5.0 if spike else 0.1))
    root = ET.fromstring(render_metrics(rows))

    def trace(group, cls):
        g = next(x for x in root.iter(NS + "g") if x.get("id") == group)
        line = next(x for x in g.iter(NS + "polyline") if x.get("class") == cls)
        return [float(p.split(",")[1]) for p in line.get("points").split()]

    # SVG y grows downwards, so the peak is the smallest pixel y
    for group, cls in (("loss", "train_loss"), ("grad-norms-log", "grad_q"), ("grad-norms-linear", "grad_q")):
        assert int(np.argmin(trace(group, cls))) == 12


def test_metrics_svg_too_few_rows():
    with pytest.raises(TooFewRows):
        render_metrics([])
