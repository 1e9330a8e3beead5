"""Epoch snapshots and the JSONL run log.

Line 1 of a run log is a header object; every further line is one snapshot.
Floats go through ``json`` (shortest round-trip repr), so reading a log back
reproduces every value bit for bit.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptLine, SchemaVersionMismatch
from .model import ModelParams, forward_batch

SCHEMA_VERSION = "v1"
PROBE_FIELDS = ("z", "attn", "xi", "psi", "mu")


@dataclass
class Snapshot:
    epoch: int
    params: ModelParams
    probe: dict          # field name -> array with leading probe axis
    metrics: dict

    def to_record(self):
        return {
            "epoch": self.epoch,
            "params": {n: a.tolist() for n, a in self.params.items()},
            "probe": {k: np.asarray(v).tolist() for k, v in self.probe.items()},
            "metrics": self.metrics,
        }

    @classmethod
    def from_record(cls, rec):
        params = ModelParams.from_dict(rec["params"])
        probe = {k: np.array(v, dtype=np.float64) for k, v in rec["probe"].items()}
        return cls(int(rec["epoch"]), params, probe, dict(rec["metrics"]))

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            self.epoch == other.epoch
            and self.params == other.params
            and self.probe.keys() == other.probe.keys()
            and all(np.array_equal(v, other.probe[k]) for k, v in self.probe.items())
            and self.metrics == other.metrics
        )


def record_snapshot(epoch, params, probe, metrics, smoothed=False):
    """Deep copy of ``params`` plus probe-set traces; later training cannot alter it."""
    if hasattr(metrics, "to_dict"):
        metrics = metrics.to_dict()
    if len(probe):
        tr = forward_batch(params, probe.inputs, smoothed)
        traces = {k: np.array(getattr(tr, k)) for k in PROBE_FIELDS}
    else:
        traces = {k: np.zeros((0,)) for k in PROBE_FIELDS}
    return Snapshot(int(epoch), params.copy(), traces, dict(metrics))


@dataclass
class RunLog:
    header: dict
    snapshots: list = field(default_factory=list)

    def append(self, snap):
        if self.snapshots and snap.epoch <= self.snapshots[-1].epoch:
            raise ValueError(
                f"snapshot epoch {snap.epoch} not after previous epoch {self.snapshots[-1].epoch}"
            )
        self.snapshots.append(snap)

    def __eq__(self, other):
        return isinstance(other, RunLog) and self.header == other.header and self.snapshots == other.snapshots


def make_header(config=None, probe=None, **extra):
    from . import __version__

    header = {"schema": SCHEMA_VERSION, "versions": {"sparsemod": __version__, "numpy": np.__version__}}
    if config is not None:
        header["config"] = config.to_dict() if hasattr(config, "to_dict") else dict(config)
    if probe is not None:
        header["probe"] = {"inputs": probe.inputs.tolist(), "classes": [list(c) for c in probe.classes]}
    header.update(extra)
    return header


def write_run_log(log, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(log.header, sort_keys=True) + "\n")
        for snap in log.snapshots:
            fh.write(json.dumps(snap.to_record(), allow_nan=False) + "\n")


def read_run_log(path, strict=True):
    """Parse a run log.

    With ``strict=False`` a corrupt line stops reading and the snapshots
    before it are returned; the error is kept in ``log.header['_error']``.
    """
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorruptLine("missing header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptLine(f"header is not valid JSON ({exc.msg})", 1) from None
    if header.get("schema") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"expected schema {SCHEMA_VERSION!r}, found {header.get('schema')!r}")
    log = RunLog(header)
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            log.append(Snapshot.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            err = CorruptLine(str(exc), lineno)
            if strict:
                raise err from None
            log.header["_error"] = str(err)
            break
    return log
