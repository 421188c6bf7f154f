"""Merging per-fold prediction traces: CCC-centering and clipping."""
import csv
import os
from dataclasses import dataclass

import numpy as np

from affuse.metrics import ccc

POLICIES = ("early_clip", "late_clip")


@dataclass(frozen=True)
class MergePolicy:
    order: str = "late_clip"
    weight_floor: float = 1e-3

    def __post_init__(self):
        if self.order not in POLICIES:
            raise ValueError(f"order must be one of {POLICIES}, got {self.order!r}")


def clip(trace):
    return np.clip(np.asarray(trace, dtype=np.float64), -1.0, 1.0)


def centering_weights(traces, floor=1e-3):
    """CCC of each trace against the mean of the others, floored at ``floor``."""
    k = traces.shape[0]
    total = traces.sum(axis=0)
    return np.array([max(ccc(traces[i], (total - traces[i]) / (k - 1)), floor) for i in range(k)])


def ccc_center(traces, floor=1e-3):
    """Weighted merge of K aligned traces after shifting each to a common mean."""
    traces = np.asarray(traces, dtype=np.float64)
    if traces.ndim != 2 or traces.shape[0] == 0:
        raise ValueError("need a non-empty (K, N) array of traces")
    if traces.shape[0] == 1:
        return traces[0].copy()
    w = centering_weights(traces, floor)
    means = traces.mean(axis=1)
    grand = (w * means).sum() / w.sum()
    centred = traces - means[:, None] + grand
    return (w[:, None] * centred).sum(axis=0) / w.sum()


def merge(traces, policy=MergePolicy()):
    traces = [np.asarray(t, dtype=np.float64) for t in traces]
    if len({t.size for t in traces}) > 1:
        raise ValueError("traces differ in length")
    if policy.order == "early_clip":
        traces = [clip(t) for t in traces]
    return clip(ccc_center(np.stack(traces), policy.weight_floor))


def write_trace(path, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame_index", "value"))
        for i, v in enumerate(np.asarray(values, dtype=np.float64)):
            w.writerow((i, repr(float(v))))


def read_trace(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame_index", "value"]:
        raise ValueError(f"{path}: not a trace file")
    body = rows[1:]
    idx = [int(r[0]) for r in body]
    if idx != list(range(len(body))):
        raise ValueError(f"{path}: frame indices are not 0..N-1")
    return np.array([float(r[1]) for r in body])


def merge_dirs(trace_dirs, out_dir, policy=MergePolicy()):
    """Merge same-named trace CSVs across directories; returns trial ids written."""
    names = sorted(f for f in os.listdir(trace_dirs[0]) if f.endswith(".csv"))
    for d in trace_dirs[1:]:
        other = sorted(f for f in os.listdir(d) if f.endswith(".csv"))
        if other != names:
            raise ValueError(f"{d} holds a different set of traces than {trace_dirs[0]}")
    os.makedirs(out_dir, exist_ok=True)
    for name in names:
        merged = merge([read_trace(os.path.join(d, name)) for d in trace_dirs], policy)
        write_trace(os.path.join(out_dir, name), merged)
    return [n[:-4] for n in names]
