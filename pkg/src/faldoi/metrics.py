"""Endpoint-error metrics with matched/unmatched and speed-bucket breakdowns."""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .flowio import FlowField

SPEED_EDGES = (10.0, 40.0)


@dataclass
class FlowMetrics:
    epe_all: float
    epe_matched: float
    epe_unmatched: float
    epe_s0_10: float
    epe_s10_40: float
    epe_s40plus: float
    n_all: int
    n_matched: int
    n_unmatched: int
    n_s0_10: int
    n_s10_40: int
    n_s40plus: int

    def as_line(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            parts.append(f"{f.name}={v:.6f}" if isinstance(v, float) else f"{f.name}={v}")
        return " ".join(parts)

    def append_csv(self, path, label: str | None = None) -> None:
        row = asdict(self)
        if label is not None:
            row = {"label": label, **row}
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                wr.writeheader()
            wr.writerow(row)


def _mean(err: np.ndarray, sel: np.ndarray) -> tuple[float, int]:
    n = int(sel.sum())
    return (float(err[sel].mean()) if n else 0.0), n


def compute_metrics(flow, gt, occlusion_mask=None, invalid_mask=None) -> FlowMetrics:
    """EPE statistics of ``flow`` against ``gt``.

    ``occlusion_mask`` marks unmatched pixels; ``invalid_mask`` pixels, and
    gt cells that are empty, are left out. Empty buckets report 0.
    """
    fu = getattr(flow, "u", flow)
    gu = getattr(gt, "u", gt)
    fu = np.asarray(fu, dtype=np.float64)
    gu = np.asarray(gu, dtype=np.float64)
    if fu.shape != gu.shape:
        raise ValueError(f"flow {fu.shape[:2]} and ground truth {gu.shape[:2]} differ in size")
    valid = np.ones(gu.shape[:2], bool)
    if isinstance(gt, FlowField):
        valid &= gt.known
    if invalid_mask is not None:
        inv = np.asarray(invalid_mask)
        if inv.shape != valid.shape:
            raise ValueError("invalid mask does not match the flow size")
        valid &= ~(inv > 0.5 if inv.dtype.kind == "f" else inv.astype(bool))
    if occlusion_mask is not None:
        occ = np.asarray(occlusion_mask)
        if occ.shape != valid.shape:
            raise ValueError("occlusion mask does not match the flow size")
        occ = occ > 0.5 if occ.dtype.kind == "f" else occ.astype(bool)
    else:
        occ = np.zeros(valid.shape, bool)
    err = np.hypot(fu[..., 0] - gu[..., 0], fu[..., 1] - gu[..., 1])
    speed = np.hypot(gu[..., 0], gu[..., 1])
    lo, hi = SPEED_EDGES
    all_, n_all = _mean(err, valid)
    mat, n_mat = _mean(err, valid & ~occ)
    unm, n_unm = _mean(err, valid & occ)
    s0, n0 = _mean(err, valid & (speed < lo))
    s1, n1 = _mean(err, valid & (speed >= lo) & (speed < hi))
    s2, n2 = _mean(err, valid & (speed >= hi))
    return FlowMetrics(all_, mat, unm, s0, s1, s2, n_all, n_mat, n_unm, n0, n1, n2)
