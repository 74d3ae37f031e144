"""AUC and COPC, globally and per scenario slice."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError

SLICES = ("global", "classic", "copilot")


def auc(labels, scores) -> float:
    """Rank-sum (Mann-Whitney) AUC with midranks, so ties count one half.

    Raises:
        UndefinedMetricError: if only one class is present.
    """
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    if y.shape != s.shape:
        raise ContractError(f"labels and scores differ in length: {y.size} vs {s.size}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives",
            n_positives=n_pos, n_negatives=n_neg)
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def copc(labels, scores) -> float:
    """Click over predicted click: mean(labels) / mean(scores)."""
    y = np.asarray(labels, dtype=float).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    if y.size == 0:
        raise UndefinedMetricError("COPC undefined on an empty sample")
    if y.shape != s.shape:
        raise ContractError(f"labels and scores differ in length: {y.size} vs {s.size}")
    pctr = s.mean()
    if not pctr > 0:
        raise UndefinedMetricError("COPC undefined: mean predicted CTR is zero")
    return float(y.mean() / pctr)


@dataclass(frozen=True)
class MetricsReport:
    slice: str
    n_samples: int
    n_positives: int
    realctr: float
    pctr: float
    copc: float
    auc: float | None            # None when the slice holds a single class
    auc_undefined: str | None = None

    @property
    def defined(self):
        return self.auc is not None

    def to_dict(self):
        return asdict(self)


def report(labels, scores, slice_name="global") -> MetricsReport:
    y = np.asarray(labels, dtype=float).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    realctr = float(y.mean())
    pctr = float(s.mean())
    try:
        a, why = auc(y, s), None
    except UndefinedMetricError as exc:
        a, why = None, str(exc)
    return MetricsReport(slice=slice_name, n_samples=int(y.size), n_positives=int(y.sum()),
                         realctr=realctr, pctr=pctr, copc=copc(y, s), auc=a, auc_undefined=why)


def sliced_report(scenarios, labels, scores) -> dict:
    """One report per slice in :data:`SLICES`; an empty slice maps to ``None``.

    ``scenarios`` holds scenario indices (0 classic, 1 copilot) per row.
    """
    scen = np.asarray(scenarios).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    out = {}
    for name in SLICES:
        mask = np.ones_like(scen, dtype=bool) if name == "global" else scen == SLICES.index(name) - 1
        out[name] = report(y[mask], s[mask], name) if mask.any() else None
    return out


def reports_to_json(reports: dict) -> str:
    return json.dumps({k: (v.to_dict() if v is not None else None) for k, v in reports.items()},
                      sort_keys=True)


def format_table(rows: dict, slices=("classic", "copilot")) -> str:
    """Aligned text table: one row per model, AUC and COPC per slice.

    ``rows`` maps a row label to ``{slice: (auc, copc)}``; missing values
    print as ``-``.
    """
    header = ["Model"] + [f"{s} {m}" for s in slices for m in ("AUC", "COPC")]
    body = []
    for label, per_slice in rows.items():
        cells = [label]
        for s in slices:
            a, c = per_slice.get(s, (None, None)) if per_slice else (None, None)
            cells.append("-" if a is None else f"{a:.4f}")
            cells.append("-" if c is None else f"{c:.3f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    return "\n".join(lines) + "\n"
