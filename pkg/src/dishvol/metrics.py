"""Accuracy and stability metrics over batches of volume estimates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ZeroMean, ZeroTrueVolume


def mape_item(true_v: float, estimates) -> float:
    """Mean absolute percentage error of one item's estimates."""
    est = np.asarray(estimates, dtype=float)
    if len(est) == 0:
        raise ValueError("estimates must be non-empty")
    if true_v <= 0:
        raise ZeroTrueVolume("true volume must be positive")
    return float(np.mean(np.abs(true_v - est) / true_v) * 100.0)


def cv_item(estimates) -> float:
    """Coefficient of variation: population std over mean, in percent."""
    est = np.asarray(estimates, dtype=float)
    if len(est) == 0:
        raise ValueError("estimates must be non-empty")
    mean = est.mean()
    if mean <= 0:
        raise ZeroMean("mean estimate must be positive")
    return float(np.sqrt(np.mean((est - mean) ** 2)) / mean * 100.0)


def mape_overall(item_mapes) -> float:
    """Unweighted mean of the per-item MAPE values."""
    vals = np.asarray(item_mapes, dtype=float)
    if len(vals) == 0:
        raise ValueError("need at least one item")
    return float(vals.mean())


@dataclass
class EstimateRecord:
    pair: str
    run: int
    label: int
    volume_ml: float

    def to_json(self) -> str:
        return json.dumps({"pair": self.pair, "run": self.run,
                           "label": self.label,
                           "volume_ml": self.volume_ml})

    @staticmethod
    def from_json(line: str) -> "EstimateRecord":
        d = json.loads(line)
        return EstimateRecord(pair=str(d["pair"]), run=int(d["run"]),
                              label=int(d["label"]),
                              volume_ml=float(d["volume_ml"]))


@dataclass
class ItemMetrics:
    pair: str
    label: int
    true_ml: float
    n_estimates: int
    mean_ml: float
    mape: float
    cv: float


@dataclass
class MetricsReport:
    items: list
    overall_mape: float
    signed_errors_pct: np.ndarray = field(repr=False, default=None)

    def to_json_dict(self) -> dict:
        return {
            "mape_overall_pct": self.overall_mape,
            "items": [{
                "pair": it.pair, "label": it.label,
                "true_ml": it.true_ml, "n_estimates": it.n_estimates,
                "mean_ml": it.mean_ml, "mape_pct": it.mape,
                "cv_pct": it.cv,
            } for it in self.items],
        }


def load_records(path) -> list:
    lines = Path(path).read_text().strip().splitlines()
    return [EstimateRecord.from_json(ln) for ln in lines if ln.strip()]


def compute_metrics(records, truth: dict) -> MetricsReport:
    """Aggregate records into per-item MAPE/CV and the overall MAPE.

    ``truth`` maps pair name -> {label (str or int) -> true milliliters}.
    An item is one (pair, label) combination.
    """
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.pair, rec.label), []).append(rec.volume_ml)
    items = []
    signed = []
    for (pair, label), est in sorted(groups.items()):
        pair_truth = truth.get(pair)
        if pair_truth is None:
            raise KeyError(f"no ground truth for pair {pair!r}")
        true_ml = pair_truth.get(str(label), pair_truth.get(label))
        if true_ml is None:
            raise KeyError(f"no ground truth for item {label} of {pair!r}")
        true_ml = float(true_ml)
        est_arr = np.asarray(est, dtype=float)
        items.append(ItemMetrics(
            pair=pair, label=label, true_ml=true_ml,
            n_estimates=len(est_arr), mean_ml=float(est_arr.mean()),
            mape=mape_item(true_ml, est_arr), cv=cv_item(est_arr)))
        signed.extend(((est_arr - true_ml) / true_ml * 100.0).tolist())
    return MetricsReport(items=items,
                         overall_mape=mape_overall([it.mape for it in items]),
                         signed_errors_pct=np.asarray(signed))
