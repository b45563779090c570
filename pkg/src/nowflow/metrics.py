"""Forecast verification: contingency scores, pooled CSI, FSS, Gaussian CRPS and the report."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

# SEVIR VIL thresholds rescaled to the [0, 1] data range
SEVIR_THRESHOLDS = tuple(v / 255.0 for v in (16, 74, 133, 160, 181, 219))
TIMESTEP_MINUTES = 5
CATEGORICAL = ("FAR", "CSI", "HSS", "CSI-P16", "FSS-P16")


@dataclass
class ContingencyTable:
    H: int = 0
    M: int = 0
    F: int = 0
    C: int = 0

    @property
    def total(self) -> int:
        return self.H + self.M + self.F + self.C

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(self.H + other.H, self.M + other.M, self.F + other.F, self.C + other.C)


def check_thresholds(thresholds: Sequence[float]) -> tuple[float, ...]:
    th = tuple(float(u) for u in thresholds)
    if not th or any(b <= a for a, b in zip(th, th[1:])):
        raise ValueError(f"thresholds must be non-empty and strictly increasing, got {th}")
    return th


def binarize(field: np.ndarray, u: float) -> np.ndarray:
    return np.asarray(field) > u


def accumulate(pred_mask: np.ndarray, obs_mask: np.ndarray,
               table: ContingencyTable | None = None) -> ContingencyTable:
    pred_mask = np.asarray(pred_mask, dtype=bool)
    obs_mask = np.asarray(obs_mask, dtype=bool)
    if pred_mask.shape != obs_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {obs_mask.shape}")
    table = table if table is not None else ContingencyTable()
    h = int(np.count_nonzero(pred_mask & obs_mask))
    f = int(np.count_nonzero(pred_mask & ~obs_mask))
    m = int(np.count_nonzero(~pred_mask & obs_mask))
    return table + ContingencyTable(h, m, f, pred_mask.size - h - f - m)


def far(t: ContingencyTable) -> float:
    d = t.H + t.F
    return t.F / d if d else 0.0


def csi(t: ContingencyTable) -> float:
    """NaN when H+M+F = 0; such thresholds drop out of the -M mean."""
    d = t.H + t.M + t.F
    return t.H / d if d else float("nan")


def hss(t: ContingencyTable) -> float:
    # python ints keep the products exact for large pixel counts
    H, M, F, C = t.H, t.M, t.F, t.C
    d = (H + M) * (M + C) + (H + F) * (F + C)
    return 2 * (H * C - M * F) / d if d else 0.0


def categorical_scores(table: ContingencyTable) -> tuple[float, float, float]:
    """(FAR, CSI, HSS)."""
    return far(table), csi(table), hss(table)


def maxpool(field: np.ndarray, block: int = 16) -> np.ndarray:
    """Max over non-overlapping block x block tiles of the last two axes; replicate-pads ragged edges."""
    field = np.asarray(field)
    h, w = field.shape[-2:]
    ph, pw = -h % block, -w % block
    if ph or pw:
        field = np.pad(field, [(0, 0)] * (field.ndim - 2) + [(0, ph), (0, pw)], mode="edge")
    hh, ww = field.shape[-2] // block, field.shape[-1] // block
    tiles = field.reshape(*field.shape[:-2], hh, block, ww, block)
    return tiles.max(axis=(-3, -1))


def _window_sums(a: np.ndarray, n: int) -> np.ndarray:
    """Sums over the clipped n x n window with offsets -(n//2) .. n-1-n//2 on the last two axes."""
    lo, hi = n // 2, n - 1 - n // 2
    h, w = a.shape[-2:]
    sat = np.zeros(a.shape[:-2] + (h + 1, w + 1))
    sat[..., 1:, 1:] = a.cumsum(-2).cumsum(-1)
    r0 = np.clip(np.arange(h) - lo, 0, h)
    r1 = np.clip(np.arange(h) + hi + 1, 0, h)
    c0 = np.clip(np.arange(w) - lo, 0, w)
    c1 = np.clip(np.arange(w) + hi + 1, 0, w)
    return (sat[..., r1[:, None], c1[None, :]] - sat[..., r0[:, None], c1[None, :]]
            - sat[..., r1[:, None], c0[None, :]] + sat[..., r0[:, None], c0[None, :]])


def neighborhood_fractions(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    valid = _window_sums(np.ones(mask.shape[-2:]), n)
    return _window_sums(mask, n) / valid


def fss_terms(pred_mask: np.ndarray, obs_mask: np.ndarray, n: int = 16) -> tuple[float, float]:
    """(sum (Sf - So)^2, sum Sf^2 + So^2) so partial results can be pooled before dividing."""
    if np.shape(pred_mask) != np.shape(obs_mask):
        raise ValueError(f"mask shapes differ: {np.shape(pred_mask)} vs {np.shape(obs_mask)}")
    sf = neighborhood_fractions(pred_mask, n)
    so = neighborhood_fractions(obs_mask, n)
    return float(np.sum((sf - so) ** 2)), float(np.sum(sf ** 2) + np.sum(so ** 2))


def _fss_from(num: float, den: float) -> float:
    return 1.0 - num / den if den > 0 else float("nan")


def fss(pred_mask: np.ndarray, obs_mask: np.ndarray, n: int = 16) -> float:
    """Fractions skill score; NaN when both masks are empty."""
    return _fss_from(*fss_terms(pred_mask, obs_mask, n))


def crps_gaussian(x, mu, sigma) -> np.ndarray:
    """Closed-form CRPS of N(mu, sigma^2) at x; sigma = 0 gives |x - mu|."""
    x, mu, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, mu, sigma)))
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    shape = x.shape
    out = np.array(np.abs(x - mu), ndmin=1)
    x, mu, sigma = (np.array(v, ndmin=1) for v in (x, mu, sigma))
    pos = sigma > 0
    if np.any(pos):
        s = sigma[pos]
        z = (x[pos] - mu[pos]) / s
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
        out[pos] = s * (z * (2 * ndtr(z) - 1) + 2 * pdf - 1 / np.sqrt(np.pi))
    return out.reshape(shape)


def ensemble_mean(fields: np.ndarray, axis: int = 0) -> np.ndarray:
    fields = np.asarray(fields)
    if fields.shape[axis] < 1:
        raise ValueError("ensemble needs at least one member")
    return fields.mean(axis=axis)


def crps_ensemble(x_field: np.ndarray, ensemble: np.ndarray, axis: int = 0) -> float:
    """Mean Gaussian CRPS with per-pixel moments from the ensemble (population std)."""
    ensemble = np.asarray(ensemble, dtype=np.float64)
    if ensemble.shape[axis] < 1:
        raise ValueError("ensemble needs at least one member")
    mu = ensemble.mean(axis=axis)
    sigma = ensemble.std(axis=axis)
    return float(np.mean(crps_gaussian(x_field, mu, sigma)))


@dataclass
class MetricReport:
    """Per (threshold, lead) scores plus threshold-mean aggregates.

    ``per_lead[(u, k)][name]`` uses lead index k (lead time 5*(k+1) minutes).
    ``per_threshold[u][name]`` uses tables summed over every lead time.
    """

    thresholds: tuple[float, ...]
    n_leads: int
    ensemble_size: int
    per_lead: dict = field(default_factory=dict)
    per_threshold: dict = field(default_factory=dict)
    last_frame: dict = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)
    fss_neighborhood: int = 16
    pool: int = 16

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "lead_time_minutes", "metric", "value"])
        for (u, k), scores in sorted(self.per_lead.items()):
            for name in CATEGORICAL:
                w.writerow([_fmt(u), TIMESTEP_MINUTES * (k + 1), name, _fmt(scores[name])])
        for u, scores in sorted(self.per_threshold.items()):
            for name in CATEGORICAL:
                w.writerow([_fmt(u), "all", name, _fmt(scores[name])])
        for name, v in self.last_frame.items():
            w.writerow(["mean" if name.endswith("-M") else _fmt(self.thresholds[-1]),
                        TIMESTEP_MINUTES * self.n_leads, name, _fmt(v)])
        for name, v in self.aggregates.items():
            w.writerow(["mean", "all", name, _fmt(v)])
        return buf.getvalue()


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and np.isnan(v) else repr(float(v))


def _nanmean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def build_report(forecasts: np.ndarray, truths: np.ndarray, thresholds: Sequence[float] = SEVIR_THRESHOLDS,
                 pool: int = 16, fss_n: int = 16) -> MetricReport:
    """Score ensembles ``(B, N, L, H, W)`` against truths ``(B, L, H, W)``.

    Categorical scores use the ensemble mean; CRPS uses the ensemble moments.
    """
    thresholds = check_thresholds(thresholds)
    forecasts = np.asarray(forecasts, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if forecasts.ndim != 5 or truths.ndim != 4:
        raise ValueError(f"expected (B, N, L, H, W) forecasts and (B, L, H, W) truths, got {forecasts.shape}, {truths.shape}")
    if forecasts.shape[2] != truths.shape[1]:
        raise ValueError(f"lead-time counts differ: {forecasts.shape[2]} vs {truths.shape[1]}")
    if forecasts.shape[0] != truths.shape[0] or forecasts.shape[3:] != truths.shape[2:]:
        raise ValueError(f"forecast/truth shapes inconsistent: {forecasts.shape} vs {truths.shape}")
    n_leads = truths.shape[1]
    mean = ensemble_mean(forecasts, axis=1)
    mean_pool, truth_pool = maxpool(mean, pool), maxpool(truths, pool)
    report = MetricReport(thresholds, n_leads, forecasts.shape[1], fss_neighborhood=fss_n, pool=pool)

    for u in thresholds:
        pm, om = binarize(mean, u), binarize(truths, u)
        ppm, opm = binarize(mean_pool, u), binarize(truth_pool, u)
        totals = {"tab": ContingencyTable(), "pool": ContingencyTable(), "num": 0.0, "den": 0.0}
        for k in range(n_leads):
            tab = accumulate(pm[:, k], om[:, k])
            ptab = accumulate(ppm[:, k], opm[:, k])
            num, den = fss_terms(pm[:, k], om[:, k], fss_n)
            report.per_lead[(u, k)] = _scores(tab, ptab, num, den)
            totals["tab"] += tab
            totals["pool"] += ptab
            totals["num"] += num
            totals["den"] += den
        report.per_threshold[u] = _scores(totals["tab"], totals["pool"], totals["num"], totals["den"])

    for name, key in (("CSI-M", "CSI"), ("CSI-P16-M", "CSI-P16"), ("FSS-M-P16", "FSS-P16"),
                      ("HSS-M", "HSS"), ("FAR-M", "FAR")):
        report.aggregates[name] = _nanmean(report.per_threshold[u][key] for u in thresholds)
    report.aggregates["CRPS"] = crps_ensemble(truths, forecasts, axis=1)
    last = n_leads - 1
    report.last_frame["CSI-M"] = _nanmean(report.per_lead[(u, last)]["CSI"] for u in thresholds)
    report.last_frame["CSI-top"] = report.per_lead[(thresholds[-1], last)]["CSI"]
    return report


def _scores(tab: ContingencyTable, ptab: ContingencyTable, num: float, den: float) -> dict:
    f, c, h = categorical_scores(tab)
    return {"FAR": f, "CSI": c, "HSS": h, "CSI-P16": csi(ptab), "FSS-P16": _fss_from(num, den),
            "table": tab, "pooled_table": ptab}


def persistence_forecast(past: np.ndarray, n_leads: int = 12) -> np.ndarray:
    """(B, T_in, H, W) past frames -> (B, 1, n_leads, H, W) repeating the last observation."""
    past = np.asarray(past)
    return np.repeat(past[:, None, -1:], n_leads, axis=2)
