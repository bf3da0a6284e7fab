"""Evaluation metrics, paired t-tests and run aggregation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn
from .rng import RngStream

QUANTILE_RULE = "linear interpolation between order statistics"

# (upper p bound, tier), checked in order
TIERS = ((0.001, "‡"), (0.01, "†"), (0.05, "*"))
NO_TIER = "−"


class DegenerateTestError(ValueError):
    pass


def confusion_counts(y_true, y_pred, n_classes: int) -> np.ndarray:
    """``n_classes x n_classes`` count matrix, rows indexed by the true class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def balanced_accuracy(confusion) -> float:
    cm = np.asarray(confusion)
    support = cm.sum(axis=1)
    if np.any(support == 0):
        missing = np.flatnonzero(support == 0).tolist()
        raise ValueError(f"classes {missing} have no true instances; recall undefined")
    return float(np.mean(np.diag(cm) / support))


def balanced_accuracy_score(y_true, y_pred, n_classes: Optional[int] = None) -> float:
    """Balanced accuracy over the classes that occur in ``y_true``."""
    y_true = np.asarray(y_true)
    n = n_classes or int(max(np.max(y_true), np.max(y_pred))) + 1
    cm = confusion_counts(y_true, y_pred, n)
    present = cm.sum(axis=1) > 0
    return balanced_accuracy(cm[present])


def overfit_ratio(train_ba: float, test_ba: float) -> float:
    if train_ba <= 0:
        raise ValueError("train balanced accuracy must be positive")
    return test_ba / train_ba


# --------------------------------------------------------------------------- #
# Student t distribution


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """``I_x(a, b)`` for ``a, b > 0`` and ``0 <= x <= 1``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(0.5 * df, 0.5, x)


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf_two_sided(t, df)
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class PairedTestResult:
    t: float
    df: int
    p: float
    tier: str
    # tiers are only awarded to improvements (t > 0)
    annotated: bool


def significance_tier(t: float, p: float) -> str:
    if t <= 0:
        return NO_TIER
    for bound, tier in TIERS:
        if p <= bound:
            return tier
    return NO_TIER


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    """Paired two-sided t-test of ``a`` against ``b`` (``d = a - b``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples need equal 1-D shapes, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("differences have zero variance; t statistic undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    df = n - 1
    p = student_t_sf_two_sided(t, df)
    return PairedTestResult(t, df, p, significance_tier(t, p), t > 0)


# --------------------------------------------------------------------------- #
# subject probe


def probe_subject_accuracy(z, s, rng: RngStream, *, steps: int = 300, lr: float = 0.05,
                           min_trials: int = 10) -> float:
    """Held-out balanced accuracy of a linear softmax probe predicting ``s`` from ``z``.

    Each nuisance value contributes 80% of its trials to fitting and 20% to
    scoring. ``z`` is treated as fixed data.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    values, counts = np.unique(s, return_counts=True)
    usable = values[counts >= min_trials]
    if len(usable) < 2:
        raise ValueError(f"probe needs >= 2 nuisance values with >= {min_trials} trials each")
    mask = np.isin(s, usable)
    z, s = z[mask], np.searchsorted(usable, s[mask])
    k = len(usable)
    fit_idx, held_idx = [], []
    for c in range(k):
        idx = np.flatnonzero(s == c)
        idx = idx[rng.permutation(len(idx))]
        n_held = max(1, int(round(0.2 * len(idx))))
        held_idx.append(idx[:n_held])
        fit_idx.append(idx[n_held:])
    fit_idx, held_idx = np.concatenate(fit_idx), np.concatenate(held_idx)
    mu = z[fit_idx].mean(axis=0)
    sd = z[fit_idx].std(axis=0)
    sd[sd < 1e-12] = 1.0
    zf = (z[fit_idx] - mu) / sd
    zh = (z[held_idx] - mu) / sd
    probe = nn.Dense(z.shape[1], k, "identity", rng=rng.derive("probe-init"))
    opt = nn.AdamW(list(probe.params.values()), lr=lr, weight_decay=0.0)
    for _ in range(steps):
        _, g = nn.softmax_cross_entropy(probe.forward(zf), s[fit_idx])
        probe.backward(g)
        opt.step([probe.grads["weight"], probe.grads["bias"]])
    pred = probe.forward(zh).argmax(axis=1)
    return balanced_accuracy(confusion_counts(s[held_idx], pred, k))


# --------------------------------------------------------------------------- #
# aggregation


@dataclass
class RunResult:
    run_id: int
    seed: int
    fold: int
    censor_mode: str
    censor_method: str
    lam: float
    projection: str
    eval_point: str
    epochs_trained: int
    train_ba: float
    val_ba: float
    test_ba: float
    overfit_ratio: float
    probe_ba: float
    status: str = "ok"

    def as_dict(self) -> dict:
        return asdict(self)


def _five_numbers(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    # fsum keeps the mean independent of run order
    mean = math.fsum(v) / len(v)
    return {"min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4], "mean": mean}


def aggregate(results: Iterable, group_keys: Sequence[str],
              metrics: Sequence[str] = ("test_ba", "overfit_ratio")) -> list[dict]:
    """Per-group quartiles and mean of ``metrics``; groups sorted by key."""
    groups = defaultdict(list)
    for r in results:
        row = r if isinstance(r, dict) else r.as_dict()
        if row.get("status", "ok") != "ok":
            continue
        groups[tuple(row[k] for k in group_keys)].append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) if isinstance(x, str) else x for x in k)):
        rows = groups[key]
        entry = dict(zip(group_keys, key))
        entry["n"] = len(rows)
        for m in metrics:
            for stat, value in _five_numbers([row[m] for row in rows]).items():
                entry[f"{m}_{stat}"] = float(value)
        out.append(entry)
    return out
