"""Evaluation metrics: average-precision AUPRC, Welch/paired t-tests, PCA.

AUPRC uses the average-precision formulation: positives are ranked by score
and each contributes its precision-at-rank. Ties are broken by a seeded
pre-shuffle followed by a stable sort, so tied scores are ordered
reproducibly but without bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError, InputError, MetricError


def _ranking(scores: np.ndarray, tie_seed: int) -> np.ndarray:
    perm = np.random.default_rng(tie_seed).permutation(len(scores))
    order = perm[np.argsort(-scores[perm], kind="stable")]
    return order


def auprc(scores, labels, tie_seed: int = 0) -> float:
    """Average precision: mean of precision-at-rank over all positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("auprc expects 1-D scores and labels of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("auprc labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("auprc undefined: no positive labels")
    order = _ranking(scores, tie_seed)
    ranked = labels[order]
    cum_pos = np.cumsum(ranked)
    precision_at = cum_pos / np.arange(1, len(ranked) + 1)
    return float(precision_at[ranked == 1].sum() / n_pos)


def micro_auprc(score_matrix, label_matrix, tie_seed: int = 0) -> float:
    """Flatten all (sample, class) pairs into one binary ranking problem."""
    s = np.asarray(score_matrix, dtype=np.float64)
    y = np.asarray(label_matrix)
    if s.shape != y.shape:
        raise InputError("micro_auprc: score and label shapes differ")
    return auprc(s.reshape(-1), y.reshape(-1), tie_seed=tie_seed)


def prevalence_baseline(labels) -> float:
    """Expected AUPRC of an uninformative ranker: the positive fraction."""
    labels = np.asarray(labels)
    return float(labels.mean())


# ---------------------------------------------------------------------------
# significance testing across seed runs
# ---------------------------------------------------------------------------

@dataclass
class SignificanceReport:
    label: str
    t_stat: float
    p_value: float
    marker: str  # "", "*" (p<0.05), "**" (p<0.01)


def _marker(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def significance(a, b, kind: str = "welch", label: str = "") -> SignificanceReport:
    """Two-sided t-test between two seed-level metric vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InputError("significance needs at least 2 seeds per run")
    if a.var(ddof=1) == 0.0 and b.var(ddof=1) == 0.0:
        # degenerate contract: exact runs
        p = 0.0 if a.mean() != b.mean() else 1.0
        t = float("inf") if p == 0.0 else 0.0
        return SignificanceReport(label, t, p, _marker(p))
    if kind == "welch":
        va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
        t = (a.mean() - b.mean()) / np.sqrt(va + vb)
        df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
        p = 2.0 * stats.t.sf(abs(t), df)
    elif kind == "paired":
        if len(a) != len(b):
            raise InputError("paired t-test needs equal-length runs")
        d = a - b
        t = d.mean() / (d.std(ddof=1) / np.sqrt(len(d)))
        p = 2.0 * stats.t.sf(abs(t), len(d) - 1)
    else:
        raise ConfigError(f"unknown t-test kind '{kind}' (welch|paired)")
    return SignificanceReport(label, float(t), float(p), _marker(float(p)))


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error (sample std over sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise InputError("mean_se of empty vector")
    se = 0.0 if len(v) == 1 else float(v.std(ddof=1) / np.sqrt(len(v)))
    return float(v.mean()), se


# ---------------------------------------------------------------------------
# PCA of stay representations
# ---------------------------------------------------------------------------

def pca_project(matrix, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Top-k principal components via covariance eigendecomposition.

    Returns (coordinates [n, k], explained-variance ratios [k]). Component
    signs follow a deterministic convention: the largest-magnitude loading of
    each component is positive.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("pca_project expects a 2-D matrix")
    n, d = x.shape
    if k > d:
        raise ConfigError(f"k={k} exceeds dimensionality {d}")
    if n < k:
        raise InputError("pca_project needs at least k rows")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order]
    evals_k = np.clip(evals[order], 0.0, None)
    for i in range(k):
        j = np.argmax(np.abs(comps[:, i]))
        if comps[j, i] < 0:
            comps[:, i] = -comps[:, i]
    total = np.clip(evals, 0.0, None).sum()
    ratios = evals_k / total if total > 0 else np.zeros(k)
    return xc @ comps, ratios
