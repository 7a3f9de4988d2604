"""Evaluation statistics: AUROC, point-biserial correlation, Welch's t,
Cohen's d, Bonferroni correction and region ranking.

Scores are anomaly-oriented throughout (larger = more anomalous) and labels
are 0 for controls, 1 for patients.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Sequence, Tuple

import numpy as np

from .errors import ContractError, NumericError

# |d| range of the top regions in the clinical reference cohort, shown for comparison
REFERENCE_TOP_REGION_D_RANGE = (0.42, 0.57)


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int).ravel()
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 (control) or 1 (patient)")
    return y


def average_ranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], len(sv)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(v))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Area under the ROC curve as the normalised Mann-Whitney U.

    Equals the fraction of (patient, control) pairs in which the patient
    scores higher, ties counting one half.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _labels(labels)
    if s.shape != y.shape:
        raise ContractError(f"{len(s)} scores but {len(y)} labels")
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ContractError("AUROC needs both controls and patients")
    ranks = average_ranks(s)
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
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
        if abs(delta - 1.0) < tol:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    # the continued fraction converges fast on the side x < (a + 1) / (a + b + 2)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc_reg(0.5 * df, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def student_t_cdf(t: float, df: float) -> float:
    return 1.0 - student_t_sf(t, df) if t >= 0 else student_t_sf(-t, df)


def point_biserial(scores, labels) -> Tuple[float, float]:
    """Pearson r between scores and the 0/1 label, with a two-sided p-value.

    p comes from t = r * sqrt((n - 2) / (1 - r^2)) on n - 2 degrees of freedom.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _labels(labels).astype(np.float64)
    n = len(s)
    if n < 3:
        raise ContractError("point-biserial correlation needs n >= 3")
    if y.min() == y.max():
        raise ContractError("point-biserial correlation needs both classes")
    sc = s - s.mean()
    if not np.any(sc):
        raise NumericError("scores have zero variance")
    yc = y - y.mean()
    r = float((sc @ yc) / math.sqrt((sc @ sc) * (yc @ yc)))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, 2.0 * student_t_sf(abs(t), n - 2)


def two_sample_t(group_a, group_b) -> Tuple[float, float]:
    """Welch's t statistic and two-sided p (Welch-Satterthwaite df)."""
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ContractError("each group needs at least 2 values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0:
        raise NumericError("both groups have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return float(t), 2.0 * student_t_sf(abs(t), df)


def cohens_d(group_a, group_b) -> float:
    """(mean_a - mean_b) / pooled sd, pooled with n - 1 denominators."""
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    na, nb = len(a), len(b)
    if na + nb < 3 or na == 0 or nb == 0:
        raise ContractError("Cohen's d needs non-empty groups with n_a + n_b >= 3")
    pooled = ((na - 1) * a.var(ddof=1 if na > 1 else 0) + (nb - 1) * b.var(ddof=1 if nb > 1 else 0)) / (na + nb - 2)
    if pooled <= 0:
        raise NumericError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def bonferroni(p_values, alpha: float = 0.05) -> np.ndarray:
    """Flags p_i < alpha / m."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if p.min() < 0 or p.max() > 1:
        raise ContractError("p-values must lie in [0, 1]")
    return p < alpha / p.size


@dataclass
class RegionEffect:
    region_id: int
    name: str
    cohens_d: float
    p_value: float
    significant: bool = False


def region_effects(table, labels, region_ids=None, names=None, alpha: float = 0.05) -> List[RegionEffect]:
    """Patient-vs-control effect per region column.

    ``cohens_d`` is (control - patient) so that lower patient log-likelihood
    gives a positive effect; the ranking uses |d| so orientation is cosmetic.
    """
    x = np.asarray(table, dtype=np.float64)
    y = _labels(labels)
    if x.ndim != 2 or x.shape[0] != len(y):
        raise ContractError(f"region table shape {x.shape} does not match {len(y)} labels")
    r = x.shape[1]
    region_ids = list(range(1, r + 1)) if region_ids is None else [int(i) for i in region_ids]
    names = [f"region_{i:03d}" for i in region_ids] if names is None else list(names)
    out = []
    for j in range(r):
        ctrl, pat = x[y == 0, j], x[y == 1, j]
        try:
            d = cohens_d(ctrl, pat)
        except NumericError:
            d = 0.0
        try:
            _, p = two_sample_t(ctrl, pat)
        except NumericError:
            p = 1.0
        out.append(RegionEffect(region_ids[j], names[j], d, p))
    flags = bonferroni([e.p_value for e in out], alpha)
    for e, f in zip(out, flags):
        e.significant = bool(f)
    return out


def rank_regions(table, labels, k: int, region_ids=None, names=None, alpha: float = 0.05) -> List[RegionEffect]:
    """Top-k regions by |Cohen's d|, descending; ties go to the lower region id."""
    effects = region_effects(table, labels, region_ids, names, alpha)
    if k > len(effects):
        raise ContractError(f"k={k} exceeds region count {len(effects)}")
    effects.sort(key=lambda e: (-abs(e.cohens_d), e.region_id))
    return effects[:k]


# ----------------------------------------------------------------- report

@dataclass
class MethodResult:
    method: str
    auroc: float
    correlation: float
    corr_p_value: float
    welch_t: float
    welch_p_value: float
    n_controls: int
    n_patients: int


@dataclass
class EvaluationReport:
    methods: List[MethodResult] = field(default_factory=list)
    regions: List[RegionEffect] = field(default_factory=list)
    top_k: int = 10
    alpha: float = 0.05
    notes: List[str] = field(default_factory=list)

    @property
    def corrected_alpha(self) -> float:
        return self.alpha / max(len(self.regions), 1)

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)

    def top_regions(self) -> List[RegionEffect]:
        ranked = sorted(self.regions, key=lambda e: (-abs(e.cohens_d), e.region_id))
        return ranked[:min(self.top_k, len(ranked))]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("method\tauroc\tcorrelation\tcorr_p_value\twelch_t\twelch_p_value\tn_controls\tn_patients\n")
        for m in self.methods:
            buf.write(f"{m.method}\t{m.auroc:.6f}\t{m.correlation:.6f}\t{m.corr_p_value:.6g}\t"
                      f"{m.welch_t:.6f}\t{m.welch_p_value:.6g}\t{m.n_controls}\t{m.n_patients}\n")
        return buf.getvalue()

    def regions_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("rank\tregion_id\tname\tcohens_d\tp_value\tbonferroni_significant\n")
        ranked = sorted(self.regions, key=lambda e: (-abs(e.cohens_d), e.region_id))
        for i, e in enumerate(ranked, 1):
            buf.write(f"{i}\t{e.region_id}\t{e.name}\t{e.cohens_d:.6f}\t{e.p_value:.6g}\t{int(e.significant)}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["Normative methods: patients vs controls", ""]
        lines.append(f"{'Method':<24}{'AUROC':>8}{'Correlation':>14}{'P-value':>12}")
        lines.append("-" * 58)
        for m in self.methods:
            p = "<0.001" if m.corr_p_value < 0.001 else f"{m.corr_p_value:.3f}"
            lines.append(f"{m.method:<24}{m.auroc:>8.3f}{m.correlation:>14.3f}{p:>12}")
        if self.regions:
            n_sig_raw = sum(e.p_value < self.alpha for e in self.regions)
            n_sig = sum(e.significant for e in self.regions)
            lines += ["", f"Region-level analysis ({len(self.regions)} regions): "
                          f"{n_sig_raw} with p < {self.alpha}, {n_sig} after Bonferroni "
                          f"(threshold {self.corrected_alpha:.3g})",
                      f"Top {min(self.top_k, len(self.regions))} regions by |Cohen's d| "
                      f"(reference range for comparison: {REFERENCE_TOP_REGION_D_RANGE[0]}-{REFERENCE_TOP_REGION_D_RANGE[1]})"]
            for i, e in enumerate(self.top_regions(), 1):
                lines.append(f"  {i:>2}. {e.name:<14} d={e.cohens_d:+.3f}  p={e.p_value:.3g}")
        for note in self.notes:
            lines.append(note)
        return "\n".join(lines) + "\n"


def evaluate_method(method: str, scores, labels) -> MethodResult:
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    a = auroc(s, y)
    try:
        r, p = point_biserial(s, y)
    except NumericError:
        r, p = 0.0, 1.0
    try:
        t, tp = two_sample_t(s[y == 1], s[y == 0])
    except (NumericError, ContractError):
        t, tp = 0.0, 1.0
    return MethodResult(method, a, r, p, t, tp, int((y == 0).sum()), int((y == 1).sum()))


def build_report(method_scores: Mapping[str, Tuple[Sequence[float], Sequence[int]]],
                 region_table=None, region_labels=None, region_ids=None, region_names=None,
                 top_k: int = 10, alpha: float = 0.05) -> EvaluationReport:
    """Assemble the per-method table and, when given, the region analysis."""
    report = EvaluationReport(top_k=top_k, alpha=alpha)
    for name, (scores, labels) in method_scores.items():
        y = _labels(labels)
        if y.min() == y.max():
            report.notes.append(f"{name}: single-class evaluation cohort, AUROC undefined")
            continue
        report.methods.append(evaluate_method(name, scores, y))
    if region_table is not None and len(region_table):
        y = _labels(region_labels)
        if y.min() != y.max():
            report.regions = region_effects(region_table, y, region_ids, region_names, alpha)
    return report


def violin_rows(method_scores: Mapping[str, Tuple[Sequence[str], Sequence[float], Sequence[int]]]) -> str:
    """Long-form per-subject scores by method and cohort for external plotting."""
    buf = io.StringIO()
    buf.write("method\tsubject_id\tcohort\tscore\n")
    for method, (ids, scores, labels) in method_scores.items():
        for sid, s, y in zip(ids, scores, labels):
            buf.write(f"{method}\t{sid}\t{'patient' if int(y) else 'control'}\t{float(s):.9g}\n")
    return buf.getvalue()
