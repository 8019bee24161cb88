"""Image-quality and correlation scores for enhanced contact maps, the
distance-stratified correlation profile and the loop weighted score."""

import csv
from dataclasses import dataclass, field
import io
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .errors import DomainError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MAX_VALUE = 1.0
SSIM_WINDOW = 11


def _as_pair(pred, target, clamp=True):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DomainError("empty input")
    if clamp:
        p = np.clip(p, 0.0, MAX_VALUE)
    return p, t


def _ssim_from_stats(mu_p, mu_t, var_p, var_t, cov):
    num = (2 * mu_p * mu_t + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_p ** 2 + mu_t ** 2 + SSIM_C1) * (var_p + var_t + SSIM_C2)
    return num / den


def ssim(pred, target, windowed=False, clamp=True):
    """Structural similarity with C1 = 0.01**2 and C2 = 0.03**2.

    By default the means, variances and covariance are taken over the whole
    image (one window, population statistics). With ``windowed=True`` the same
    expression is evaluated on every 11x11 uniform window and averaged, which
    is closer to common image-processing toolkits.

    Args:
        pred: predicted map; clamped to [0, 1] unless ``clamp`` is False.
        target: reference map of the same shape.

    Returns:
        Scalar in [-1, 1].
    """
    p, t = _as_pair(pred, target, clamp)
    if not windowed:
        mu_p, mu_t = p.mean(), t.mean()
        cov = ((p - mu_p) * (t - mu_t)).mean()
        return float(_ssim_from_stats(mu_p, mu_t, p.var(), t.var(), cov))
    if p.ndim != 2 or min(p.shape) < SSIM_WINDOW:
        raise DomainError(f"windowed SSIM needs a 2D map of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    wp = sliding_window_view(p, (SSIM_WINDOW, SSIM_WINDOW))
    wt = sliding_window_view(t, (SSIM_WINDOW, SSIM_WINDOW))
    axes = (-2, -1)
    mu_p, mu_t = wp.mean(axis=axes), wt.mean(axis=axes)
    var_p = wp.var(axis=axes)
    var_t = wt.var(axis=axes)
    cov = (wp * wt).mean(axis=axes) - mu_p * mu_t
    return float(_ssim_from_stats(mu_p, mu_t, var_p, var_t, cov).mean())


def mse(pred, target, clamp=True):
    p, t = _as_pair(pred, target, clamp)
    return float(((p - t) ** 2).mean())


def psnr(pred, target, clamp=True):
    """``10 log10(MAX**2 / MSE)`` with MAX = 1. Identical inputs give ``inf``."""
    err = mse(pred, target, clamp)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(MAX_VALUE ** 2 / err)


def _pearson(a, b):
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float((da * da).sum())) * math.sqrt(float((db * db).sum()))
    if den == 0:
        return math.nan
    return float(np.clip((da * db).sum() / den, -1.0, 1.0))


def undefined_reason(pred, target):
    """Why a correlation of ``pred`` and ``target`` is undefined, or None."""
    p = np.ravel(pred)
    t = np.ravel(target)
    if p.size < 2:
        return "fewer than two values"
    if np.all(p == p[0]):
        return "prediction is constant"
    if np.all(t == t[0]):
        return "target is constant"
    return None


def pcc(pred, target, clamp=True):
    """Pearson correlation over flattened pixels; NaN when either side is constant."""
    p, t = _as_pair(pred, target, clamp)
    if undefined_reason(p, t):
        return math.nan
    return _pearson(p.ravel(), t.ravel())


def srcc(pred, target, clamp=True):
    """Spearman correlation: Pearson correlation of average-tied ranks."""
    p, t = _as_pair(pred, target, clamp)
    if undefined_reason(p, t):
        return math.nan
    return _pearson(rankdata(p.ravel()), rankdata(t.ravel()))


@dataclass
class DistanceProfile:
    rows: list  # (distance, pcc) for every defined diagonal
    skipped: list  # distances whose diagonal is constant on either side

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["distance_bins", "pcc"])
        for d, value in self.rows:
            writer.writerow([d, f"{value:.10g}"])
        return buf.getvalue()


def pcc_by_distance(pred_map, target_map, max_distance, clamp=True):
    """Pearson correlation between matching diagonals at offsets 0..max_distance.

    Offsets beyond ``n - 1`` produce nothing. Diagonals where either map is
    constant (including single-pixel diagonals) are listed in ``skipped``.
    """
    p, t = _as_pair(pred_map, target_map, clamp)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise DomainError(f"expected square maps, got {p.shape}")
    rows, skipped = [], []
    for d in range(min(max_distance, p.shape[0] - 1) + 1):
        a, b = np.diagonal(p, d), np.diagonal(t, d)
        if undefined_reason(a, b):
            skipped.append(d)
        else:
            rows.append((d, _pearson(a, b)))
    return DistanceProfile(rows, skipped)


# ---------------------------------------------------------------------------
# Aggregation over patch pairs


METRIC_NAMES = ("ssim", "psnr", "pcc", "srcc")


@dataclass
class MetricReport:
    """Unweighted means of per-patch scores.

    Undefined per-patch values (constant patches for the correlations, exact
    matches for PSNR) are left out of the mean and counted in ``notes``.
    """

    ssim: float
    psnr: float
    pcc: float
    srcc: float
    n_patches: int
    psnr_infinite: bool = False
    notes: list = field(default_factory=list)
    per_distance: list = field(default_factory=list)

    def rows(self):
        return [(name, getattr(self, name)) for name in METRIC_NAMES]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in self.rows():
            writer.writerow([name, _fmt(value)])
        writer.writerow(["n_patches", self.n_patches])
        writer.writerow(["psnr_infinite", str(self.psnr_infinite).lower()])
        return buf.getvalue()

    def to_text(self):
        width = max(len(n) for n in METRIC_NAMES + ("n_patches",))
        lines = [f"{name:<{width}}  {_fmt(value):>14}" for name, value in self.rows()]
        lines.append(f"{'n_patches':<{width}}  {self.n_patches:>14d}")
        if self.psnr_infinite:
            lines.append("psnr is infinite: prediction equals target")
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


def _fmt(value):
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


def _mean_defined(values):
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.nan


def evaluate_patches(preds, targets, windowed=False):
    """Score every (prediction, target) patch pair and average.

    Args:
        preds: (P, H, W) predictions, clamped to [0, 1] before scoring.
        targets: (P, H, W) references.

    Returns:
        :class:`MetricReport`.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.ndim == 2:
        preds, targets = preds[None], targets[None]
    if preds.shape != targets.shape:
        raise DomainError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    if len(preds) == 0:
        raise DomainError("no patches to evaluate")
    scores = {name: [] for name in METRIC_NAMES}
    notes = []
    for k, (p, t) in enumerate(zip(preds, targets)):
        scores["ssim"].append(ssim(p, t, windowed=windowed))
        scores["psnr"].append(psnr(p, t))
        scores["pcc"].append(pcc(p, t))
        scores["srcc"].append(srcc(p, t))
        reason = undefined_reason(np.clip(p, 0, MAX_VALUE), t)
        if reason:
            notes.append(f"patch {k}: pcc/srcc undefined ({reason})")
    psnr_values = scores["psnr"]
    all_infinite = all(math.isinf(v) for v in psnr_values)
    n_inf = sum(math.isinf(v) for v in psnr_values)
    if n_inf and not all_infinite:
        notes.append(f"{n_inf} patch(es) with zero error left out of the psnr mean")
    return MetricReport(
        ssim=_mean_defined(scores["ssim"]),
        psnr=math.inf if all_infinite else _mean_defined(psnr_values),
        pcc=_mean_defined(scores["pcc"]),
        srcc=_mean_defined(scores["srcc"]),
        n_patches=len(preds),
        psnr_infinite=all_infinite,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Loop weighted score


@dataclass
class LoopSets:
    """Loop counts for two cell lines.

    ``totals[l]`` is the number of loops specific to line ``l``; ``overlaps[(l, s)]``
    is how many of those touch super-enhancers specific to line ``s``.
    """

    lines: tuple
    totals: dict
    overlaps: dict

    def __post_init__(self):
        if len(self.lines) != 2:
            raise DomainError("loop weighted scores compare exactly two cell lines")
        for line in self.lines:
            if self.totals.get(line, 0) <= 0:
                raise DomainError(f"loop total for {line} must be positive")
        for (line, se), count in self.overlaps.items():
            if line not in self.lines or se not in self.lines:
                raise DomainError(f"unknown cell line in overlap key {(line, se)}")
            if not 0 <= count <= self.totals[line]:
                raise DomainError(f"overlap count {count} for {(line, se)} outside [0, {self.totals[line]}]")

    @classmethod
    def from_counts(cls, counts, totals, lines=("GM12878", "K562")):
        """Build from flat lists.

        ``counts`` is ordered by super-enhancer set, then by loop line:
        ``A[l1, s1], A[l2, s1], A[l1, s2], A[l2, s2]``; ``totals`` is ``N[l1], N[l2]``.
        """
        if len(counts) != 4 or len(totals) != 2:
            raise DomainError("expected four overlap counts and two loop totals")
        overlaps = {}
        it = iter(counts)
        for se in lines:
            for line in lines:
                overlaps[(line, se)] = next(it)
        return cls(tuple(lines), dict(zip(lines, totals)), overlaps)


@dataclass
class LoopScoreRow:
    se: str
    line: str
    count: int
    total: int
    proportion: float
    weight: float
    defined: bool


def loop_weighted_score(loops):
    """Proportion ``P = A / N`` and weight ``W = P / (sum of P over both lines)``.

    Returns one :class:`LoopScoreRow` per (super-enhancer set, cell line). When
    both proportions for a super-enhancer set are zero its weights are NaN and
    ``defined`` is False.
    """
    rows = []
    for se in loops.lines:
        props = {line: loops.overlaps.get((line, se), 0) / loops.totals[line] for line in loops.lines}
        denom = sum(props.values())
        for line in loops.lines:
            weight = props[line] / denom if denom > 0 else math.nan
            rows.append(LoopScoreRow(se, line, loops.overlaps.get((line, se), 0), loops.totals[line],
                                     props[line], weight, denom > 0))
    return rows


def loop_table_text(rows):
    header = f"{'SE set':<10} {'line':<10} {'A':>6} {'N':>6} {'P':>7} {'W':>7}"
    lines = [header]
    for r in rows:
        w = f"{r.weight:7.3f}" if r.defined else "    nan"
        lines.append(f"{r.se:<10} {r.line:<10} {r.count:>6d} {r.total:>6d} {r.proportion:7.3f} {w}")
    return "\n".join(lines) + "\n"


def loop_table_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["se_set", "line", "count", "total", "proportion", "weight"])
    for r in rows:
        writer.writerow([r.se, r.line, r.count, r.total, f"{r.proportion:.10g}", f"{r.weight:.10g}"])
    return buf.getvalue()
