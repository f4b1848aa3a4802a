"""Page-level segmentation metrics, threshold-range averages and Welch's t-test.

IoU values are exact :class:`fractions.Fraction` objects built from integer
pixel counts, so threshold comparisons never suffer from float drift.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DataError, NumericError


class Missing(enum.Enum):
    UNDEFINED = "UNDEFINED"  # a ratio with a zero denominator
    EMPTY = "EMPTY"  # an average over an empty set

    def __repr__(self):
        return self.value

    __str__ = __repr__


UNDEFINED = Missing.UNDEFINED
EMPTY = Missing.EMPTY
Value = Union[Fraction, float, Missing]


class Outcome(enum.Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


@dataclass(frozen=True)
class IoUResult:
    intersection: int
    union: int
    predicted: int
    ground_truth: int

    @property
    def value(self) -> Union[Fraction, Missing]:
        if self.union == 0:
            return UNDEFINED
        return Fraction(self.intersection, self.union)

    @property
    def defined(self) -> bool:
        return self.union > 0


def iou(pred: np.ndarray, gt: np.ndarray) -> IoUResult:
    """IoU of two boolean pixel sets of the same shape."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    p = int(np.count_nonzero(pred))
    g = int(np.count_nonzero(gt))
    return IoUResult(inter, p + g - inter, p, g)


def miou(results: Sequence[IoUResult]) -> Union[float, Missing]:
    """Mean IoU over pairs with a nonempty union (true negatives excluded)."""
    if not results:
        raise DataError("miou needs at least one pair")
    vals = [r.value for r in results if r.defined]
    if not vals:
        return EMPTY
    return float(sum(vals, Fraction(0)) / len(vals))


def _as_fraction(tau) -> Fraction:
    if isinstance(tau, Fraction):
        return tau
    if isinstance(tau, float):
        return Fraction(repr(tau))
    return Fraction(tau)


def classify_outcome(result: IoUResult, tau) -> Outcome:
    tau = _as_fraction(tau)
    if not 0 < tau <= 1:
        raise DataError(f"tau must be in (0, 1], got {tau}")
    if not result.defined:
        return Outcome.TN
    if result.predicted == 0:
        return Outcome.FN
    if result.value >= tau:
        return Outcome.TP
    return Outcome.FP


def _counts(outcomes: Iterable[Outcome]) -> dict[Outcome, int]:
    counts = dict.fromkeys(Outcome, 0)
    for o in outcomes:
        counts[o] += 1
    return counts


def precision_at(outcomes: Iterable[Outcome]) -> Union[Fraction, Missing]:
    c = _counts(outcomes)
    denom = c[Outcome.TP] + c[Outcome.FP]
    return Fraction(c[Outcome.TP], denom) if denom else UNDEFINED


def recall_at(outcomes: Iterable[Outcome]) -> Union[Fraction, Missing]:
    c = _counts(outcomes)
    denom = c[Outcome.TP] + c[Outcome.FN]
    return Fraction(c[Outcome.TP], denom) if denom else UNDEFINED


METRICS: dict[str, Callable] = {"P": precision_at, "R": recall_at}


@dataclass(frozen=True)
class ThresholdRange:
    """Percent thresholds ``start:step:end`` (inclusive)."""

    start: int
    step: int
    end: int

    def __post_init__(self):
        if self.step <= 0 or self.start > self.end or (self.end - self.start) % self.step:
            raise DataError(f"invalid threshold range {self}")
        if self.start <= 0 or self.end > 100:
            raise DataError("thresholds must lie in (0, 100]")

    @classmethod
    def parse(cls, text: str) -> "ThresholdRange":
        try:
            a, s, b = (int(x) for x in text.split(":"))
        except ValueError:
            raise DataError(f"threshold range must look like 50:5:95, got {text!r}") from None
        return cls(a, s, b)

    @property
    def thresholds(self) -> list[Fraction]:
        return [Fraction(t, 100) for t in range(self.start, self.end + 1, self.step)]

    def __str__(self):
        return f"{self.start}:{self.step}:{self.end}"


@dataclass(frozen=True)
class Averaged:
    value: Union[float, Missing]
    evaluated: int
    skipped: int


def metric_at(metric, results: Sequence[IoUResult], tau) -> Union[Fraction, Missing]:
    fn = METRICS[metric] if isinstance(metric, str) else metric
    return fn(classify_outcome(r, tau) for r in results)


def averaged_metric(metric, results: Sequence[IoUResult], trange: ThresholdRange) -> Averaged:
    """Unweighted mean of ``metric`` over the thresholds; undefined thresholds are skipped."""
    vals = []
    skipped = 0
    for tau in trange.thresholds:
        v = metric_at(metric, results, tau)
        if v is UNDEFINED:
            skipped += 1
        else:
            vals.append(v)
    n = len(vals) + skipped
    if not vals:
        return Averaged(EMPTY, n, skipped)
    return Averaged(float(sum(vals, Fraction(0)) / len(vals)), n, skipped)


# ---------------------------------------------------------------------------
# Student-t distribution and Welch's test

def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
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
        if abs(delta - 1.0) < 1e-16:
            return h
    raise NumericError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise DataError("betainc parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-tailed tail probability P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise DataError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: float) -> float:
    half = 0.5 * student_t_sf2(t, df)
    return 1.0 - half if t > 0 else half


def student_t_ppf(q: float, df: float) -> float:
    """Quantile by bisection on the CDF."""
    if not 0.0 < q < 1.0:
        raise DataError("quantile level must be in (0, 1)")
    lo, hi = -1.0, 1.0
    while student_t_cdf(lo, df) > q:
        lo *= 2.0
    while student_t_cdf(hi, df) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if student_t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float
    mean_diff: float

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        if self.t == 0.0:
            raise DataError("interval undefined for t = 0 with zero mean difference")
        se = self.mean_diff / self.t
        half = student_t_ppf(0.5 + level / 2.0, self.df) * se
        return self.mean_diff - half, self.mean_diff + half


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Welch's unequal-variance t-test, two-tailed; ``t`` is positive when mean(a) > mean(b)."""
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    if len(a) < 2 or len(b) < 2:
        raise DataError("Welch's test needs at least two observations per sample")
    na, nb = len(a), len(b)
    ma, mb = math.fsum(a) / na, math.fsum(b) / nb
    va = math.fsum((x - ma) ** 2 for x in a) / (na - 1)
    vb = math.fsum((x - mb) ** 2 for x in b) / (nb - 1)
    if va == 0.0 and vb == 0.0:
        raise DataError("Welch's test is undefined when both samples have zero variance")
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    return WelchResult(t, df, student_t_sf2(t, df), ma - mb)


def significance_stars(p: float) -> str:
    for cutoff, stars in ((0.0001, "****"), (0.001, "***"), (0.01, "**"), (0.05, "*")):
        if p <= cutoff:
            return stars
    return ""


@dataclass(frozen=True)
class RunStats:
    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return math.fsum(self.values) / len(self.values)

    @property
    def std(self) -> float:
        # sample standard deviation; 0 for a single run
        n = len(self.values)
        if n < 2:
            return 0.0
        m = self.mean
        return math.sqrt(math.fsum((v - m) ** 2 for v in self.values) / (n - 1))


# ---------------------------------------------------------------------------
# per-page records and summaries

@dataclass(frozen=True)
class PageRecord:
    page_id: str
    class_id: int
    result: IoUResult


def evaluate_masks(
    pred_masks: Mapping[str, np.ndarray], gt_masks: Mapping[str, np.ndarray], class_ids: Sequence[int]
) -> list[PageRecord]:
    missing = sorted(set(gt_masks) - set(pred_masks))
    if missing:
        raise DataError(f"no prediction for page(s): {', '.join(missing[:5])}")
    records = []
    for pid in sorted(gt_masks):
        pred, gt = pred_masks[pid], gt_masks[pid]
        for c in class_ids:
            records.append(PageRecord(pid, c, iou(pred == c, gt == c)))
    return records


def write_records(path, records: Iterable[PageRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("# page_id class_id intersection union predicted ground_truth\n")
        for r in records:
            x = r.result
            f.write(f"{r.page_id} {r.class_id} {x.intersection} {x.union} {x.predicted} {x.ground_truth}\n")


def read_records(path) -> list[PageRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields")
            pid = fields[0]
            c, i, u, p, g = (int(x) for x in fields[1:])
            out.append(PageRecord(pid, c, IoUResult(i, u, p, g)))
    return out


DEFAULT_RANGE = ThresholdRange(50, 5, 95)
AVERAGE = "Average"


def metric_columns(trange: ThresholdRange = DEFAULT_RANGE) -> list[str]:
    return ["mIoU", "P@60", "P@80", f"P@{trange}", "R@60", "R@80", f"R@{trange}"]


def _as_float(v) -> Optional[float]:
    return None if isinstance(v, Missing) else float(v)


def summarize_results(results: Sequence[IoUResult], trange: ThresholdRange = DEFAULT_RANGE) -> dict[str, Optional[float]]:
    """mIoU and P/R at 60, 80 and over ``trange``; ``None`` marks EMPTY/UNDEFINED."""
    row = {"mIoU": _as_float(miou(results)) if results else None}
    for m in ("P", "R"):
        row[f"{m}@60"] = _as_float(metric_at(m, results, Fraction(60, 100)))
        row[f"{m}@80"] = _as_float(metric_at(m, results, Fraction(80, 100)))
        row[f"{m}@{trange}"] = _as_float(averaged_metric(m, results, trange).value)
    return row


def summarize(
    records: Sequence[PageRecord], class_names: Mapping[int, str], trange: ThresholdRange = DEFAULT_RANGE
) -> dict[str, dict[str, Optional[float]]]:
    """Per-class rows plus a pooled (micro) ``Average`` row over all page/class observations."""
    table = {}
    for cid in sorted(class_names):
        table[class_names[cid]] = summarize_results([r.result for r in records if r.class_id == cid], trange)
    table[AVERAGE] = summarize_results([r.result for r in records if r.class_id in class_names], trange)
    return table


def _fmt(stats: Optional[RunStats]) -> str:
    if stats is None:
        return "n/a"
    return f"{100 * stats.mean:.2f}±{100 * stats.std:.2f}"


def compare_runs(
    runs: Mapping[str, Sequence[dict]], baseline: Optional[str]
) -> dict[str, dict[str, dict[str, dict]]]:
    """Aggregate per-run summaries into mean/std and Welch tests versus ``baseline``.

    ``runs`` maps a model name to a list of ``summarize`` outputs, one per run.
    """
    out: dict = {}
    for name, summaries in runs.items():
        out[name] = {}
        for row in summaries[0]:
            out[name][row] = {}
            for col in summaries[0][row]:
                vals = [s[row][col] for s in summaries if s[row][col] is not None]
                cell = {"values": vals, "mean": None, "std": None, "p": None, "stars": "", "direction": ""}
                if vals:
                    st = RunStats(tuple(vals))
                    cell["mean"], cell["std"] = st.mean, st.std
                if baseline is not None and name != baseline and baseline in runs:
                    base = [s[row][col] for s in runs[baseline] if s[row][col] is not None]
                    try:
                        w = welch_t_test(vals, base)
                    except DataError:
                        w = None
                    if w is not None:
                        cell["p"] = w.p
                        cell["direction"] = "+" if w.mean_diff > 0 else "-" if w.mean_diff < 0 else "="
                        cell["stars"] = significance_stars(w.p)
                out[name][row][col] = cell
    return out


def format_report(comparison: Mapping, trange: ThresholdRange = DEFAULT_RANGE, baseline: Optional[str] = None) -> str:
    """Fixed-width text table: one block per class (and Average), one line per model."""
    cols = metric_columns(trange)
    models = list(comparison)
    if not models:
        return ""
    rows = list(comparison[models[0]])
    present = comparison[models[0]][rows[0]] if rows else {}
    cols = [c for c in cols if c in present]
    width = max(12, *(len(m) for m in models)) + 2
    lines = []
    if baseline:
        lines.append(f"# stars: Welch's t-test versus {baseline}; sign gives direction of the mean difference")
    for row in rows:
        lines.append(f"[{row}]")
        lines.append("model".ljust(width) + "".join(c.rjust(20) for c in cols))
        for m in models:
            cells = []
            for c in cols:
                cell = comparison[m][row][c]
                stats = RunStats(tuple(cell["values"])) if cell["values"] else None
                mark = f" {cell['direction']}{cell['stars']}" if cell["stars"] else ""
                cells.append((_fmt(stats) + mark).rjust(20))
            lines.append(m.ljust(width) + "".join(cells))
        lines.append("")
    return "\n".join(lines)


def write_report(path, comparison: Mapping, trange: ThresholdRange = DEFAULT_RANGE, baseline: Optional[str] = None) -> None:
    Path(path).write_text(format_report(comparison, trange, baseline), encoding="utf-8")
    with open(Path(path).with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(comparison, f, indent=1, sort_keys=True)
        f.write("\n")
