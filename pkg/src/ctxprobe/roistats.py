"""Parcel-level statistics: ROI scores, context-sensitivity tests, window size.

A parcel's ROI-score at one context size is the median R over the voxels
carrying 90% of its loading mass. Per subject, an OLS slope of ROI-score
against context size summarizes sensitivity; a one-sample t-test across
subjects with Benjamini-Hochberg correction flags sensitive parcels, and
for those we estimate the maximal context size: the last scheduled size at
which the subject-averaged, per-subject-centered curve sits more than one
standard deviation below its maximum.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr

from .errors import ArgumentError, DataError

MAXCTX_RULES = ("figure", "methods")
TAILS = ("one", "two")


@dataclass
class ParcelAtlas:
    """Sparse nonnegative voxel loadings per parcel, plus optional labels."""

    loadings: dict  # parcel_id -> {voxel_index: loading}
    hemisphere: dict  # parcel_id -> label, only for parcels that carry one

    def parcel_ids(self):
        return sorted(self.loadings)


@dataclass
class RoiCurve:
    subject_id: str
    parcel_id: str
    sizes: list
    scores: list


@dataclass
class ContextResult:
    parcel_id: str
    mean_slope: float
    t_stat: float
    p_value: float
    significant: bool
    max_context_size: int | None
    degenerate: bool = False
    hemisphere: str = ""


def load_atlas(path) -> ParcelAtlas:
    """Read the sparse-triplet atlas CSV: parcel_id,voxel_index,loading[,hemisphere]."""
    loadings: dict = {}
    hemisphere: dict = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty atlas file")
        cols = [c.strip().lower() for c in header]
        if cols[:3] != ["parcel_id", "voxel_index", "loading"]:
            raise DataError(f"{path}: expected header parcel_id,voxel_index,loading")
        has_hemi = len(cols) > 3 and cols[3] == "hemisphere"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pid, vox, load = row[0], int(row[1]), float(row[2])
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: bad atlas row {row!r}") from e
            if load < 0:
                raise DataError(f"{path}:{lineno}: negative loading")
            if vox < 0:
                raise DataError(f"{path}:{lineno}: negative voxel index")
            loadings.setdefault(pid, {})
            if load > 0:
                loadings[pid][vox] = loadings[pid].get(vox, 0.0) + load
            if has_hemi and len(row) > 3 and row[3]:
                hemisphere[pid] = row[3]
    for pid, vl in loadings.items():
        if not vl:
            raise DataError(f"{path}: parcel {pid!r} has no nonzero loadings")
    return ParcelAtlas(loadings=loadings, hemisphere=hemisphere)


def select_roi_voxels(parcel_loadings: dict) -> list:
    """Smallest prefix of voxels (by descending loading, ties by index)
    whose mass reaches 90% of the parcel's total."""
    if not parcel_loadings:
        raise DataError("empty parcel")
    items = sorted(parcel_loadings.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(load for _, load in items)
    picked = []
    acc = 0.0
    for vox, load in items:
        picked.append(vox)
        acc += load
        if acc >= 0.9 * total:
            break
    return picked


def roi_score(r_values: np.ndarray, voxels) -> float:
    """Median R over the voxel set (even cardinality: mean of central two)."""
    voxels = list(voxels)
    if not voxels:
        raise ArgumentError("empty voxel set")
    return float(np.median(np.asarray(r_values, dtype=np.float64)[voxels]))


def fit_slope(points) -> float:
    """OLS slope of (context_size, score) points."""
    pts = list(points)
    if len(pts) < 2:
        raise ArgumentError("need at least 2 points")
    x = np.array([p[0] for p in pts], dtype=np.float64)
    y = np.array([p[1] for p in pts], dtype=np.float64)
    xc = x - x.mean()
    denom = xc @ xc
    if denom == 0:
        raise ArgumentError("all context sizes equal; slope undefined")
    return float((xc @ (y - y.mean())) / denom)


def group_ttest(slopes, tail: str = "one"):
    """One-sample t-test of the subject slopes against 0.

    Default is one-sided (H1: mean slope > 0). Returns (t, p, degenerate):
    zero sample variance is reported as p=0 when the mean is positive and
    p=1 otherwise, with the degenerate flag raised instead of an exception.
    """
    if tail not in TAILS:
        raise ArgumentError(f"tail must be one of {TAILS}")
    s = np.asarray(list(slopes), dtype=np.float64)
    n = s.size
    if n < 3:
        raise ArgumentError(f"need >= 3 subjects, got {n}")
    mean = s.mean()
    sd = s.std(ddof=1)
    if sd == 0 or np.all(s == s[0]):
        if tail == "one":
            return (math.inf if mean > 0 else (0.0 if mean == 0 else -math.inf),
                    0.0 if mean > 0 else 1.0, True)
        return (math.inf if mean != 0 else 0.0, 0.0 if mean != 0 else 1.0, True)
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    # stdtr is the t CDF via the regularized incomplete beta
    if tail == "one":
        p = 1.0 - stdtr(df, t)
    else:
        p = 2.0 * (1.0 - stdtr(df, abs(t)))
    return float(t), float(min(max(p, 0.0), 1.0)), False


def bh_fdr(p_values, q: float) -> list:
    """Benjamini-Hochberg at level q: reject the smallest k p-values where k
    is the largest index with p_(k) <= k*q/m."""
    p = list(p_values)
    if not p:
        raise ArgumentError("empty p-value list")
    if not 0 < q < 1:
        raise ArgumentError("q must lie in (0, 1)")
    if any((pi < 0 or pi > 1) for pi in p):
        raise ArgumentError("p-values must lie in [0, 1]")
    m = len(p)
    order = sorted(range(m), key=lambda i: p[i])
    k_star = 0
    for rank, idx in enumerate(order, start=1):
        if p[idx] <= rank * q / m:
            k_star = rank
    flags = [False] * m
    for rank in range(k_star):
        flags[order[rank]] = True
    return flags


def max_context_size(curves, rule: str = "figure") -> int:
    """Saturation point of the ROI-score curve for one parcel.

    figure (default): center each subject's curve on its own mean, average
    across subjects, and return the last scheduled size whose value is below
    the curve's maximum minus its population standard deviation (smallest
    size when nothing is below).
    methods: the same threshold rule on the uncentered subject-averaged
    curve.
    """
    if rule not in MAXCTX_RULES:
        raise ArgumentError(f"rule must be one of {MAXCTX_RULES}")
    curves = list(curves)
    if not curves:
        raise ArgumentError("need at least one subject curve")
    sizes = list(curves[0].sizes)
    mat = []
    for c in curves:
        if list(c.sizes) != sizes:
            raise DataError(
                f"subject {c.subject_id}: schedule differs from {curves[0].subject_id}"
            )
        mat.append(np.asarray(c.scores, dtype=np.float64))
    mat = np.stack(mat)
    if rule == "figure":
        mat = mat - mat.mean(axis=1, keepdims=True)
    s = mat.mean(axis=0)
    sigma = s.std()  # population sd over the scheduled sizes
    threshold = s.max() - sigma
    below = [c for c, v in zip(sizes, s) if v < threshold]
    return below[-1] if below else sizes[0]


def analyze_parcels(
    atlas: ParcelAtlas,
    subject_rscores: dict,
    schedule,
    q: float = 0.01,
    tail: str = "one",
    maxctx_rule: str = "figure",
):
    """Full ROI analysis over all parcels.

    subject_rscores: subject_id -> [n_sizes, n_voxels] R matrix aligned with
    the schedule. Returns (results, curves): one ContextResult per parcel
    (sorted by parcel id) and the per-parcel subject curves for export.
    """
    subjects = sorted(subject_rscores)
    if len(subjects) < 3:
        raise ArgumentError(f"need >= 3 subjects, got {len(subjects)}")
    sizes = [int(s) for s in schedule]
    parcels = atlas.parcel_ids()
    roi_voxels = {pid: select_roi_voxels(atlas.loadings[pid]) for pid in parcels}
    curves: dict = {pid: [] for pid in parcels}
    slopes: dict = {pid: [] for pid in parcels}
    for subj in subjects:
        rmat = np.asarray(subject_rscores[subj], dtype=np.float64)
        if rmat.shape[0] != len(sizes):
            raise DataError(f"subject {subj}: R matrix rows != schedule length")
        for pid in parcels:
            voxels = roi_voxels[pid]
            if max(voxels) >= rmat.shape[1]:
                raise DataError(
                    f"subject {subj}: parcel {pid!r} references voxel {max(voxels)} "
                    f"beyond map size {rmat.shape[1]}"
                )
            scores = [roi_score(rmat[k], voxels) for k in range(len(sizes))]
            curves[pid].append(
                RoiCurve(subject_id=subj, parcel_id=pid, sizes=sizes, scores=scores)
            )
            slopes[pid].append(fit_slope(list(zip(sizes, scores))))

    stats = {pid: group_ttest(slopes[pid], tail=tail) for pid in parcels}
    flags = bh_fdr([stats[pid][1] for pid in parcels], q)
    results = []
    for pid, sig in zip(parcels, flags):
        t, p, degen = stats[pid]
        results.append(
            ContextResult(
                parcel_id=pid,
                mean_slope=float(np.mean(slopes[pid])),
                t_stat=t,
                p_value=p,
                significant=bool(sig),
                max_context_size=max_context_size(curves[pid], rule=maxctx_rule) if sig else None,
                degenerate=degen,
                hemisphere=atlas.hemisphere.get(pid, ""),
            )
        )
    return results, curves


def write_results_csv(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["parcel_id", "mean_slope", "t_stat", "p_value", "significant", "max_context_size"]
        )
        for res in results:
            writer.writerow(
                [
                    res.parcel_id,
                    f"{res.mean_slope:.10g}",
                    f"{res.t_stat:.10g}",
                    f"{res.p_value:.10g}",
                    int(res.significant),
                    "" if res.max_context_size is None else res.max_context_size,
                ]
            )


def read_results_csv(path):
    results = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            mcs = row["max_context_size"]
            results.append(
                ContextResult(
                    parcel_id=row["parcel_id"],
                    mean_slope=float(row["mean_slope"]),
                    t_stat=float(row["t_stat"]),
                    p_value=float(row["p_value"]),
                    significant=bool(int(row["significant"])),
                    max_context_size=None if mcs == "" else int(mcs),
                )
            )
    return results


def write_curves_csv(path, curves: dict) -> None:
    """Per-parcel centered mean curve with the across-subject SEM."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["parcel_id", "context_size", "mean_centered_score", "sem"])
        for pid in sorted(curves):
            subj_curves = curves[pid]
            sizes = subj_curves[0].sizes
            mat = np.stack([np.asarray(c.scores, dtype=np.float64) for c in subj_curves])
            mat = mat - mat.mean(axis=1, keepdims=True)
            mean = mat.mean(axis=0)
            n = mat.shape[0]
            sem = mat.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(sizes))
            for c, mu, se in zip(sizes, mean, sem):
                writer.writerow([pid, c, f"{mu:.10g}", f"{se:.10g}"])
