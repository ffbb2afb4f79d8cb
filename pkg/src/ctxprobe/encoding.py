"""Voxelwise encoding models: HRF convolution, ridge regression, nested CV.

Per run, word embeddings become a design matrix by placing one impulse per
word at its offset time, convolving with the canonical double-gamma HRF
sampled on the scan grid, and z-scoring columns. Scores come from a nested
leave-one-run-out loop: the inner loop picks the ridge penalty maximizing
mean held-out correlation across voxels, the outer loop reports per-voxel
Pearson R on the held-out run, averaged over folds.

All solves go through the eigendecomposition of the training Gram matrix,
which makes sweeping the penalty grid and reusing shared designs across
subjects cheap; the solutions are identical to (X'X + lam*I)^-1 X'Y.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.stats import gamma as gamma_dist

from . import containers
from .errors import ArgumentError, ConfigError, DataError, NumericError

DEFAULT_LAMBDA_GRID = tuple(np.logspace(-1, 5, 10))

_PEAK_RATIO = 6.0  # undershoot divided by this before subtraction


def _double_gamma(t):
    return gamma_dist.pdf(t, 6.0, scale=1.0) - gamma_dist.pdf(t, 16.0, scale=1.0) / _PEAK_RATIO


def _hrf_peak():
    # stationary point of g6 - g16/6 near the gamma(6,1) mode at t=5
    def deriv(t):
        g6 = gamma_dist.pdf(t, 6.0, scale=1.0)
        g16 = gamma_dist.pdf(t, 16.0, scale=1.0)
        return g6 * (5.0 / t - 1.0) - g16 * (15.0 / t - 1.0) / _PEAK_RATIO

    t_peak = brentq(deriv, 3.0, 7.0, xtol=1e-12)
    return _double_gamma(t_peak)


_HRF_PEAK = _hrf_peak()


def hrf(t):
    """Canonical double-gamma HRF, unit peak: pdf(6,1) - pdf(16,1)/6, scaled.

    Accepts scalars or arrays; t must be >= 0.
    """
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0):
        raise ArgumentError("hrf is defined for t >= 0")
    out = _double_gamma(arr) / _HRF_PEAK
    return float(out) if np.isscalar(t) or arr.ndim == 0 else out


@dataclass
class BoldRun:
    """One preprocessed fMRI run: [n_scans, n_voxels] float32."""

    data: np.ndarray
    tr_seconds: float
    run_id: int
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DataError(f"BOLD run {self.run_id}: expected 2-D matrix")
        if self.data.shape[0] < 10:
            raise DataError(f"BOLD run {self.run_id}: need >= 10 scans, got {self.data.shape[0]}")
        if self.tr_seconds <= 0:
            raise DataError(f"BOLD run {self.run_id}: tr must be positive")
        if np.isnan(self.data).any():
            raise DataError(f"BOLD run {self.run_id}: NaN values present")

    @property
    def n_scans(self):
        return self.data.shape[0]

    @property
    def n_voxels(self):
        return self.data.shape[1]


@dataclass
class DesignMatrix:
    """Per-run feature matrix, columns z-scored within the run."""

    matrix: np.ndarray
    run_id: int
    context_size: int = -1
    layer: int = -1


@dataclass
class RScoreMap:
    """Per-voxel scores plus the cross-validation bookkeeping.

    r averages the held-out Pearson R across outer folds (the value the
    statistics run on); r_pooled correlates the concatenated held-out
    predictions instead, recorded alongside since the distinction is easy
    to lose downstream.
    """

    r: np.ndarray
    fold_run_ids: list = field(default_factory=list)
    selected_lambda: list = field(default_factory=list)
    r_pooled: np.ndarray | None = None


def save_bold(path, run: BoldRun) -> None:
    containers.write_container(
        path,
        containers.MAGIC_BOLD,
        {"bold": run.data},
        {
            "tr_seconds": float(run.tr_seconds),
            "run_id": int(run.run_id),
            "subject_id": str(run.subject_id),
        },
    )


def load_bold(path) -> BoldRun:
    tensors, config = containers.read_container(path, containers.MAGIC_BOLD)
    if "bold" not in tensors:
        raise DataError(f"{path}: missing 'bold' tensor")
    return BoldRun(
        data=tensors["bold"],
        tr_seconds=float(config["tr_seconds"]),
        run_id=int(config["run_id"]),
        subject_id=str(config.get("subject_id", "")),
    )


def scan_times(n_scans: int, tr: float, scan_ref: str = "end") -> np.ndarray:
    """Timestamp of each scan; scan k is referenced to the end of acquisition
    by default ((k+1)*tr), switchable to start or middle."""
    k = np.arange(n_scans, dtype=np.float64)
    if scan_ref == "end":
        return (k + 1.0) * tr
    if scan_ref == "start":
        return k * tr
    if scan_ref == "middle":
        return (k + 0.5) * tr
    raise ArgumentError(f"scan_ref must be start|middle|end, got {scan_ref!r}")


def build_design(
    embeddings: np.ndarray,
    offsets,
    tr: float,
    n_scans: int,
    run_id: int = -1,
    scan_ref: str = "end",
    context_size: int = -1,
    layer: int = -1,
) -> DesignMatrix:
    """HRF-convolved, per-run z-scored design from per-word embedding rows.

    Column f of the raw design is sum_w emb[w, f] * hrf(t_k - offset_w),
    i.e. an impulse per word at its offset, linearly superposed. Offsets
    must lie in [0, n_scans*tr).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    offs = np.asarray(offsets, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != offs.shape[0]:
        raise ArgumentError(
            f"embeddings rows ({emb.shape}) must match offsets ({offs.shape})"
        )
    horizon = n_scans * tr
    bad = np.nonzero((offs < 0) | (offs >= horizon))[0]
    if bad.size:
        raise DataError(
            f"word {bad[0]}: offset {offs[bad[0]]:.3f}s outside [0, {horizon:.3f}s)"
        )
    lags = scan_times(n_scans, tr, scan_ref)[:, None] - offs[None, :]
    kernel = np.zeros_like(lags)
    pos = lags >= 0
    kernel[pos] = hrf(lags[pos])
    raw = kernel @ emb
    return DesignMatrix(
        matrix=zscore_columns(raw),
        run_id=run_id,
        context_size=context_size,
        layer=layer,
    )


def zscore_columns(mat: np.ndarray) -> np.ndarray:
    """Column z-scoring (population sd); constant columns are left at 0."""
    mu = mat.mean(axis=0)
    sd = mat.std(axis=0)
    out = mat - mu
    nz = sd > 0
    out[:, nz] /= sd[nz]
    out[:, ~nz] = 0.0
    return out


def ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    """W = (X'X + lam*I)^-1 X'Y via a stable solve, never an explicit inverse.

    The returned solution is checked against the normal equations; failure
    (exactly or effectively singular at lam=0) raises NumericError.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if lam < 0:
        raise ArgumentError("ridge penalty must be >= 0")
    if not np.all(np.isfinite(X)):
        raise NumericError("design matrix contains non-finite values")
    d = X.shape[1]
    G = X.T @ X + lam * np.eye(d)
    C = X.T @ Y
    try:
        W = np.linalg.solve(G, C)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular system at lambda={lam}; use lambda > 0") from e
    resid = np.max(np.abs(G @ W - C))
    scale = max(np.max(np.abs(C)), 1e-300)
    if resid > 1e-6 * scale:
        raise NumericError(
            f"normal equations residual {resid / scale:.2e} too large at lambda={lam}; "
            "use lambda > 0"
        )
    return W


def pearson_r(a, b) -> float:
    """Sample Pearson correlation; 0 when either vector has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ArgumentError(f"vectors must share one shape, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ArgumentError("need at least 2 samples")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac @ ac) * (bc @ bc))
    if denom == 0:
        return 0.0
    return float((ac @ bc) / denom)


def _pearson_columns(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Columnwise Pearson between matching columns of P and Y; 0 on zero variance."""
    Pc = P - P.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    num = np.einsum("ij,ij->j", Pc, Yc)
    den = np.sqrt(np.einsum("ij,ij->j", Pc, Pc) * np.einsum("ij,ij->j", Yc, Yc))
    out = np.zeros(P.shape[1])
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


class _DesignEnsemble:
    """Precomputed per-run design quantities reusable across subjects."""

    def __init__(self, X_runs):
        self.X = [np.asarray(X, dtype=np.float64) for X in X_runs]
        self.G = [X.T @ X for X in self.X]
        self.n_runs = len(self.X)
        self.d = self.X[0].shape[1]
        self.G_total = np.sum(self.G, axis=0)
        self._eigh_cache = {}

    def eigh_train(self, excluded):
        """Eigendecomposition of the Gram over all runs except `excluded`."""
        key = tuple(sorted(excluded))
        if key not in self._eigh_cache:
            G = self.G_total - sum(self.G[i] for i in excluded)
            w, Q = np.linalg.eigh(G)
            self._eigh_cache[key] = (np.maximum(w, 0.0), Q)
        return self._eigh_cache[key]


def _corr_stats_for_grid(A, AtA, a_sum, u, b, y_sum, y_ss, n, lambdas, eigvals):
    """Mean-over-voxel correlations on one inner run for every lambda.

    A = X_i Q, u = Q'X_i'Y_i, b = Q'C_train; the prediction on run i for
    penalty lam is A diag(1/(w+lam)) b, whose correlation statistics reduce
    to quadratic forms in the d-dimensional coefficient space.
    """
    scores = np.empty(len(lambdas))
    for gi, lam in enumerate(lambdas):
        coef = b / (eigvals + lam)[:, None]  # [d, V]
        dot_py = np.einsum("dv,dv->v", coef, u)
        quad = np.einsum("dv,dv->v", coef, AtA @ coef)
        p_sum = a_sum @ coef
        num = dot_py - p_sum * y_sum / n
        var_p = quad - p_sum * p_sum / n
        var_y = y_ss - y_sum * y_sum / n
        den = np.sqrt(np.maximum(var_p, 0.0) * np.maximum(var_y, 0.0))
        corr = np.zeros_like(num)
        nz = den > 0
        corr[nz] = num[nz] / den[nz]
        scores[gi] = corr.mean()
    return scores


def cv_rscores_multi(X_runs, Y_runs_per_subject, lambda_grid, run_ids=None):
    """Nested leave-one-run-out CV for several subjects sharing one design.

    X_runs: list of [n_scans_r, d] design matrices (one per run).
    Y_runs_per_subject: per subject, a list of matching [n_scans_r, V] BOLD
    matrices. Returns one RScoreMap per subject. Correlations, penalty
    selection, and fold structure are identical to running each subject
    through cross_validated_r.
    """
    R = len(X_runs)
    if R < 3:
        raise ConfigError(f"cross-validation needs >= 3 runs, got {R}")
    lambdas = [float(l) for l in lambda_grid]
    if not lambdas or any(l <= 0 for l in lambdas):
        raise ConfigError("lambda grid must be non-empty and positive for CV")
    if run_ids is None:
        run_ids = list(range(R))
    ens = _DesignEnsemble(X_runs)
    n_sub = len(Y_runs_per_subject)

    subj_data = []
    for ys in Y_runs_per_subject:
        if len(ys) != R:
            raise ConfigError("every subject needs one BOLD matrix per run")
        ys = [np.asarray(y, dtype=np.float64) for y in ys]
        V = ys[0].shape[1]
        for i, y in enumerate(ys):
            if y.shape[0] != ens.X[i].shape[0]:
                raise DataError(
                    f"run {run_ids[i]}: BOLD rows {y.shape[0]} != design rows {ens.X[i].shape[0]}"
                )
            if y.shape[1] != V:
                raise DataError(f"run {run_ids[i]}: inconsistent voxel count")
        C = [ens.X[i].T @ y for i, y in enumerate(ys)]  # [d, V] per run
        y_sum = [y.sum(axis=0) for y in ys]
        y_ss = [np.einsum("ij,ij->j", y, y) for y in ys]
        subj_data.append(
            {"Y": ys, "C": C, "C_total": np.sum(C, axis=0), "y_sum": y_sum, "y_ss": y_ss}
        )

    n_vox = [sd["Y"][0].shape[1] for sd in subj_data]
    r_acc = [np.zeros(v) for v in n_vox]
    fold_lambdas = [[] for _ in range(n_sub)]
    # pooled-prediction sufficient statistics over all held-out scans
    pooled = [
        {k: np.zeros(v) for k in ("sp", "sy", "spy", "spp", "syy")} | {"n": 0}
        for v in n_vox
    ]

    for o in range(R):
        train = [i for i in range(R) if i != o]
        inner_scores = [np.zeros(len(lambdas)) for _ in range(n_sub)]
        for i in train:
            w, Q = ens.eigh_train((o, i))
            A = ens.X[i] @ Q
            AtA = A.T @ A
            a_sum = A.sum(axis=0)
            n_i = ens.X[i].shape[0]
            for s, sd in enumerate(subj_data):
                C_train = sd["C_total"] - sd["C"][o] - sd["C"][i]
                b = Q.T @ C_train
                u = Q.T @ sd["C"][i]
                inner_scores[s] += _corr_stats_for_grid(
                    A, AtA, a_sum, u, b, sd["y_sum"][i], sd["y_ss"][i], n_i, lambdas, w
                )
        w, Q = ens.eigh_train((o,))
        for s, sd in enumerate(subj_data):
            best = int(np.argmax(inner_scores[s]))  # first max wins ties
            lam = lambdas[best]
            fold_lambdas[s].append(lam)
            coef = Q.T @ (sd["C_total"] - sd["C"][o]) / (w + lam)[:, None]
            pred = ens.X[o] @ (Q @ coef)
            Y_o = sd["Y"][o]
            r_acc[s] += _pearson_columns(pred, Y_o)
            st = pooled[s]
            st["n"] += pred.shape[0]
            st["sp"] += pred.sum(axis=0)
            st["sy"] += Y_o.sum(axis=0)
            st["spy"] += np.einsum("ij,ij->j", pred, Y_o)
            st["spp"] += np.einsum("ij,ij->j", pred, pred)
            st["syy"] += np.einsum("ij,ij->j", Y_o, Y_o)

    out = []
    for s in range(n_sub):
        st = pooled[s]
        n = st["n"]
        num = st["spy"] - st["sp"] * st["sy"] / n
        den = np.sqrt(
            np.maximum(st["spp"] - st["sp"] ** 2 / n, 0.0)
            * np.maximum(st["syy"] - st["sy"] ** 2 / n, 0.0)
        )
        r_pooled = np.zeros(n_vox[s])
        nz = den > 0
        r_pooled[nz] = num[nz] / den[nz]
        out.append(
            RScoreMap(
                r=r_acc[s] / R,
                fold_run_ids=list(run_ids),
                selected_lambda=fold_lambdas[s],
                r_pooled=r_pooled,
            )
        )
    return out


def cross_validated_r(runs, lambda_grid=DEFAULT_LAMBDA_GRID) -> RScoreMap:
    """Nested leave-one-run-out CV for one subject.

    runs: list of (DesignMatrix, BoldRun) pairs. The inner loop selects the
    penalty maximizing mean Pearson R over voxels; the outer loop averages
    held-out per-voxel R across folds.
    """
    if len(runs) < 3:
        raise ConfigError(f"cross-validation needs >= 3 runs, got {len(runs)}")
    X_runs = [dm.matrix for dm, _ in runs]
    Y_runs = [br.data for _, br in runs]
    run_ids = [dm.run_id for dm, _ in runs]
    return cv_rscores_multi(X_runs, [Y_runs], lambda_grid, run_ids=run_ids)[0]


def save_rscores(path, schedule, rmaps, subject_id: str, extra_config=None) -> None:
    """One CTXPR001 container per subject: [n_sizes, n_voxels] R scores.

    The fold-averaged scores drive the statistics; pooled-prediction scores
    ride along as a second tensor when available.
    """
    mat = np.stack([rm.r for rm in rmaps]).astype(np.float32)
    config = {
        "subject_id": str(subject_id),
        "schedule": [int(s) for s in schedule],
        "fold_run_ids": rmaps[0].fold_run_ids,
        "selected_lambda": [rm.selected_lambda for rm in rmaps],
        "r_definition": "fold_average",
    }
    if extra_config:
        config.update(extra_config)
    tensors = {"rscores": mat}
    if all(rm.r_pooled is not None for rm in rmaps):
        tensors["rscores_pooled"] = np.stack([rm.r_pooled for rm in rmaps]).astype(np.float32)
    containers.write_container(path, containers.MAGIC_RSCORES, tensors, config)


def load_rscores(path):
    """Returns (schedule, [n_sizes, n_voxels] matrix, config)."""
    tensors, config = containers.read_container(path, containers.MAGIC_RSCORES)
    if "rscores" not in tensors:
        raise DataError(f"{path}: missing 'rscores' tensor")
    mat = tensors["rscores"].astype(np.float64)
    schedule = [int(s) for s in config["schedule"]]
    if mat.shape[0] != len(schedule):
        raise DataError(f"{path}: rscores rows != schedule length")
    return schedule, mat, config
