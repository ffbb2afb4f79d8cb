"""End-to-end orchestration: embed -> encode -> stats -> plot data.

Stages are free functions over files so each CLI subcommand can run in
isolation; run_pipeline composes them under one config with a JSON run
manifest. Artifacts are deterministic and keyed by content hashes of their
inputs, so re-running any stage with unchanged inputs reuses existing
files and (config, seed) fully determines every output byte.
"""

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .encoding import (
    DEFAULT_LAMBDA_GRID,
    build_design,
    cv_rscores_multi,
    load_bold,
    load_rscores,
    save_rscores,
)
from .errors import ConfigError, CtxprobeError, DataError
from .model import load_checkpoint
from .roistats import analyze_parcels, load_atlas, write_curves_csv, write_results_csv
from .textio import read_runs_manifest, read_word_annotations
from .tokenizer import encode_words, load_vocabulary
from .windows import context_schedule, generate_embeddings, load_embeddings, save_embeddings


def file_sha256(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    except FileNotFoundError as e:
        raise DataError(f"{path}: file not found") from e
    return h.hexdigest()


def _stable_key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- embed ---

def embedding_cache_name(words_hash, ckpt_hash, n, layer, pooling, scope, bos_id):
    tag = f"_bos{bos_id}" if bos_id is not None else ""
    return f"emb_{words_hash[:12]}_{ckpt_hash[:12]}_n{n}_L{layer}_{pooling}_{scope}{tag}.ctxpe"


_WORKER_CACHE: dict = {}


def _worker_checkpoint(path):
    key = ("ckpt", str(path))
    if key not in _WORKER_CACHE:
        _WORKER_CACHE[key] = load_checkpoint(path)
    return _WORKER_CACHE[key]


def _worker_vocab(vocab_path, merges_path):
    key = ("vocab", str(vocab_path), str(merges_path))
    if key not in _WORKER_CACHE:
        _WORKER_CACHE[key] = load_vocabulary(vocab_path, merges_path)
    return _WORKER_CACHE[key]


def _embed_one_job(args):
    (ckpt_path, vocab_path, merges_path, words_path, n, layer, pooling, scope,
     bos_id, out_path, ckpt_hash, words_hash) = args
    ckpt = _worker_checkpoint(ckpt_path)
    vocab = _worker_vocab(vocab_path, merges_path)
    ann = read_word_annotations(words_path)
    tt = encode_words(ann.words, vocab, sentence_ids=ann.sentence_ids)
    emb = generate_embeddings(ckpt, tt, n, layer, pooling=pooling, scope=scope, bos_id=bos_id)
    save_embeddings(
        out_path,
        emb,
        extra_metadata={"checkpoint_sha256": ckpt_hash, "words_sha256": words_hash},
    )
    return str(out_path)


def embed_words_files(
    checkpoint,
    vocab,
    merges,
    words_paths,
    sizes,
    out_dir,
    layer: int = 9,
    pooling: str = "last",
    scope: str = "document",
    bos_id=None,
    jobs: int = 1,
) -> dict:
    """One embedding container per (words file, context size), cached by name.

    Returns {words_sha256: {n: path}}. A file whose name matches the full
    parameter-and-hash key is trusted and left untouched.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_hash = file_sha256(checkpoint)
    ckpt = _worker_checkpoint(str(checkpoint))
    if not 0 <= layer <= ckpt.config.n_layers:
        raise ConfigError(
            f"layer {layer} out of range for a {ckpt.config.n_layers}-layer checkpoint"
        )

    unique = {}
    for wp in words_paths:
        unique.setdefault(file_sha256(wp), Path(wp))

    index: dict = {}
    jobs_list = []
    for wh, wp in sorted(unique.items()):
        index[wh] = {}
        for n in sizes:
            out_path = out_dir / embedding_cache_name(
                wh, ckpt_hash, n, layer, pooling, scope, bos_id
            )
            index[wh][n] = out_path
            if not out_path.exists():
                jobs_list.append(
                    (str(checkpoint), str(vocab), str(merges), str(wp), n, layer,
                     pooling, scope, bos_id, str(out_path), ckpt_hash, wh)
                )
    if jobs_list:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(_embed_one_job, jobs_list))
        else:
            for job in jobs_list:
                _embed_one_job(job)
    return index


def scan_embeddings_dir(directory) -> dict:
    """Index existing embedding containers by their header metadata."""
    index: dict = {}
    for p in sorted(Path(directory).glob("*.ctxpe")):
        emb = load_embeddings(p)
        wh = emb.metadata.get("words_sha256")
        if wh:
            index.setdefault(wh, {})[emb.context_size] = p
    if not index:
        raise DataError(f"{directory}: no usable .ctxpe embedding files")
    return index


# --------------------------------------------------------------- encode ---

def _legendre_detrend(Y: np.ndarray, order: int) -> np.ndarray:
    n = Y.shape[0]
    t = np.linspace(-1.0, 1.0, n)
    basis = np.polynomial.legendre.legvander(t, order)
    coef, *_ = np.linalg.lstsq(basis, Y, rcond=None)
    return Y - basis @ coef


def _pca_reduce(mats, k: int):
    """Joint PCA over all runs' embedding rows; deterministic sign."""
    stacked = np.vstack(mats)
    if not 1 <= k <= stacked.shape[1]:
        raise ConfigError(f"pca dimension {k} out of range")
    mu = stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(stacked - mu, full_matrices=False)
    comps = vt[:k]
    signs = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    return [(m - mu) @ comps.T for m in mats]


def encode_runs(
    manifest_path,
    embed_index: dict,
    out_dir,
    schedule=None,
    lambda_grid=None,
    scan_ref: str = "end",
    detrend_order: int = 0,
    pca=None,
) -> dict:
    """CV ridge scores per (subject, context size) -> one .ctxpr per subject.

    Subjects with identical run structure (run ids, stimulus hashes, scan
    counts, TR) share all design-side computation. A subject whose output
    file already carries the current content key is skipped.
    """
    schedule = context_schedule(schedule)
    lambda_grid = list(DEFAULT_LAMBDA_GRID) if lambda_grid is None else list(lambda_grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_runs_manifest(manifest_path)

    by_subject: dict = {}
    for row in rows:
        by_subject.setdefault(row.subject_id, []).append(row)
    for subj, srows in by_subject.items():
        srows.sort(key=lambda r: r.run_id)
        ids = [r.run_id for r in srows]
        if len(set(ids)) != len(ids):
            raise DataError(f"subject {subj}: duplicate run ids {ids}")

    words_hash_cache: dict = {}

    def whash(path):
        key = str(path)
        if key not in words_hash_cache:
            words_hash_cache[key] = file_sha256(path)
        return words_hash_cache[key]

    def emb_path(words_hash, n):
        try:
            return embed_index[words_hash][n]
        except KeyError:
            raise DataError(
                f"no embeddings for words hash {words_hash[:12]} at context size {n}; "
                "run the embed stage first"
            ) from None

    groups: dict = {}
    bold_cache: dict = {}
    for subj, srows in by_subject.items():
        sig = []
        for row in srows:
            bold = load_bold(row.bold_path)
            bold_cache[(subj, row.run_id)] = bold
            sig.append((row.run_id, whash(row.words_path), bold.n_scans, bold.tr_seconds))
        groups.setdefault(tuple(sig), []).append(subj)

    params = {
        "schedule": schedule,
        "lambda_grid": [float(x) for x in lambda_grid],
        "scan_ref": scan_ref,
        "detrend": detrend_order,
        "pca": pca,
    }

    out_paths: dict = {}
    for sig, subjects in sorted(groups.items(), key=lambda kv: sorted(kv[1])):
        subjects.sort()
        group_rows = by_subject[subjects[0]]
        emb_names = {
            n: [emb_path(whash(row.words_path), n).name for row in group_rows]
            for n in schedule
        }
        pending = []
        for s in subjects:
            out = out_dir / f"rscores_{s}.ctxpr"
            out_paths[s] = out
            subject_key = _stable_key(
                {
                    "params": params,
                    "embeddings": emb_names,
                    "bold": [
                        file_sha256(row.bold_path) for row in by_subject[s]
                    ],
                }
            )
            if out.exists():
                try:
                    _, _, header = load_rscores(out)
                    if header.get("param_key") == subject_key:
                        continue
                except CtxprobeError:
                    pass
            pending.append((s, subject_key))
        if not pending:
            continue

        Y_runs_per_subject = []
        for s, _ in pending:
            ys = []
            for row in by_subject[s]:
                data = bold_cache[(s, row.run_id)].data.astype(np.float64)
                if detrend_order > 0:
                    data = _legendre_detrend(data, detrend_order)
                ys.append(data)
            Y_runs_per_subject.append(ys)

        annotations = {r.run_id: read_word_annotations(r.words_path) for r in group_rows}
        rmaps = {s: [] for s, _ in pending}
        for n in schedule:
            emb_mats = [
                load_embeddings(emb_path(whash(row.words_path), n)).matrix.astype(np.float64)
                for row in group_rows
            ]
            if pca is not None:
                emb_mats = _pca_reduce(emb_mats, pca)
            X_runs = []
            for row, mat in zip(group_rows, emb_mats):
                bold = bold_cache[(subjects[0], row.run_id)]
                dm = build_design(
                    mat,
                    annotations[row.run_id].offsets,
                    tr=bold.tr_seconds,
                    n_scans=bold.n_scans,
                    run_id=row.run_id,
                    scan_ref=scan_ref,
                    context_size=n,
                )
                X_runs.append(dm.matrix)
            results = cv_rscores_multi(
                X_runs,
                Y_runs_per_subject,
                lambda_grid,
                run_ids=[row.run_id for row in group_rows],
            )
            for (s, _), rmap in zip(pending, results):
                rmaps[s].append(rmap)

        for s, subject_key in pending:
            save_rscores(
                out_paths[s],
                schedule,
                rmaps[s],
                subject_id=s,
                extra_config={"param_key": subject_key},
            )
    return out_paths


# ---------------------------------------------------------------- stats ---

def load_rscore_dir(rscores_dir):
    """(schedule, {subject_id: [n_sizes, n_voxels] matrix}) from a directory."""
    rscores_dir = Path(rscores_dir)
    paths = sorted(rscores_dir.glob("*.ctxpr"))
    if not paths:
        raise DataError(f"{rscores_dir}: no .ctxpr score files")
    subject_maps = {}
    schedule = None
    for p in paths:
        sched, mat, header = load_rscores(p)
        subj = header.get("subject_id", p.stem)
        if schedule is None:
            schedule = sched
        elif sched != schedule:
            raise DataError(f"{p}: schedule differs from other subjects")
        subject_maps[subj] = mat
    return schedule, subject_maps


def stats_files(
    rscores_dir,
    atlas_path,
    results_out,
    curves_out=None,
    q: float = 0.01,
    tail: str = "one",
    maxctx_rule: str = "figure",
):
    schedule, subject_maps = load_rscore_dir(rscores_dir)
    atlas = load_atlas(atlas_path)
    results, curves = analyze_parcels(
        atlas, subject_maps, schedule, q=q, tail=tail, maxctx_rule=maxctx_rule
    )
    Path(results_out).parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(results_out, results)
    if curves_out is not None:
        write_curves_csv(curves_out, curves)
    return results


def histogram_rows(results, have_hemisphere: bool):
    """Sorted (hemisphere, max_context_size, count) bins over significant
    parcels; the hemisphere label collapses to '' when absent."""
    counts: dict = {}
    for r in results:
        if not r.significant:
            continue
        hemi = r.hemisphere if have_hemisphere else ""
        counts[(hemi, r.max_context_size)] = counts.get((hemi, r.max_context_size), 0) + 1
    return [(hemi, size, cnt) for (hemi, size), cnt in sorted(counts.items())]


def write_histogram_csv(path, results, have_hemisphere: bool) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("hemisphere,max_context_size,count\n")
        for hemi, size, cnt in histogram_rows(results, have_hemisphere):
            f.write(f"{hemi},{size},{cnt}\n")


def plot_data_files(
    rscores_dir,
    atlas_path,
    curves_out,
    histogram_out,
    q: float = 0.01,
    tail: str = "one",
    maxctx_rule: str = "figure",
) -> None:
    """Centered-curve CSV plus a histogram of maximal context sizes, split
    by hemisphere when the atlas carries labels (unsplit with a notice
    otherwise)."""
    import warnings

    schedule, subject_maps = load_rscore_dir(rscores_dir)
    atlas = load_atlas(atlas_path)
    results, curves = analyze_parcels(
        atlas, subject_maps, schedule, q=q, tail=tail, maxctx_rule=maxctx_rule
    )
    write_curves_csv(curves_out, curves)
    have_hemi = bool(atlas.hemisphere)
    if not have_hemi:
        warnings.warn("atlas has no hemisphere column; histogram is unsplit", stacklevel=2)
    write_histogram_csv(histogram_out, results, have_hemi)


# ------------------------------------------------------------- pipeline ---

@dataclass
class PipelineConfig:
    checkpoint: Path
    vocab: Path
    merges: Path
    manifest: Path
    atlas: Path
    out_dir: Path
    schedule: list | None = None
    layer: int = 9
    pooling: str = "last"
    window_scope: str = "document"
    scan_ref: str = "end"
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    fdr_q: float = 0.01
    tail: str = "one"
    maxctx_rule: str = "figure"
    seed: int = 0
    jobs: int = 1
    bos_id: int | None = None
    detrend_order: int = 0
    pca: int | None = None
    cache_dir: Path | None = None

    def __post_init__(self):
        for name in ("checkpoint", "vocab", "merges", "manifest", "atlas"):
            p = Path(getattr(self, name))
            setattr(self, name, p)
            if not p.exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        self.out_dir = Path(self.out_dir)
        if self.cache_dir is None:
            self.cache_dir = self.out_dir / "embeddings"
        self.cache_dir = Path(self.cache_dir)
        if not 0 < self.fdr_q < 1:
            raise ConfigError("fdr_q must lie in (0, 1)")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def resolved_schedule(self):
        return context_schedule(self.schedule)

    def to_dict(self) -> dict:
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in self.__dict__.items()}


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Full embed -> encode -> stats -> plot-data run under one out_dir."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = cfg.out_dir / "run_manifest.json"
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "inputs": {
            "checkpoint": file_sha256(cfg.checkpoint),
            "vocab": file_sha256(cfg.vocab),
            "merges": file_sha256(cfg.merges),
            "manifest": file_sha256(cfg.manifest),
            "atlas": file_sha256(cfg.atlas),
        },
        "stages": {},
        "status": "incomplete",
    }

    def save_manifest():
        with open(manifest_path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)

    save_manifest()
    stage = "embed"
    try:
        rows = read_runs_manifest(cfg.manifest)
        index = embed_words_files(
            cfg.checkpoint,
            cfg.vocab,
            cfg.merges,
            [row.words_path for row in rows],
            cfg.resolved_schedule(),
            cfg.cache_dir,
            layer=cfg.layer,
            pooling=cfg.pooling,
            scope=cfg.window_scope,
            bos_id=cfg.bos_id,
            jobs=cfg.jobs,
        )
        manifest["stages"]["embed"] = {
            "status": "complete",
            "files": sum(len(v) for v in index.values()),
        }
        save_manifest()

        stage = "encode"
        rdir = cfg.out_dir / "rscores"
        out_paths = encode_runs(
            cfg.manifest,
            index,
            rdir,
            schedule=cfg.schedule,
            lambda_grid=cfg.lambda_grid,
            scan_ref=cfg.scan_ref,
            detrend_order=cfg.detrend_order,
            pca=cfg.pca,
        )
        manifest["stages"]["encode"] = {"status": "complete", "subjects": sorted(out_paths)}
        save_manifest()

        stage = "stats"
        results_path = cfg.out_dir / "results.csv"
        curves_path = cfg.out_dir / "curves.csv"
        hist_path = cfg.out_dir / "histogram.csv"
        stats_files(
            rdir, cfg.atlas, results_path, curves_out=curves_path,
            q=cfg.fdr_q, tail=cfg.tail, maxctx_rule=cfg.maxctx_rule,
        )
        plot_data_files(
            rdir, cfg.atlas, curves_path, hist_path,
            q=cfg.fdr_q, tail=cfg.tail, maxctx_rule=cfg.maxctx_rule,
        )
        manifest["stages"]["stats"] = {
            "status": "complete",
            "results_sha256": file_sha256(results_path),
        }
        manifest["status"] = "complete"
        save_manifest()
        return {
            "results": results_path,
            "curves": curves_path,
            "histogram": hist_path,
            "manifest": manifest_path,
        }
    except BaseException as e:
        manifest["status"] = "failed"
        manifest["error"] = {"stage": stage, "message": str(e)}
        save_manifest()
        raise
