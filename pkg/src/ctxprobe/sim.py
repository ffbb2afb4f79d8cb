"""Synthetic datasets with a planted context window.

The generator plants a ground-truth window w*: responsive voxels carry the
z-scored, HRF-convolved time course of a linear readout of the embeddings
generated at context size w*, plus Gaussian noise; everything else is pure
noise. Planted and null parcels are written into a small atlas so the full
pipeline (embed -> encode -> stats) can be validated against the known w*.

The readout direction is not arbitrary: a random direction mostly probes
content that is either predictable from much smaller windows or lost again
in larger ones, which makes the planted window unidentifiable in principle.
We therefore pick the direction whose convolved signal is best retained by
designs built at sizes above w* and worst explained below w* (a generalized
eigenproblem over the readout dimensions). The pipeline under test never
sees the readout; it only sees BOLD files.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import BoldRun, hrf, save_bold, scan_times, zscore_columns
from .errors import ArgumentError, DataError
from .fixture import PROBE_N_CONTENT, make_fixture_words
from .rng import named_stream
from .textio import ManifestRow, WordAnnotations, write_runs_manifest, write_word_annotations
from .tokenizer import Vocabulary, encode_words
from .windows import context_schedule, generate_embeddings


@dataclass
class SyntheticSpec:
    planted_window: int
    n_voxels: int = 100
    n_runs: int = 8
    scans_per_run: int = 300
    noise_sd: float = 0.5
    responsive_voxel_fraction: float = 0.6
    seed: int = 0
    # harness shape (defaults sized for the tiny probe checkpoint)
    n_subjects: int = 12
    tr_seconds: float = 2.0
    planted_parcels: int = 3
    null_parcels: int = 2
    layer: int = 1
    schedule: list = field(default_factory=context_schedule)
    text_seed: int = 101
    # words ~3.7 s apart: close enough that the HRF sums them, far enough
    # that a one-word shift is attenuated (shifts are how designs one size
    # short of the window would otherwise reconstruct the planted signal)
    word_gap: float = 3.2
    readout_dims: list | None = None  # defaults to the probe content dims

    def __post_init__(self):
        if self.planted_window not in list(self.schedule):
            raise ArgumentError(
                f"planted window {self.planted_window} not in the schedule"
            )
        if self.noise_sd < 0:
            raise ArgumentError("noise_sd must be >= 0")
        if not 0 <= self.responsive_voxel_fraction <= 1:
            raise ArgumentError("responsive_voxel_fraction must lie in [0, 1]")
        if self.n_runs < 3:
            raise ArgumentError("need >= 3 runs for cross-validation")

    @property
    def n_responsive(self) -> int:
        return int(round(self.responsive_voxel_fraction * self.n_voxels))


def make_run_annotations(spec: SyntheticSpec) -> list:
    """Per-run word streams timed to fill ~85% of each run."""
    rate = 0.47 + spec.word_gap  # rough seconds per word for the fixture stream
    n_words = max(60, int(0.85 * spec.scans_per_run * spec.tr_seconds / rate))
    anns = []
    for run in range(spec.n_runs):
        words, onsets, offsets, sids = make_fixture_words(
            spec.text_seed + run, n_words, word_gap=spec.word_gap
        )
        horizon = spec.scans_per_run * spec.tr_seconds
        keep = sum(1 for t in offsets if t < horizon - 1.0)
        anns.append(
            WordAnnotations(
                words=words[:keep],
                onsets=onsets[:keep],
                offsets=offsets[:keep],
                sentence_ids=sids[:keep],
            )
        )
    return anns


class EmbeddingProvider:
    """Caches per-(run, size) embedding matrices across calls (and seeds)."""

    def __init__(self, ckpt, vocab: Vocabulary, layer: int):
        self.ckpt = ckpt
        self.vocab = vocab
        self.layer = layer
        self._tokens = {}
        self._cache = {}

    def tokenized(self, key, ann: WordAnnotations):
        if key not in self._tokens:
            self._tokens[key] = encode_words(
                ann.words, self.vocab, sentence_ids=ann.sentence_ids
            )
        return self._tokens[key]

    def embeddings(self, key, ann: WordAnnotations, n: int) -> np.ndarray:
        ck = (key, n)
        if ck not in self._cache:
            tt = self.tokenized(key, ann)
            self._cache[ck] = generate_embeddings(
                self.ckpt, tt, n, self.layer
            ).matrix.astype(np.float64)
        return self._cache[ck]


def _convolution_kernel(ann: WordAnnotations, n_scans: int, tr: float) -> np.ndarray:
    lags = scan_times(n_scans, tr)[:, None] - np.asarray(ann.offsets, dtype=np.float64)[None, :]
    K = np.zeros_like(lags)
    pos = lags >= 0
    K[pos] = hrf(lags[pos])
    return K


def tune_readout(spec: SyntheticSpec, provider: EmbeddingProvider, anns) -> np.ndarray:
    """Readout vector (full d_model) planting an identifiable window w*.

    Two directions are extracted from the generalized eigenproblem over the
    readout dims: one whose convolved signal is retained by designs built
    above w* but missing below it (the window carrier), and one predictable
    at every size (the floor). The planted readout is the mix of the two
    whose noise-free predictability curve, pushed through the actual
    maximal-context-size estimator, lands on w* or the size just below it
    with the largest margin between the saturation threshold and the
    neighboring curve values. The scale-invariance of the estimator (max
    minus one sd of the centered curve) makes the noise-free curve an exact
    stand-in for the measured one up to estimation noise.
    """
    from scipy.linalg import eigh

    from .roistats import RoiCurve, max_context_size

    sched = list(spec.schedule)
    wstar = spec.planted_window
    idx = sched.index(wstar)
    pre = sched[:idx]
    post = sched[idx + 1 :]
    if not pre or not post:
        raise ArgumentError("planted window must be interior to the schedule")

    d = provider.ckpt.config.d_model
    dims = spec.readout_dims
    if dims is None:
        dims = list(range(min(PROBE_N_CONTENT, d)))
    kernels = [
        _convolution_kernel(a, spec.scans_per_run, spec.tr_seconds) for a in anns
    ]

    def design(n):
        return np.vstack(
            [
                zscore_columns(kernels[r] @ provider.embeddings(r, anns[r], n))
                for r in range(spec.n_runs)
            ]
        )

    B = np.vstack(
        [kernels[r] @ provider.embeddings(r, anns[r], wstar)[:, dims] for r in range(spec.n_runs)]
    )
    Bc = B - B.mean(axis=0)
    S = Bc.T @ Bc
    ridge = 1e-9 * np.trace(S) / len(dims)
    S_reg = S + ridge * np.eye(len(dims))

    M = {}
    for n in sched:
        X = design(n)
        Q, _ = np.linalg.qr(X - X.mean(axis=0))
        G = Q.T @ Bc
        M[n] = G.T @ G

    M_post = sum(M[n] for n in post) / len(post)
    M_pre = (sum(M[n] for n in pre) + 2.0 * M[pre[-1]]) / (len(pre) + 2)
    _, vecs = eigh(M_post - M_pre, S_reg)
    r_window = vecs[:, -1]
    _, vecs = eigh(M_pre, S_reg)
    r_floor = vecs[:, -1]

    def snorm(v):
        return float(np.sqrt(v @ S_reg @ v))

    r_floor = r_floor * (snorm(r_window) / snorm(r_floor))

    def curve(v):
        denom = float(v @ S_reg @ v)
        return np.array([np.sqrt(max(float(v @ M[n] @ v), 0.0) / denom) for n in sched])

    def verdict_and_margin(rho):
        est = max_context_size(
            [RoiCurve(subject_id="tune", parcel_id="tune", sizes=sched, scores=list(rho))]
        )
        centered = rho - rho.mean()
        thr = centered.max() - centered.std()
        below_margin = thr - centered[idx - 1]
        above_margin = min(centered[sched.index(c)] - thr for c in post)
        return est, min(below_margin, above_margin)

    best = None
    for mu in np.linspace(0.0, 1.5, 31):
        v = r_window + mu * r_floor
        rho = curve(v)
        est, margin = verdict_and_margin(rho)
        ok = est in (pre[-1], wstar)
        key = (ok, margin)
        if best is None or key > best[0]:
            best = (key, v)
    r = np.zeros(d)
    r[dims] = best[1]
    return r


def simulate_dataset(
    spec: SyntheticSpec,
    ckpt,
    vocab: Vocabulary,
    out_dir,
    annotations=None,
    provider: EmbeddingProvider | None = None,
    readout: np.ndarray | None = None,
) -> dict:
    """Write a complete synthetic dataset under out_dir.

    Emits per-run word TSVs, per-(subject, run) BOLD containers, the runs
    manifest, the atlas CSV, and ground_truth.json. Returns the ground-truth
    dict. `annotations`, `provider` and `readout` may be passed in to share
    text/embedding work across datasets with the same checkpoint and text
    (only the noise depends on spec.seed).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    anns = annotations if annotations is not None else make_run_annotations(spec)
    if len(anns) != spec.n_runs:
        raise ArgumentError(f"need {spec.n_runs} annotation sets, got {len(anns)}")
    if provider is None:
        provider = EmbeddingProvider(ckpt, vocab, spec.layer)

    max_n = max(spec.schedule)
    for r, ann in enumerate(anns):
        tt = provider.tokenized(r, ann)
        if len(tt.token_ids) < max_n + 1:
            raise DataError(
                f"run {r}: text too short for the largest window; "
                f"need >= {max_n + 1} tokens, got {len(tt.token_ids)}"
            )

    n_resp = spec.n_responsive
    if n_resp > 0 and readout is None:
        readout = tune_readout(spec, provider, anns)

    # signal per run: z-scored convolved readout time course
    signals = []
    for r, ann in enumerate(anns):
        if n_resp == 0:
            signals.append(None)
            continue
        E = provider.embeddings(r, ann, spec.planted_window)
        K = _convolution_kernel(ann, spec.scans_per_run, spec.tr_seconds)
        sig = K @ (E @ readout)
        sd = sig.std()
        if sd == 0:
            raise DataError("degenerate readout: constant signal")
        signals.append((sig - sig.mean()) / sd)
    n_parcels = spec.planted_parcels + spec.null_parcels

    words_paths = []
    for r, ann in enumerate(anns):
        wp = out_dir / f"words_run-{r:02d}.tsv"
        write_word_annotations(wp, ann)
        words_paths.append(wp)

    rows = []
    for s in range(spec.n_subjects):
        subject_id = f"sub-{s:02d}"
        for r in range(spec.n_runs):
            rng = named_stream(spec.seed, "bold", subject_id, r)
            noise = rng.standard_normal((spec.scans_per_run, spec.n_voxels))
            data = noise.copy()
            if n_resp > 0:
                data[:, :n_resp] = (
                    signals[r][:, None] + spec.noise_sd * noise[:, :n_resp]
                )
            bp = out_dir / f"bold_{subject_id}_run-{r:02d}.ctxpb"
            save_bold(
                bp,
                BoldRun(
                    data=data.astype(np.float32),
                    tr_seconds=spec.tr_seconds,
                    run_id=r,
                    subject_id=subject_id,
                ),
            )
            rows.append(
                ManifestRow(
                    subject_id=subject_id, run_id=r, bold_path=bp, words_path=words_paths[r]
                )
            )
    write_runs_manifest(out_dir / "runs.tsv", rows)

    # planted parcels split the responsive voxels, null parcels the rest
    atlas_rng = named_stream(spec.seed, "atlas")
    parcel_voxels = {}
    resp_split = np.array_split(np.arange(n_resp), spec.planted_parcels) if n_resp else []
    null_split = np.array_split(np.arange(n_resp, spec.n_voxels), spec.null_parcels)
    with open(out_dir / "atlas.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("parcel_id,voxel_index,loading,hemisphere\n")
        pid = 0
        for group, tag in ((resp_split, "planted"), (null_split, "null")):
            for voxels in group:
                if len(voxels) == 0:
                    continue
                name = f"p{pid:02d}_{tag}"
                hemi = "L" if pid % 2 == 0 else "R"
                parcel_voxels[name] = [int(v) for v in voxels]
                for v in voxels:
                    loading = float(atlas_rng.uniform(0.5, 1.5))
                    f.write(f"{name},{v},{loading:.6f},{hemi}\n")
                pid += 1

    truth = {
        "words_files": [p.name for p in words_paths],
        "planted_window": spec.planted_window,
        "schedule": [int(c) for c in spec.schedule],
        "seed": spec.seed,
        "noise_sd": spec.noise_sd,
        "n_subjects": spec.n_subjects,
        "layer": spec.layer,
        "planted_parcels": [p for p in parcel_voxels if p.endswith("planted")],
        "null_parcels": [p for p in parcel_voxels if p.endswith("null")],
        "responsive_voxels": list(range(n_resp)),
        "readout": [] if readout is None else [float(v) for v in readout],
    }
    with open(out_dir / "ground_truth.json", "w", encoding="utf-8") as f:
        json.dump(truth, f, indent=1, sort_keys=True)
    return truth


def export_embedding_cache(
    spec: SyntheticSpec,
    provider: EmbeddingProvider,
    anns,
    words_paths,
    ckpt_path,
    cache_dir,
) -> None:
    """Write the provider's in-memory embeddings as pipeline cache files.

    The pipeline would recompute identical matrices from the words files;
    seeding its content-addressed cache just skips that second pass.
    """
    from .pipeline import embedding_cache_name, file_sha256
    from .windows import EmbeddingSet, save_embeddings

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    ckpt_hash = file_sha256(ckpt_path)
    for r, (ann, wp) in enumerate(zip(anns, words_paths)):
        wh = file_sha256(wp)
        for n in spec.schedule:
            out = cache_dir / embedding_cache_name(
                wh, ckpt_hash, n, spec.layer, "last", "document", None
            )
            if out.exists():
                continue
            emb = EmbeddingSet(
                context_size=n,
                layer=spec.layer,
                matrix=provider.embeddings(r, ann, n).astype(np.float32),
                metadata={"pooling": "last", "window_scope": "document", "bos_id": -1},
            )
            save_embeddings(
                out,
                emb,
                extra_metadata={"checkpoint_sha256": ckpt_hash, "words_sha256": wh},
            )
