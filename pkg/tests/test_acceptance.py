"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic-recovery
sweep (60 pipeline runs) dominates the runtime and is shared by the three
tests that grade it.
"""

import shutil
import time

import numpy as np
import pytest

from ctxprobe.encoding import ridge_fit
from ctxprobe.fixture import (
    make_fixture_checkpoint,
    make_fixture_vocab,
    make_fixture_words,
    make_probe_checkpoint,
    write_vocab_files,
)
from ctxprobe.model import AttentionMask, extract_layer, forward, save_checkpoint
from ctxprobe.pipeline import PipelineConfig, run_pipeline
from ctxprobe.roistats import bh_fdr, group_ttest, read_results_csv
from ctxprobe.rng import named_stream
from ctxprobe.sim import (
    EmbeddingProvider,
    SyntheticSpec,
    export_embedding_cache,
    make_run_annotations,
    simulate_dataset,
    tune_readout,
)
from ctxprobe.tokenizer import encode, encode_words
from ctxprobe.windows import (
    DEFAULT_SCHEDULE,
    build_windowed_input,
    context_schedule,
    generate_embeddings,
)

from oracles import brute_force_bh, ttest_oracle


def _report(name):
    print(f"\n[PASS] {name}")


# ----------------------------------------------------------------------
# Out-of-window independence
# ----------------------------------------------------------------------

def test_out_of_window_independence():
    """>= 1000 random (text, target, n) triples; mutating any out-of-window
    token moves the target embedding by <= 1e-5 in max-norm; <= 2 min."""
    t0 = time.monotonic()
    vocab = make_fixture_vocab()
    ckpt = make_fixture_checkpoint(seed=1, vocab_size=vocab.vocab_size)
    rng = named_stream(99, "independence-acceptance")
    texts = []
    for i in range(5):
        words, _, _, sids = make_fixture_words(300 + i, 120)
        texts.append(encode_words(words, vocab, sentence_ids=sids))

    n_triples = 1000
    worst = 0.0
    for k in range(n_triples):
        tt = texts[k % len(texts)]
        target = int(rng.integers(0, tt.n_words))
        n = int(rng.integers(1, 46))
        win = build_windowed_input(tt, target, n)
        out_idx = np.nonzero(win.mask.allowed == 0)[0]
        layer = int(rng.integers(0, ckpt.config.n_layers + 1))
        base = forward(ckpt, win.token_ids, win.positions, win.mask)
        ref = extract_layer(base, layer, win.target_token_index)
        if out_idx.size == 0:
            continue
        mutated = np.array(win.token_ids)
        flips = out_idx[rng.integers(0, out_idx.size, size=min(3, out_idx.size))]
        mutated[flips] = rng.integers(0, ckpt.config.vocab_size, size=flips.size)
        alt = forward(ckpt, mutated, win.positions, win.mask)
        diff = float(np.max(np.abs(ref - extract_layer(alt, layer, win.target_token_index))))
        worst = max(worst, diff)
        assert diff <= 1e-5, f"triple {k}: delta {diff}"
    elapsed = time.monotonic() - t0
    assert elapsed <= 120, f"took {elapsed:.1f}s"
    _report(
        f"out-of-window independence: {n_triples} triples, worst |delta| = {worst:.1e}, "
        f"{elapsed:.1f}s"
    )


# ----------------------------------------------------------------------
# Causal subsumption
# ----------------------------------------------------------------------

def test_causal_subsumption():
    """n >= target index + 1 reproduces all-ones causal embeddings to 1e-6."""
    vocab = make_fixture_vocab()
    ckpt = make_fixture_checkpoint(seed=1, vocab_size=vocab.vocab_size)
    text = "The lamb ate the flower. A star rose well. The king dreamed of rivers."
    tt = encode(text, vocab)
    n_tokens = len(tt.token_ids)
    emb = generate_embeddings(ckpt, tt, n_tokens + 1, 2)
    hs = forward(ckpt, tt.token_ids, np.arange(n_tokens), AttentionMask.all_ones(n_tokens))
    worst = 0.0
    for w, (_, last) in enumerate(tt.word_spans):
        diff = float(np.max(np.abs(emb.matrix[w] - extract_layer(hs, 2, last))))
        worst = max(worst, diff)
    assert worst <= 1e-6
    _report(f"causal subsumption: {tt.n_words} words, worst |delta| = {worst:.1e}")


# ----------------------------------------------------------------------
# Reference parity
# ----------------------------------------------------------------------

def test_reference_parity(tiny_ckpt, reference_fixture):
    """Forward on the pinned tiny checkpoint matches the frozen reference
    transformer fixture within 1e-4 elementwise."""
    fx = reference_fixture
    ids = fx["ids"]
    hs = forward(tiny_ckpt, ids, np.arange(len(ids)), AttentionMask.all_ones(len(ids)))
    worst = 0.0
    for layer in range(3):
        worst = max(worst, float(np.max(np.abs(hs.layers[layer] - fx[f"causal_layer{layer}"]))))
    assert worst <= 1e-4
    mask = fx["mask"]
    hm = forward(tiny_ckpt, ids, np.arange(len(ids)), AttentionMask(allowed=mask))
    rows = mask == 1
    for layer in range(3):
        worst = max(
            worst, float(np.max(np.abs(hm.layers[layer][rows] - fx[f"masked_layer{layer}"][rows])))
        )
    assert worst <= 1e-4
    _report(f"reference parity: causal + masked hidden states, worst |delta| = {worst:.1e}")


# ----------------------------------------------------------------------
# Ridge correctness
# ----------------------------------------------------------------------

def test_ridge_correctness():
    """Normal-equation residual <= 1e-6 relative; lambda=0 interpolation
    recovers planted weights to 1e-8 on invertible systems."""
    rng = named_stream(7, "ridge-acceptance")
    worst_resid = 0.0
    for trial in range(50):
        n, d, v = int(rng.integers(20, 80)), int(rng.integers(2, 12)), int(rng.integers(1, 6))
        lam = float(10.0 ** rng.uniform(-2, 4))
        X = rng.standard_normal((n, d))
        Y = rng.standard_normal((n, v))
        W = ridge_fit(X, Y, lam)
        G = X.T @ X + lam * np.eye(d)
        C = X.T @ Y
        resid = np.max(np.abs(G @ W - C)) / np.max(np.abs(C))
        worst_resid = max(worst_resid, float(resid))
        assert resid <= 1e-6
    worst_interp = 0.0
    for trial in range(50):
        d = int(rng.integers(2, 10))
        X = rng.standard_normal((d, d)) + d * np.eye(d)
        W0 = rng.standard_normal((d, 3))
        W = ridge_fit(X, X @ W0, 0.0)
        worst_interp = max(worst_interp, float(np.max(np.abs(W - W0))))
        assert np.allclose(W, W0, atol=1e-8)
    _report(
        f"ridge correctness: worst relative residual {worst_resid:.1e}, "
        f"worst interpolation error {worst_interp:.1e}"
    )


# ----------------------------------------------------------------------
# BH-FDR equivalence
# ----------------------------------------------------------------------

def test_bh_fdr_equivalence():
    """Matches the exhaustive largest-k definition on 10,000 random
    p-vectors of lengths 1-12, zero mismatches."""
    rng = named_stream(8, "bh-acceptance")
    mismatches = 0
    for _ in range(10_000):
        m = int(rng.integers(1, 13))
        style = rng.integers(0, 3)
        if style == 0:
            p = rng.uniform(0, 1, size=m)
        elif style == 1:
            p = rng.uniform(0, 0.1, size=m)  # dense small p: tie-prone region
        else:
            p = np.round(rng.uniform(0, 1, size=m), 2)  # exact ties
        q = float(rng.uniform(0.005, 0.5))
        if bh_fdr(p.tolist(), q) != brute_force_bh(p.tolist(), q):
            mismatches += 1
    assert mismatches == 0
    _report("BH-FDR equivalence: 10000 random p-vectors, 0 mismatches")


# ----------------------------------------------------------------------
# t-test oracle
# ----------------------------------------------------------------------

def test_ttest_oracle_parity():
    """t and p match the high-precision incomplete-beta oracle to 1e-6 over
    1,000 random slope samples."""
    rng = named_stream(9, "ttest-acceptance")
    checked = 0
    worst = 0.0
    while checked < 1000:
        n = int(rng.integers(3, 30))
        scale = float(10.0 ** rng.uniform(-4, 1))
        slopes = rng.standard_normal(n) * scale + rng.normal(0, scale)
        if np.std(slopes, ddof=1) == 0:
            continue
        t, p, degen = group_ttest(slopes)
        assert not degen
        t_ref, p_ref = ttest_oracle(slopes)
        worst = max(worst, abs(p - p_ref), abs(t - t_ref) / max(1.0, abs(t_ref)))
        assert abs(t - t_ref) <= 1e-6 * max(1.0, abs(t_ref))
        assert abs(p - p_ref) <= 1e-6
        checked += 1
    _report(f"t-test oracle parity: 1000 samples, worst |delta| = {worst:.1e}")


# ----------------------------------------------------------------------
# Synthetic recovery (shared sweep) + determinism
# ----------------------------------------------------------------------

WSTARS = (4, 10, 20)
N_SEEDS = 20
SWEEP_SPEC = dict(
    n_voxels=100,
    n_runs=8,
    scans_per_run=300,
    noise_sd=0.5,
    responsive_voxel_fraction=0.6,
    n_subjects=12,
    planted_parcels=3,
    null_parcels=2,
)


def _one_step_band(wstar):
    sched = list(DEFAULT_SCHEDULE)
    i = sched.index(wstar)
    return {sched[i - 1], wstar, sched[i + 1]}


@pytest.fixture(scope="session")
def synthetic_sweep(tmp_path_factory):
    base = tmp_path_factory.mktemp("sweep")
    t0 = time.monotonic()
    vocab = make_fixture_vocab()
    ckpt = make_probe_checkpoint(seed=2, vocab_size=vocab.vocab_size)
    fx = base / "fixture"
    fx.mkdir()
    save_checkpoint(fx / "ckpt.ctxpw", ckpt)
    write_vocab_files(vocab, fx / "vocab.json", fx / "merges.txt")
    cache = base / "embcache"

    spec0 = SyntheticSpec(planted_window=WSTARS[0], seed=0, **SWEEP_SPEC)
    anns = make_run_annotations(spec0)
    provider = EmbeddingProvider(ckpt, vocab, spec0.layer)
    readouts = {
        w: tune_readout(SyntheticSpec(planted_window=w, seed=0, **SWEEP_SPEC), provider, anns)
        for w in WSTARS
    }

    outcomes = {w: [] for w in WSTARS}
    exported = False
    for i in range(N_SEEDS):
        for w in WSTARS:
            spec = SyntheticSpec(planted_window=w, seed=3000 + i, **SWEEP_SPEC)
            ds = base / f"ds_w{w}_s{i}"
            truth = simulate_dataset(
                spec, ckpt, vocab, ds, annotations=anns, provider=provider,
                readout=readouts[w],
            )
            if not exported:
                words_paths = [ds / name for name in truth["words_files"]]
                export_embedding_cache(spec, provider, anns, words_paths,
                                       fx / "ckpt.ctxpw", cache)
                exported = True
            cfg = PipelineConfig(
                checkpoint=fx / "ckpt.ctxpw",
                vocab=fx / "vocab.json",
                merges=fx / "merges.txt",
                manifest=ds / "runs.tsv",
                atlas=ds / "atlas.csv",
                out_dir=ds / "pipeline",
                layer=spec.layer,
                seed=spec.seed,
                cache_dir=cache,
            )
            results = read_results_csv(run_pipeline(cfg)["results"])
            planted = [r for r in results if r.parcel_id in truth["planted_parcels"]]
            nulls = [r for r in results if r.parcel_id in truth["null_parcels"]]
            sig_ok = all(r.significant for r in planted) and not any(
                r.significant for r in nulls
            )
            verdicts = sorted(r.max_context_size for r in planted if r.significant)
            band_ok = bool(verdicts) and all(v in _one_step_band(w) for v in verdicts)
            outcomes[w].append({"seed": spec.seed, "sig_ok": sig_ok,
                                "band_ok": band_ok, "verdicts": verdicts})
            shutil.rmtree(ds)
    elapsed = time.monotonic() - t0
    return outcomes, elapsed


def test_synthetic_recovery_significance(synthetic_sweep):
    """Planted parcels significant at q=0.01 and null parcels not, in >= 95%
    of 20 seeds for each planted window."""
    outcomes, _ = synthetic_sweep
    for w in WSTARS:
        rate = np.mean([o["sig_ok"] for o in outcomes[w]])
        assert rate >= 0.95, f"w*={w}: significance correct in {rate:.0%} of seeds"
    rates = {w: float(np.mean([o["sig_ok"] for o in outcomes[w]])) for w in WSTARS}
    _report(f"synthetic recovery (a) significance: rates {rates}")


def test_synthetic_recovery_window(synthetic_sweep):
    """Estimated max context size within one schedule step of w* in >= 80%
    of seeds for each planted window."""
    outcomes, _ = synthetic_sweep
    for w in WSTARS:
        rate = np.mean([o["band_ok"] for o in outcomes[w]])
        assert rate >= 0.80, f"w*={w}: in-band in {rate:.0%} of seeds"
    rates = {w: float(np.mean([o["band_ok"] for o in outcomes[w]])) for w in WSTARS}
    _report(f"synthetic recovery (b) window estimate: rates {rates}")


def test_synthetic_recovery_runtime(synthetic_sweep):
    """The whole 3 x 20-seed sweep fits the 15-minute budget."""
    _, elapsed = synthetic_sweep
    assert elapsed <= 900, f"sweep took {elapsed:.0f}s"
    _report(f"synthetic recovery runtime: {elapsed:.0f}s <= 900s")


def test_pipeline_determinism(tmp_path):
    """Two full synthetic pipeline runs with identical config and seed give
    byte-identical results.csv."""
    vocab = make_fixture_vocab()
    ckpt = make_probe_checkpoint(seed=2, vocab_size=vocab.vocab_size)
    fx = tmp_path / "fx"
    fx.mkdir()
    save_checkpoint(fx / "ckpt.ctxpw", ckpt)
    write_vocab_files(vocab, fx / "vocab.json", fx / "merges.txt")
    spec = SyntheticSpec(
        planted_window=4, n_voxels=20, n_runs=3, scans_per_run=60, noise_sd=0.5,
        responsive_voxel_fraction=0.5, seed=77, n_subjects=3, planted_parcels=2,
        null_parcels=2, schedule=[1, 2, 3, 4, 6, 8],
    )
    blobs = []
    for tag in ("a", "b"):
        ds = tmp_path / f"ds_{tag}"
        simulate_dataset(spec, ckpt, vocab, ds)
        cfg = PipelineConfig(
            checkpoint=fx / "ckpt.ctxpw", vocab=fx / "vocab.json",
            merges=fx / "merges.txt", manifest=ds / "runs.tsv",
            atlas=ds / "atlas.csv", out_dir=ds / "out",
            schedule=[1, 2, 3, 4, 6, 8], layer=1, seed=spec.seed,
        )
        outputs = run_pipeline(cfg)
        blobs.append(outputs["results"].read_bytes())
    assert blobs[0] == blobs[1]
    _report("determinism: two synthetic pipeline runs, byte-identical results.csv")


# ----------------------------------------------------------------------
# Schedule contract
# ----------------------------------------------------------------------

def test_schedule_contract():
    """Default context schedule has exactly 21 values spanning 1-45."""
    sched = context_schedule()
    assert len(sched) == 21
    assert sched[0] == 1 and sched[-1] == 45
    assert all(b > a for a, b in zip(sched, sched[1:]))
    _report("schedule contract: 21 strictly increasing sizes from 1 to 45")
