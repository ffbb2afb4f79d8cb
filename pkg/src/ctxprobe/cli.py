"""Command-line interface.

Subcommands: fixture, simulate, embed, encode, stats, plot-data, run.
A TOML config file (--config) supplies defaults for any flag; explicit
flags win. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric error.
"""

import argparse
import shutil
import sys
from pathlib import Path

from .encoding import DEFAULT_LAMBDA_GRID
from .errors import ConfigError, CtxprobeError, DataError, NumericError
from .fixture import (
    make_fixture_checkpoint,
    make_fixture_vocab,
    make_probe_checkpoint,
    write_vocab_files,
)
from .model import save_checkpoint
from .pipeline import (
    PipelineConfig,
    embed_words_files,
    encode_runs,
    plot_data_files,
    run_pipeline,
    scan_embeddings_dir,
    stats_files,
)
from .windows import context_schedule

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


def _load_config(path):
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _cfg_get(args, config, key, default=None):
    """Explicit flag > config file entry > default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in config:
        return config[key]
    return default


def _require(args, config, key):
    val = _cfg_get(args, config, key)
    if val is None:
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return val


def _parse_schedule(text):
    if text is None or text == "default":
        return None
    return [int(v) for v in str(text).split(",") if v != ""]


def _parse_grid(text):
    if text is None or text == "default":
        return list(DEFAULT_LAMBDA_GRID)
    return [float(v) for v in str(text).split(",") if v != ""]


def cmd_fixture(args, config):
    out = Path(_require(args, config, "out"))
    out.mkdir(parents=True, exist_ok=True)
    seed = int(_cfg_get(args, config, "seed", 0))
    vocab = make_fixture_vocab()
    if args.style == "probe":
        ckpt = make_probe_checkpoint(seed=seed, vocab_size=vocab.vocab_size)
    else:
        ckpt = make_fixture_checkpoint(
            seed=seed,
            n_layers=args.n_layers,
            d_model=args.d_model,
            n_heads=args.n_heads,
            vocab_size=vocab.vocab_size,
        )
    save_checkpoint(out / "ckpt.ctxpw", ckpt)
    write_vocab_files(vocab, out / "vocab.json", out / "merges.txt")
    cfg = ckpt.config
    print(
        f"wrote {out}/ckpt.ctxpw ({cfg.n_layers} layers, d_model={cfg.d_model}, "
        f"vocab={cfg.vocab_size}), vocab.json, merges.txt"
    )
    return 0


def cmd_simulate(args, config):
    from .model import load_checkpoint
    from .sim import SyntheticSpec, simulate_dataset
    from .tokenizer import load_vocabulary

    out = Path(_require(args, config, "out"))
    ckpt_path = _require(args, config, "checkpoint")
    vocab_path = _require(args, config, "vocab")
    merges_path = _require(args, config, "merges")
    spec = SyntheticSpec(
        planted_window=int(_require(args, config, "planted_window")),
        n_voxels=int(_cfg_get(args, config, "n_voxels", 100)),
        n_runs=int(_cfg_get(args, config, "n_runs", 8)),
        scans_per_run=int(_cfg_get(args, config, "scans_per_run", 300)),
        noise_sd=float(_cfg_get(args, config, "noise_sd", 0.5)),
        responsive_voxel_fraction=float(_cfg_get(args, config, "responsive_fraction", 0.6)),
        seed=int(_cfg_get(args, config, "seed", 0)),
        n_subjects=int(_cfg_get(args, config, "n_subjects", 12)),
        tr_seconds=float(_cfg_get(args, config, "tr", 2.0)),
        layer=int(_cfg_get(args, config, "layer", 1)),
        schedule=context_schedule(_parse_schedule(_cfg_get(args, config, "schedule"))),
        text_seed=int(_cfg_get(args, config, "text_seed", 101)),
    )
    ckpt = load_checkpoint(ckpt_path)
    vocab = load_vocabulary(vocab_path, merges_path)
    truth = simulate_dataset(spec, ckpt, vocab, out)

    # ready-to-run pipeline config next to the data
    cfg_text = "\n".join(
        [
            f'checkpoint = "{ckpt_path}"',
            f'vocab = "{vocab_path}"',
            f'merges = "{merges_path}"',
            f'manifest = "{out / "runs.tsv"}"',
            f'atlas = "{out / "atlas.csv"}"',
            f'out = "{out / "pipeline"}"',
            f"layer = {spec.layer}",
            f"seed = {spec.seed}",
            "",
        ]
    )
    (out / "config.toml").write_text(cfg_text, encoding="utf-8")
    print(
        f"synthetic dataset at {out}: planted window {truth['planted_window']}, "
        f"{spec.n_subjects} subjects x {spec.n_runs} runs, "
        f"parcels {truth['planted_parcels'] + truth['null_parcels']}"
    )
    return 0


def cmd_embed(args, config):
    sizes = (
        [int(_require(args, config, "context_size"))]
        if _cfg_get(args, config, "context_size") is not None
        else context_schedule(_parse_schedule(_cfg_get(args, config, "schedule", "default")))
    )
    out = Path(_require(args, config, "out"))
    words = _cfg_get(args, config, "words")
    if not words:
        raise ConfigError("missing required option --words")
    words = [words] if isinstance(words, (str, Path)) else list(words)
    single_file_out = len(sizes) == 1 and len(words) == 1 and out.suffix != "" and not out.is_dir()
    cache_dir = out.parent / "embcache" if single_file_out else out
    index = embed_words_files(
        _require(args, config, "checkpoint"),
        _require(args, config, "vocab"),
        _require(args, config, "merges"),
        words,
        sizes,
        cache_dir,
        layer=int(_cfg_get(args, config, "layer", 9)),
        pooling=_cfg_get(args, config, "pooling", "last"),
        scope=_cfg_get(args, config, "window_scope", "document"),
        bos_id=_cfg_get(args, config, "bos_id"),
        jobs=int(_cfg_get(args, config, "jobs", 1)),
    )
    n_files = sum(len(v) for v in index.values())
    if single_file_out:
        (wh, by_n), = index.items()
        (n, path), = by_n.items()
        shutil.copyfile(path, out)
        print(f"wrote {out} (context size {n})")
    else:
        print(f"{n_files} embedding file(s) under {cache_dir}")
    return 0


def cmd_encode(args, config):
    index = scan_embeddings_dir(_require(args, config, "embeddings_dir"))
    out_paths = encode_runs(
        _require(args, config, "manifest"),
        index,
        _require(args, config, "out"),
        schedule=_parse_schedule(_cfg_get(args, config, "schedule")),
        lambda_grid=_parse_grid(_cfg_get(args, config, "lambda_grid")),
        scan_ref=_cfg_get(args, config, "scan_ref", "end"),
        detrend_order=int(_cfg_get(args, config, "detrend", 0)),
        pca=_cfg_get(args, config, "pca"),
    )
    print(f"R scores for {len(out_paths)} subject(s) under {_require(args, config, 'out')}")
    return 0


def cmd_stats(args, config):
    out = Path(_require(args, config, "out"))
    curves_out = _cfg_get(args, config, "curves_out")
    results = stats_files(
        _require(args, config, "rscores_dir"),
        _require(args, config, "atlas"),
        out,
        curves_out=curves_out,
        q=float(_cfg_get(args, config, "fdr", 0.01)),
        tail=_cfg_get(args, config, "tail", "one"),
        maxctx_rule=_cfg_get(args, config, "maxctx_rule", "figure"),
    )
    n_sig = sum(r.significant for r in results)
    print(f"wrote {out}: {len(results)} parcels, {n_sig} significant")
    return 0


def cmd_plot_data(args, config):
    curves = Path(_require(args, config, "out"))
    hist = Path(_cfg_get(args, config, "histogram_out", curves.parent / "histogram.csv"))
    plot_data_files(
        _require(args, config, "rscores_dir"),
        _require(args, config, "atlas"),
        curves,
        hist,
        q=float(_cfg_get(args, config, "fdr", 0.01)),
        tail=_cfg_get(args, config, "tail", "one"),
        maxctx_rule=_cfg_get(args, config, "maxctx_rule", "figure"),
    )
    print(f"wrote {curves} and {hist}")
    return 0


def cmd_run(args, config):
    cfg = PipelineConfig(
        checkpoint=_require(args, config, "checkpoint"),
        vocab=_require(args, config, "vocab"),
        merges=_require(args, config, "merges"),
        manifest=_require(args, config, "manifest"),
        atlas=_require(args, config, "atlas"),
        out_dir=_require(args, config, "out"),
        schedule=_parse_schedule(_cfg_get(args, config, "schedule")),
        layer=int(_cfg_get(args, config, "layer", 9)),
        pooling=_cfg_get(args, config, "pooling", "last"),
        window_scope=_cfg_get(args, config, "window_scope", "document"),
        scan_ref=_cfg_get(args, config, "scan_ref", "end"),
        lambda_grid=_parse_grid(_cfg_get(args, config, "lambda_grid")),
        fdr_q=float(_cfg_get(args, config, "fdr", 0.01)),
        tail=_cfg_get(args, config, "tail", "one"),
        maxctx_rule=_cfg_get(args, config, "maxctx_rule", "figure"),
        seed=int(_cfg_get(args, config, "seed", 0)),
        jobs=int(_cfg_get(args, config, "jobs", 1)),
        bos_id=_cfg_get(args, config, "bos_id"),
        detrend_order=int(_cfg_get(args, config, "detrend", 0)),
        pca=_cfg_get(args, config, "pca"),
        cache_dir=_cfg_get(args, config, "cache_dir"),
    )
    outputs = run_pipeline(cfg)
    print(f"pipeline complete: {outputs['results']}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ctxprobe", description=__doc__)
    p.add_argument("--config", help="TOML config file supplying flag defaults")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--out")
        return sp

    sp = add("fixture", cmd_fixture, help="write a deterministic tiny checkpoint + vocab")
    sp.add_argument("--style", choices=("plain", "probe"), default="plain")
    sp.add_argument("--n-layers", type=int, default=2)
    sp.add_argument("--d-model", type=int, default=16)
    sp.add_argument("--n-heads", type=int, default=4)

    sp = add("simulate", cmd_simulate, help="generate a synthetic dataset with a planted window")
    sp.add_argument("--checkpoint")
    sp.add_argument("--vocab")
    sp.add_argument("--merges")
    sp.add_argument("--planted-window", dest="planted_window", type=int)
    sp.add_argument("--n-voxels", dest="n_voxels", type=int)
    sp.add_argument("--n-runs", dest="n_runs", type=int)
    sp.add_argument("--scans-per-run", dest="scans_per_run", type=int)
    sp.add_argument("--noise-sd", dest="noise_sd", type=float)
    sp.add_argument("--responsive-fraction", dest="responsive_fraction", type=float)
    sp.add_argument("--n-subjects", dest="n_subjects", type=int)
    sp.add_argument("--tr", type=float)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--schedule")
    sp.add_argument("--text-seed", dest="text_seed", type=int)

    sp = add("embed", cmd_embed, help="fixed-context word embeddings for words files")
    sp.add_argument("--checkpoint")
    sp.add_argument("--vocab")
    sp.add_argument("--merges")
    sp.add_argument("--words", action="append")
    sp.add_argument("--context-size", dest="context_size", type=int)
    sp.add_argument("--schedule")
    sp.add_argument("--layer", type=int)
    sp.add_argument("--pooling", choices=("last", "mean"))
    sp.add_argument("--window-scope", dest="window_scope", choices=("document", "sentence"))
    sp.add_argument("--bos-id", dest="bos_id", type=int)

    sp = add("encode", cmd_encode, help="cross-validated ridge encoding -> R scores")
    sp.add_argument("--embeddings-dir", dest="embeddings_dir")
    sp.add_argument("--manifest")
    sp.add_argument("--schedule")
    sp.add_argument("--lambda-grid", dest="lambda_grid")
    sp.add_argument("--scan-ref", dest="scan_ref", choices=("start", "middle", "end"))
    sp.add_argument("--detrend", type=int)
    sp.add_argument("--pca", type=int)

    sp = add("stats", cmd_stats, help="ROI statistics -> results.csv")
    sp.add_argument("--rscores-dir", dest="rscores_dir")
    sp.add_argument("--atlas")
    sp.add_argument("--fdr", type=float)
    sp.add_argument("--tail", choices=("one", "two"))
    sp.add_argument("--maxctx-rule", dest="maxctx_rule", choices=("figure", "methods"))
    sp.add_argument("--curves-out", dest="curves_out")

    sp = add("plot-data", cmd_plot_data, help="curve + histogram CSVs for plotting")
    sp.add_argument("--rscores-dir", dest="rscores_dir")
    sp.add_argument("--atlas")
    sp.add_argument("--fdr", type=float)
    sp.add_argument("--tail", choices=("one", "two"))
    sp.add_argument("--maxctx-rule", dest="maxctx_rule", choices=("figure", "methods"))
    sp.add_argument("--histogram-out", dest="histogram_out")

    sp = add("run", cmd_run, help="full pipeline: embed -> encode -> stats -> plot data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--vocab")
    sp.add_argument("--merges")
    sp.add_argument("--manifest")
    sp.add_argument("--atlas")
    sp.add_argument("--schedule")
    sp.add_argument("--layer", type=int)
    sp.add_argument("--pooling", choices=("last", "mean"))
    sp.add_argument("--window-scope", dest="window_scope", choices=("document", "sentence"))
    sp.add_argument("--scan-ref", dest="scan_ref", choices=("start", "middle", "end"))
    sp.add_argument("--lambda-grid", dest="lambda_grid")
    sp.add_argument("--fdr", type=float)
    sp.add_argument("--tail", choices=("one", "two"))
    sp.add_argument("--maxctx-rule", dest="maxctx_rule", choices=("figure", "methods"))
    sp.add_argument("--bos-id", dest="bos_id", type=int)
    sp.add_argument("--detrend", type=int)
    sp.add_argument("--pca", type=int)
    sp.add_argument("--cache-dir", dest="cache_dir")

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except ConfigError as e:
        print(f"ctxprobe: config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"ctxprobe: data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"ctxprobe: numeric error: {e}", file=sys.stderr)
        return 4
    except CtxprobeError as e:
        print(f"ctxprobe: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
