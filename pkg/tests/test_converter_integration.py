"""Cross-checks against the companion checkpoint converter (converter/).

These tests exercise the CTXPW001 interface end to end: a GPT-2-shaped
safetensors source is synthesized and converted by the TypeScript tool, the
primary loads the container, and its forward pass must match the reference
activations the converter recorded. Skipped when node or the built
converter is unavailable.
"""

import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from ctxprobe.model import AttentionMask, forward, load_checkpoint

CONVERTER = Path(__file__).resolve().parent.parent / "converter"


def _converter_cli():
    cli = CONVERTER / "dist" / "convert.js"
    if cli.exists():
        return cli
    if not shutil.which("npm"):
        return None
    build = subprocess.run(
        ["npm", "--prefix", str(CONVERTER), "run", "build"],
        capture_output=True,
        text=True,
    )
    return cli if build.returncode == 0 and cli.exists() else None


@pytest.fixture(scope="module")
def converted(tmp_path_factory):
    if not shutil.which("node"):
        pytest.skip("node not available")
    cli = _converter_cli()
    if cli is None:
        pytest.skip("converter not built (run `npm --prefix converter run build`)")
    base = tmp_path_factory.mktemp("convert")
    src = base / "src"
    dest = base / "tiny.ctxpw"
    for args in (
        ["make-source", "--preset", "tiny", "--out", str(src), "--seed", "5", "--untied"],
        ["convert", "--source", str(src), "--dest", str(dest), "--verify"],
    ):
        proc = subprocess.run(["node", str(cli), *args], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    return dest


def test_converted_container_loads(converted):
    ckpt = load_checkpoint(converted)
    assert ckpt.config.n_layers == 2
    assert ckpt.config.d_model == 32
    report = json.loads((converted.parent / "tiny.ctxpw.report.json").read_text())
    assert len(report["tensors"]) == 4 + 12 * ckpt.config.n_layers
    assert "lm_head.weight" in report["dropped"]


def test_forward_matches_recorded_reference(converted):
    ckpt = load_checkpoint(converted)
    verify = json.loads((converted.parent / "tiny.ctxpw.verify.json").read_text())
    ids = verify["input_ids"]
    positions = verify["positions"]
    hs = forward(ckpt, ids, positions, AttentionMask.all_ones(len(ids)))
    tol = verify["tolerance"]
    worst = 0.0
    for layer, ref in enumerate(verify["hidden_states"]):
        diff = float(np.max(np.abs(hs.layers[layer] - np.asarray(ref, dtype=np.float64))))
        worst = max(worst, diff)
    assert worst <= tol, f"worst |delta| = {worst}"


def test_full_size_conversion_config():
    """[SECONDARY] criterion: a 12-layer, 768-dim conversion loads with the
    published configuration and matches the recorded reference activations.
    The public checkpoint itself is not downloadable here, so the source is
    synthesized with identical tensor names, shapes and config; set
    CTXPROBE_GPT2_SAFETENSORS to a real local checkpoint directory to run
    against the published weights. Enable with CTXPROBE_FULL_CONVERT=1
    (writes ~1 GB of temporary artifacts)."""
    import os
    import tempfile

    if not os.environ.get("CTXPROBE_FULL_CONVERT"):
        pytest.skip("set CTXPROBE_FULL_CONVERT=1 to run the 12-layer conversion")
    if not shutil.which("node"):
        pytest.skip("node not available")
    cli = _converter_cli()
    if cli is None:
        pytest.skip("converter not built")
    with tempfile.TemporaryDirectory() as td:
        src = os.environ.get("CTXPROBE_GPT2_SAFETENSORS")
        if not src:
            src = str(Path(td) / "src")
            proc = subprocess.run(
                ["node", str(cli), "make-source", "--preset", "gpt2", "--out", src],
                capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
        dest = Path(td) / "gpt2.ctxpw"
        proc = subprocess.run(
            ["node", str(cli), "convert", "--source", src, "--dest", str(dest), "--verify"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        ckpt = load_checkpoint(dest)
        assert (ckpt.config.n_layers, ckpt.config.n_heads, ckpt.config.d_model) == (12, 12, 768)
        assert (ckpt.config.vocab_size, ckpt.config.max_positions) == (50257, 1024)
        verify = json.loads((Path(td) / "gpt2.ctxpw.verify.json").read_text())
        hs = forward(
            ckpt, verify["input_ids"], verify["positions"],
            AttentionMask.all_ones(len(verify["input_ids"])),
        )
        for layer, ref in enumerate(verify["hidden_states"]):
            np.testing.assert_allclose(
                hs.layers[layer], np.asarray(ref), atol=verify["tolerance"]
            )
