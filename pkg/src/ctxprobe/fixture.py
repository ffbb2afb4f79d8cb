"""Deterministic tiny fixtures: vocabulary, checkpoint, and word streams.

Everything here is a pure function of its seed (Philox streams), so test
fixtures and synthetic datasets are reproducible across platforms without
shipping binaries. The vocabulary is a real byte-level BPE table over a
small lexicon; the checkpoint is a randomly initialized 2-layer model by
default.
"""

import json

import numpy as np

from .model import Checkpoint, ModelConfig, tensor_schema
from .rng import named_stream
from .tokenizer import Vocabulary, byte_encoder

LEXICON = (
    "the", "a", "star", "rose", "fox", "lamb", "king", "moon", "sand",
    "well", "wind", "tree", "bird", "snake", "cloud", "ship", "light",
    "petal", "thorn", "crown", "dune", "echo", "dream", "stone", "river",
    "ember", "glass", "raven", "tide", "flame",
)

SPACE_CH = byte_encoder()[ord(" ")]


def make_fixture_vocab() -> Vocabulary:
    """Byte-level BPE vocabulary merging ' word' for every lexicon entry.

    Ids 0-255 are the byte alphabet in byte order; merge products follow in
    merge order, so the table is dense by construction.
    """
    enc = byte_encoder()
    table = {enc[b]: b for b in range(256)}
    merges = []
    seen = set()
    for word in LEXICON:
        parts = [SPACE_CH] + [enc[b] for b in word.encode("utf-8")]
        left = parts[0]
        for right in parts[1:]:
            pair = (left, right)
            if pair not in seen:
                seen.add(pair)
                merges.append(pair)
                merged = left + right
                if merged not in table:
                    table[merged] = len(table)
            left = left + right
    return Vocabulary(token_table=table, merge_ranks=merges)


def write_vocab_files(vocab: Vocabulary, vocab_path, merges_path) -> None:
    with open(vocab_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(vocab.token_table, f, ensure_ascii=False, sort_keys=True)
    with open(merges_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("#version: ctxprobe fixture\n")
        for a, b in vocab.merge_ranks:
            f.write(f"{a} {b}\n")


def make_fixture_checkpoint(
    seed: int = 0,
    n_layers: int = 2,
    d_model: int = 16,
    n_heads: int = 4,
    vocab_size: int | None = None,
    max_positions: int = 512,
    embed_scale: float = 1.0,
    weight_scale: float = 0.35,
) -> Checkpoint:
    """Random but deterministic checkpoint.

    Scales are chosen so attention logits have O(1) spread (a tiny model
    with GPT-2's 0.02 init attends almost uniformly, which makes masking
    effects invisible at this width).
    """
    if vocab_size is None:
        vocab_size = make_fixture_vocab().vocab_size
    cfg = ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        d_model=d_model,
        vocab_size=vocab_size,
        max_positions=max_positions,
    )
    tensors = {}
    for name, shape in tensor_schema(cfg).items():
        rng = named_stream(seed, "fixture-ckpt", name)
        if name.endswith(("gamma",)):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(("beta", "bias")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif name in ("token_embedding", "position_embedding"):
            scale = embed_scale / np.sqrt(d_model)
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
        else:
            fan_in = shape[0]
            scale = weight_scale / np.sqrt(fan_in)
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return Checkpoint(config=cfg, tensors=tensors)


def scan_lag_profile(target: int, sharpness: float = 3.0, lag_max: int = 45):
    """Choose (T1, phi1, T2, phi2) for a two-cosine attention lag profile
    g(lag) = exp(sharpness*(cos(2*pi*lag/T1 - phi1) + cos(2*pi*lag/T2 - phi2)))
    whose squared mass concentrates at `target` with little leakage on
    either side (leak beyond the target erodes how well larger windows
    retain a window-(target+1) signal, so it is penalized hardest)."""
    lags = np.arange(0, lag_max + 1)
    best = (-np.inf, None)
    for T1 in np.arange(max(2.0, 1.3 * target), 62.0, 0.3):
        for T2 in np.arange(2.0, 62.0, 0.3):
            if abs(T1 - T2) < 0.5:
                continue
            phi1 = 2 * np.pi * target / T1
            phi2 = 2 * np.pi * target / T2
            g = np.exp(
                sharpness
                * (np.cos(2 * np.pi * lags / T1 - phi1) + np.cos(2 * np.pi * lags / T2 - phi2))
            )
            g2 = g * g
            g2 = g2 / g2.sum()
            # mass at target-1 lets designs one size short of the window
            # reconstruct the signal through a one-word time shift (the HRF
            # barely attenuates it), so it gets the same penalty as leakage
            # beyond the window
            score = (
                g2[target]
                - 10.0 * g2[max(0, target - 1)]
                - 4.0 * g2[0 : max(1, target - 1)].sum()
                - 10.0 * g2[target + 2 :].sum()
            )
            if score > best[0]:
                best = (score, (float(T1), float(phi1), float(T2), float(phi2)))
    return best[1]


PROBE_N_CONTENT = 16
PROBE_SCALES = (1, 3, 9, 19)


def make_probe_checkpoint(
    seed: int = 2,
    vocab_size: int | None = None,
    max_positions: int = 512,
    scales=PROBE_SCALES,
    sharpness: float = 3.0,
    sharpness_l2: float = 1.2,
    pos_scale: float = 0.5,
    wte_sd: float = 0.35,
    v_sd: float = 0.35,
    o_sd: float = 0.35,
    mlp_sd: float = 0.15,
) -> Checkpoint:
    """A 2-layer model whose heads integrate context at known scales.

    Unlike make_fixture_checkpoint, this generator structures the weights so
    the model has measurable multi-scale context integration, which the
    synthetic validation needs (a fully generic random tiny model dilutes
    past information uniformly and has no characteristic window):

    - the residual stream is split: dims [0, 16) carry token content, the
      rest carry a 3-phase cosine position bank (two frequencies per head).
      Balanced 3-phase triplets have zero sum and constant norm, and token
      rows are normalized the same way, so the first layer norm is an exact
      rescaling and attention logits are exact functions of key-query lag.
    - head h's layer-1 logits follow the two-cosine profile from
      scan_lag_profile(scales[h]): its attention mass sits at a known lag.
    - values, output and MLP projections read and write content dims only;
      position dims pass through untouched.

    Layer 2 reuses the shortest-scale profile for all heads (local
    smoothing). The result is still a standard GPT-2 stack; only the weight
    values are structured.
    """
    if vocab_size is None:
        vocab_size = make_fixture_vocab().vocab_size
    d, heads = 40, 4
    dh = d // heads
    nc = PROBE_N_CONTENT
    cfg = ModelConfig(
        n_layers=2, n_heads=heads, d_model=d, vocab_size=vocab_size,
        max_positions=max_positions,
    )
    head_params = [scan_lag_profile(t, sharpness) for t in scales]

    tensors = {}
    rng = named_stream(seed, "probe-ckpt", "token_embedding")
    wte = np.zeros((vocab_size, d))
    raw = rng.standard_normal((vocab_size, nc))
    raw -= raw.mean(axis=1, keepdims=True)
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    wte[:, :nc] = raw * wte_sd * np.sqrt(nc)
    tensors["token_embedding"] = wte.astype(np.float32)

    wpe = np.zeros((max_positions, d))
    pos = np.arange(max_positions)
    triplets = []  # (first_dim, omega) per frequency triplet
    for h, (T1, _, T2, _) in enumerate(head_params):
        triplets.append((nc + 6 * h, 2 * np.pi / T1))
        triplets.append((nc + 6 * h + 3, 2 * np.pi / T2))
    for base, omega in triplets:
        for k in range(3):
            wpe[:, base + k] = np.cos(omega * pos + 2 * np.pi * k / 3.0) * pos_scale
    tensors["position_embedding"] = wpe.astype(np.float32)

    # ln1 of (wte + wpe) rows is an exact rescale by 1/sigma_row
    sigma_row = np.sqrt((nc * wte_sd**2 + len(triplets) * 1.5 * pos_scale**2) / d)
    p_ln = pos_scale / sigma_row

    for name, shape in tensor_schema(cfg).items():
        if name in tensors:
            continue
        rng = named_stream(seed, "probe-ckpt", name)
        if name.endswith("gamma"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(("beta", "bias")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif "attn_qkv_weight" in name:
            layer2 = name.startswith("layers.1.")
            W = np.zeros(shape)
            for h in range(heads):
                T1, phi1, T2, phi2 = head_params[0] if layer2 else head_params[h]
                bb = sharpness_l2 if layer2 else sharpness
                # logits divide by sqrt(dh); the balanced-triplet product
                # contributes 3/2 cos(omega*lag - phi)
                amp = np.sqrt(np.sqrt(dh) * bb / 1.5) / p_ln
                for fi, phi in ((0, phi1), (3, phi2)):
                    base = nc + 6 * h + fi
                    c, s = np.cos(phi), np.sin(phi)
                    for k in range(3):
                        # queries are rotated by phi inside the triplet plane
                        # (sin recovered from the balanced phases), keys are not:
                        # sum_k cos(w i + d_k - phi) cos(w j + d_k) = 1.5 cos(w lag - phi)
                        qcol = h * dh + fi + k
                        W[base + k, qcol] += amp * c
                        W[base + (k + 2) % 3, qcol] += amp * s / np.sqrt(3)
                        W[base + (k + 1) % 3, qcol] += -amp * s / np.sqrt(3)
                        W[base + k, d + qcol] = amp
            rv = named_stream(seed, "probe-ckpt", name, "values")
            W[:nc, 2 * d :] = rv.standard_normal((nc, d)) * v_sd
            tensors[name] = W.astype(np.float32)
        elif "attn_out_weight" in name:
            W = np.zeros(shape)
            W[:, :nc] = rng.standard_normal((d, nc)) * o_sd / np.sqrt(2)
            tensors[name] = W.astype(np.float32)
        elif "mlp_in_weight" in name:
            W = np.zeros(shape)
            W[:nc, :] = rng.standard_normal((nc, shape[1])) * mlp_sd
            tensors[name] = W.astype(np.float32)
        elif "mlp_out_weight" in name:
            W = np.zeros(shape)
            W[:, :nc] = rng.standard_normal((shape[0], nc)) * mlp_sd
            tensors[name] = W.astype(np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * 0.2).astype(np.float32)
    return Checkpoint(config=cfg, tensors=tensors)


def make_fixture_words(
    seed: int,
    n_words: int,
    words_per_sentence=(5, 11),
    word_gap: float = 0.12,
    start_time: float = 0.5,
):
    """A seeded word stream with speech-like timing.

    Returns (words, onsets, offsets, sentence_ids); sentence-final words
    carry a trailing period so the tokenizer's sentence heuristic agrees
    with the explicit ids.
    """
    rng = named_stream(seed, "fixture-text")
    words, onsets, offsets, sids = [], [], [], []
    t = start_time
    sid = 0
    remaining = n_words
    while remaining > 0:
        length = int(rng.integers(words_per_sentence[0], words_per_sentence[1]))
        length = min(length, remaining)
        for i in range(length):
            w = LEXICON[int(rng.integers(0, len(LEXICON)))]
            if i == length - 1:
                w = w + "."
            duration = 0.18 + 0.035 * len(w) + float(rng.uniform(0.0, 0.08))
            words.append(w)
            onsets.append(round(t, 3))
            offsets.append(round(t + duration, 3))
            sids.append(str(sid))
            t = t + duration + word_gap + float(rng.uniform(0.0, 0.05))
        t += 0.25  # inter-sentence pause
        sid += 1
        remaining -= length
    return words, onsets, offsets, sids
