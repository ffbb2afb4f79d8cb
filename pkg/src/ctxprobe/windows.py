"""Per-word (input sequence, attention mask) construction and embedding runs.

For every word in a text and a context size n, we assemble an input
sequence out of complete sentences, anchor the window at the word's last
token, and allow exactly that token plus its n-1 predecessors. One forward
pass per word yields the word's fixed-context embedding at a chosen layer.
"""

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import containers
from .errors import ArgumentError, CtxprobeError, DataError
from .model import AttentionMask, Checkpoint, extract_layer, forward
from .tokenizer import TokenizedText

DEFAULT_SCHEDULE = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20, 24, 28, 32, 36, 40, 45)

POOLINGS = ("last", "mean")
WINDOW_SCOPES = ("document", "sentence")


def context_schedule(override=None):
    """The list of context sizes to sweep; default is 21 sizes from 1 to 45.

    A custom override is used verbatim after checking it is strictly
    increasing and >= 1; lengths other than 21 only warn.
    """
    if override is None:
        return list(DEFAULT_SCHEDULE)
    sizes = [int(v) for v in override]
    if not sizes:
        raise ArgumentError("context schedule must be non-empty")
    if sizes[0] < 1:
        raise ArgumentError("context sizes must be >= 1")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ArgumentError(f"context schedule must be strictly increasing, got {sizes}")
    if len(sizes) != 21:
        warnings.warn(
            f"custom context schedule has {len(sizes)} values (default sweep uses 21)",
            stacklevel=2,
        )
    return sizes


@dataclass
class WindowedInput:
    """One forward-pass work item for a (target word, context size) pair."""

    token_ids: np.ndarray
    positions: np.ndarray
    mask: AttentionMask
    target_token_index: int
    target_word_index: int
    context_size: int


@dataclass
class EmbeddingSet:
    """One embedding row per word of the source text, in order."""

    context_size: int
    layer: int
    matrix: np.ndarray
    metadata: dict = field(default_factory=dict)


def _sentence_token_bounds(text: TokenizedText):
    """Per-sentence inclusive token ranges derived from word and sentence spans."""
    bounds = []
    for first_w, last_w in text.sentence_spans:
        bounds.append((text.word_spans[first_w][0], text.word_spans[last_w][1]))
    return bounds


def _sentence_of_word(text: TokenizedText, w: int) -> int:
    for si, (a, b) in enumerate(text.sentence_spans):
        if a <= w <= b:
            return si
    raise ArgumentError(f"word {w} not covered by any sentence span")


def _assemble(text: TokenizedText, target_word: int, target_token: int, n: int, scope: str):
    """Pick the sentence range, slice tokens, and build the key mask.

    The sequence is the target's sentence plus as many immediately preceding
    complete sentences as needed for n-1 tokens to precede the target
    (fewer when the document start truncates the window).
    """
    if n < 1:
        raise ArgumentError(f"context size must be >= 1, got {n}")
    if not 0 <= target_word < text.n_words:
        raise ArgumentError(f"target word {target_word} out of range [0, {text.n_words})")
    bounds = _sentence_token_bounds(text)
    si = _sentence_of_word(text, target_word)
    start_si = si
    if scope == "document":
        while start_si > 0 and target_token - bounds[start_si][0] < n - 1:
            start_si -= 1
    elif scope != "sentence":
        raise ArgumentError(f"window scope must be one of {WINDOW_SCOPES}, got {scope!r}")
    base = bounds[start_si][0]
    end = bounds[si][1]  # full target sentence, later tokens are masked off
    ids = np.asarray(text.token_ids[base : end + 1], dtype=np.int64)
    t = target_token - base
    allowed = np.zeros(len(ids), dtype=np.int8)
    allowed[max(0, t - (n - 1)) : t + 1] = 1
    return ids, t, AttentionMask(allowed=allowed)


def build_windowed_input(
    text: TokenizedText, target_word: int, n: int, scope: str = "document"
) -> WindowedInput:
    """The (sequence, mask, positions, target) tuple for one word at size n.

    The window anchors at the last token of the word (under causal masking
    the only token that has seen the whole word).
    """
    if not 0 <= target_word < text.n_words:
        raise ArgumentError(f"target word {target_word} out of range [0, {text.n_words})")
    target_token = text.word_spans[target_word][1]
    ids, t, mask = _assemble(text, target_word, target_token, n, scope)
    return WindowedInput(
        token_ids=ids,
        positions=np.arange(len(ids), dtype=np.int64),
        mask=mask,
        target_token_index=t,
        target_word_index=target_word,
        context_size=n,
    )


def _windowed_for_token(
    text: TokenizedText, target_word: int, target_token: int, n: int, scope: str
) -> WindowedInput:
    """As build_windowed_input but anchored at an explicit token (mean pooling)."""
    ids, t, mask = _assemble(text, target_word, target_token, n, scope)
    return WindowedInput(
        token_ids=ids,
        positions=np.arange(len(ids), dtype=np.int64),
        mask=mask,
        target_token_index=t,
        target_word_index=target_word,
        context_size=n,
    )


def _prepend_bos(win: WindowedInput, bos_id: int) -> WindowedInput:
    ids = np.concatenate(([bos_id], win.token_ids))
    allowed = np.concatenate(([1], win.mask.allowed)).astype(np.int8)
    return WindowedInput(
        token_ids=ids,
        positions=np.arange(len(ids), dtype=np.int64),
        mask=AttentionMask(allowed=allowed),
        target_token_index=win.target_token_index + 1,
        target_word_index=win.target_word_index,
        context_size=win.context_size,
    )


def _embed_one(ckpt: Checkpoint, win: WindowedInput, layer: int) -> np.ndarray:
    h = forward(ckpt, win.token_ids, win.positions, win.mask)
    return extract_layer(h, layer, win.target_token_index)


def generate_embeddings(
    ckpt: Checkpoint,
    text: TokenizedText,
    n: int,
    layer: int,
    pooling: str = "last",
    scope: str = "document",
    bos_id=None,
) -> EmbeddingSet:
    """One embedding row per word at context size n.

    pooling="last" runs one forward pass per word and takes the last-token
    row; pooling="mean" gives every token of the word its own window and
    averages the extracted rows.
    """
    if not 0 <= layer <= ckpt.config.n_layers:
        raise ArgumentError(f"layer {layer} out of range [0, {ckpt.config.n_layers}]")
    if pooling not in POOLINGS:
        raise ArgumentError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    rows = np.empty((text.n_words, ckpt.config.d_model), dtype=np.float32)
    for w in range(text.n_words):
        try:
            if pooling == "last":
                win = build_windowed_input(text, w, n, scope)
                if bos_id is not None:
                    win = _prepend_bos(win, bos_id)
                rows[w] = _embed_one(ckpt, win, layer)
            else:
                a, b = text.word_spans[w]
                token_rows = []
                for tok in range(a, b + 1):
                    win = _windowed_for_token(text, w, tok, n, scope)
                    if bos_id is not None:
                        win = _prepend_bos(win, bos_id)
                    token_rows.append(_embed_one(ckpt, win, layer))
                rows[w] = np.mean(token_rows, axis=0, dtype=np.float64).astype(np.float32)
        except CtxprobeError as e:
            raise type(e)(f"word {w}: {e}") from e
    meta = {
        "pooling": pooling,
        "window_scope": scope,
        "bos_id": -1 if bos_id is None else int(bos_id),
    }
    return EmbeddingSet(context_size=n, layer=layer, matrix=rows, metadata=meta)


def checkpoint_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def save_embeddings(path, emb: EmbeddingSet, extra_metadata=None) -> None:
    config = {
        "context_size": emb.context_size,
        "layer": emb.layer,
        "n_words": int(emb.matrix.shape[0]),
        "d_model": int(emb.matrix.shape[1]),
    }
    config.update(emb.metadata)
    if extra_metadata:
        config.update(extra_metadata)
    containers.write_container(
        path, containers.MAGIC_EMBEDDINGS, {"embeddings": emb.matrix}, config
    )


def load_embeddings(path) -> EmbeddingSet:
    tensors, config = containers.read_container(path, containers.MAGIC_EMBEDDINGS)
    mat = containers.require_tensor(
        tensors, "embeddings", (config["n_words"], config["d_model"]), path=path
    )
    if not np.all(np.isfinite(mat)):
        raise DataError(f"{path}: embeddings contain non-finite values")
    meta = {
        k: v
        for k, v in config.items()
        if k not in ("context_size", "layer", "n_words", "d_model")
    }
    return EmbeddingSet(
        context_size=int(config["context_size"]),
        layer=int(config["layer"]),
        matrix=mat,
        metadata=meta,
    )
