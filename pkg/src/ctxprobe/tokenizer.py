"""Byte-level BPE tokenizer compatible with GPT-2 vocabularies.

Tokenization is the standard byte-level BPE: text is pre-split with the
GPT-2 pattern (contractions, letter runs, digit runs, punctuation runs,
whitespace), each piece is mapped through the fixed byte->unicode table and
merged greedily by rank. On top of the raw ids this module tracks the two
alignments the masking stage needs: whitespace-word -> token-run spans and
sentence -> word spans.

Words are whitespace-delimited strings; a sentence ends at a word whose
text ends with '.', '!' or '?' (callers with an explicit sentence column
use `encode_words`, which overrides the heuristic).
"""

from dataclasses import dataclass, field
from functools import lru_cache

import json

import regex

from .errors import ArgumentError, IntegrityError, ParseError

# GPT-2 pre-tokenization pattern (possessive contractions, ` ?letters`,
# ` ?digits`, ` ?punct`, whitespace-not-before-word, whitespace).
_SPLIT_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)

_SENTENCE_FINAL = (".", "!", "?")

# word segmentation must share the regex \s semantics (str.isspace()
# disagrees on control chars like \x1f)
_NONSPACE = regex.compile(r"\S")
_WORD = regex.compile(r"\S+")


@lru_cache(maxsize=1)
def byte_encoder() -> dict:
    """The fixed 256-entry byte -> unicode codepoint map used by GPT-2.

    Printable latin bytes map to themselves; the rest are shifted into
    256+, keeping every byte representable as a distinct non-space char.
    """
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


@lru_cache(maxsize=1)
def byte_decoder() -> dict:
    return {c: b for b, c in byte_encoder().items()}


@dataclass
class Vocabulary:
    """Immutable byte-level BPE vocabulary.

    token_table maps token strings (in byte-encoded unicode space) to dense
    ids in [0, vocab_size); merge_ranks lists byte-pair merges in priority
    order (index = rank).
    """

    token_table: dict
    merge_ranks: list
    id_to_token: dict = field(init=False, repr=False)
    _rank_of: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.id_to_token = {i: t for t, i in self.token_table.items()}
        self._rank_of = {pair: rank for rank, pair in enumerate(self.merge_ranks)}
        self._bpe_cache: dict = {}

    @property
    def vocab_size(self) -> int:
        return len(self.token_table)

    def validate(self) -> None:
        ids = sorted(self.token_table.values())
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in self.token_table.values():
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise IntegrityError(f"duplicate token id {dup}")
        if ids and (ids[0] != 0 or ids[-1] != len(ids) - 1):
            raise IntegrityError(
                f"token ids not dense in [0, {len(ids)}): min={ids[0]}, max={ids[-1]}"
            )
        for rank, (a, b) in enumerate(self.merge_ranks):
            for part in (a, b, a + b):
                if part not in self.token_table:
                    raise IntegrityError(
                        f"merge {rank} ({a!r}, {b!r}): token {part!r} not in table"
                    )

    def bpe(self, piece: str) -> list:
        """Split one pre-token (byte-encoded) into merged BPE token strings."""
        cached = self._bpe_cache.get(piece)
        if cached is not None:
            return cached
        parts = list(piece)
        while len(parts) > 1:
            pairs = {(parts[i], parts[i + 1]) for i in range(len(parts) - 1)}
            ranked = [(self._rank_of[p], p) for p in pairs if p in self._rank_of]
            if not ranked:
                break
            _, (a, b) = min(ranked)
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == a and parts[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        self._bpe_cache[piece] = parts
        return parts


@dataclass
class TokenizedText:
    """Token ids plus the word and sentence alignments.

    word_spans[i] = inclusive (first_token, last_token) of whitespace-word i;
    spans are contiguous, ordered, and cover all tokens whenever the text
    contains at least one word (whitespace-only text has no words to carry
    its tokens). sentence_spans[j] = inclusive (first_word, last_word).
    """

    token_ids: list
    word_spans: list
    sentence_spans: list

    @property
    def n_words(self) -> int:
        return len(self.word_spans)

    def word_tokens(self, w: int) -> list:
        a, b = self.word_spans[w]
        return self.token_ids[a : b + 1]


def load_vocabulary(vocab_file, merges_file) -> Vocabulary:
    """Load a vocab JSON (token string -> id) and a merges text file.

    The merges file holds one space-separated pair per line; a first line
    starting with '#' is treated as a header comment. Raises ParseError with
    the offending line number on malformed lines and IntegrityError when the
    id space or merge closure is inconsistent.
    """
    try:
        with open(vocab_file, encoding="utf-8") as f:
            table = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"{vocab_file}: {e.msg}", line=e.lineno) from e
    if not isinstance(table, dict):
        raise ParseError(f"{vocab_file}: expected a JSON object mapping token -> id")
    for tok, tid in table.items():
        if not isinstance(tid, int):
            raise ParseError(f"{vocab_file}: id for token {tok!r} is not an integer")

    merges = []
    with open(merges_file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if lineno == 1 and line.startswith("#"):
                continue
            if not line.strip():
                continue
            fields = line.split(" ")
            if len(fields) != 2 or not fields[0] or not fields[1]:
                raise ParseError(f"expected 'left right' pair, got {line!r}", line=lineno)
            merges.append((fields[0], fields[1]))

    vocab = Vocabulary(token_table=table, merge_ranks=merges)
    vocab.validate()
    return vocab


def _split_words(text: str) -> list:
    """Whitespace-delimited word spans as (char_start, char_end) pairs."""
    return [(m.start(), m.end()) for m in _WORD.finditer(text)]


def encode(text: str, vocab: Vocabulary) -> TokenizedText:
    """Tokenize UTF-8 text, aligning tokens to whitespace words and sentences.

    decode(encode(text)) reproduces the input bytes exactly. Whitespace-only
    pre-tokens attach to the following word (trailing whitespace to the last
    word).
    """
    if text == "":
        return TokenizedText(token_ids=[], word_spans=[], sentence_spans=[])

    enc = byte_encoder()
    word_chars = _split_words(text)
    n_words = len(word_chars)

    token_ids = []
    token_word = []  # word index of each token, -1 for pre-word whitespace
    starts = [s for s, _ in word_chars]

    for m in _SPLIT_PATTERN.finditer(text):
        piece = m.group()
        # locate the word owning this pre-token via its first non-space char
        body_m = _NONSPACE.search(piece)
        body = body_m.start() if body_m else None
        if body is None:
            widx = _bisect(starts, m.start())  # whitespace: owner resolved later
        else:
            widx = _owning_word(word_chars, m.start() + body)
        encoded = "".join(enc[b] for b in piece.encode("utf-8"))
        for tok in vocab.bpe(encoded):
            tid = vocab.token_table.get(tok)
            if tid is None:
                raise IntegrityError(f"token {tok!r} produced by BPE is not in the vocabulary")
            token_ids.append(tid)
            token_word.append(widx)

    word_spans = _spans_from_token_words(token_word, n_words)
    words = [text[a:b] for a, b in word_chars]
    sentence_spans = _heuristic_sentences(words)
    return TokenizedText(token_ids=token_ids, word_spans=word_spans, sentence_spans=sentence_spans)


def _bisect(starts, pos):
    """Index of the first word starting at or after pos (== len for none)."""
    lo, hi = 0, len(starts)
    while lo < hi:
        mid = (lo + hi) // 2
        if starts[mid] < pos:
            lo = mid + 1
        else:
            hi = mid
    return lo


def _owning_word(word_chars, pos):
    lo, hi = 0, len(word_chars) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        a, b = word_chars[mid]
        if pos < a:
            hi = mid - 1
        elif pos >= b:
            lo = mid + 1
        else:
            return mid
    raise AssertionError("non-space char outside all word spans")


def _spans_from_token_words(token_word, n_words):
    """Turn per-token word labels into inclusive word spans covering all tokens."""
    if n_words == 0:
        return []
    # whitespace tokens (-1 or beyond-last) attach forward, trailing ones backward
    owner = []
    for k, w in enumerate(token_word):
        if 0 <= w < n_words:
            owner.append(w)
        else:
            owner.append(None)
    nxt = None
    for k in range(len(owner) - 1, -1, -1):
        if owner[k] is None:
            owner[k] = nxt if nxt is not None else n_words - 1
        else:
            nxt = owner[k]
    spans = [None] * n_words
    for k, w in enumerate(owner):
        if spans[w] is None:
            spans[w] = (k, k)
        else:
            spans[w] = (spans[w][0], k)
    if any(s is None for s in spans):
        raise AssertionError("word with no tokens")
    return spans


def _heuristic_sentences(words):
    """Inclusive (first_word, last_word) spans; boundary = word ending in .!?"""
    spans = []
    start = 0
    for i, w in enumerate(words):
        if w.endswith(_SENTENCE_FINAL):
            spans.append((start, i))
            start = i + 1
    if start < len(words):
        spans.append((start, len(words) - 1))
    return spans


def sentences_from_ids(sentence_ids) -> list:
    """Inclusive word spans from an explicit per-word sentence-id column."""
    spans = []
    start = 0
    for i in range(1, len(sentence_ids)):
        if sentence_ids[i] != sentence_ids[i - 1]:
            spans.append((start, i - 1))
            start = i
    if sentence_ids:
        spans.append((start, len(sentence_ids) - 1))
    return spans


def encode_words(words, vocab: Vocabulary, sentence_ids=None) -> TokenizedText:
    """Tokenize an explicit word list (e.g. an annotation file's word column).

    Equivalent to encode(" ".join(words)) with a guaranteed 1:1 word
    alignment; an optional per-word sentence id column overrides the
    terminal-punctuation heuristic.
    """
    for i, w in enumerate(words):
        if not w or regex.search(r"\s", w):
            raise ArgumentError(f"word {i} ({w!r}) is empty or contains whitespace")
    if sentence_ids is not None and len(sentence_ids) != len(words):
        raise ArgumentError("sentence_ids length does not match words")
    text = " ".join(words)
    tt = encode(text, vocab)
    if tt.n_words != len(words):
        raise AssertionError("word alignment mismatch after join")
    if sentence_ids is not None:
        tt.sentence_spans = sentences_from_ids(list(sentence_ids))
    return tt


def decode(ids, vocab: Vocabulary) -> str:
    """Exact byte-level inverse of encode on any encode output.

    Arbitrary id sequences decode with U+FFFD replacement for invalid UTF-8.
    Out-of-range ids raise ArgumentError.
    """
    dec = byte_decoder()
    chunks = []
    for i in ids:
        tok = vocab.id_to_token.get(int(i))
        if tok is None:
            raise ArgumentError(f"token id {i} out of range [0, {vocab.vocab_size})")
        chunks.append(tok)
    byte_vals = bytes(dec[ch] for ch in "".join(chunks))
    return byte_vals.decode("utf-8", errors="replace")
