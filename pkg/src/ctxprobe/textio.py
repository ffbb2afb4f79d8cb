"""Readers and writers for the pipeline's text-based inputs.

Word annotation TSV: `word<TAB>onset<TAB>offset[<TAB>sentence_id]`, times in
seconds written with three decimal places. Runs manifest TSV:
`subject_id<TAB>run_id<TAB>bold_path<TAB>words_path`, paths relative to the
manifest file.
"""

from dataclasses import dataclass
from pathlib import Path

from .errors import DataError, ParseError


@dataclass
class WordAnnotations:
    words: list
    onsets: list
    offsets: list
    sentence_ids: list | None = None

    def __len__(self):
        return len(self.words)


@dataclass
class ManifestRow:
    subject_id: str
    run_id: int
    bold_path: Path
    words_path: Path


def read_word_annotations(path) -> WordAnnotations:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty annotation file")
    header = lines[0].split("\t")
    if header[:3] != ["word", "onset", "offset"]:
        raise ParseError(f"{path}: expected header word<TAB>onset<TAB>offset", line=1)
    has_sid = len(header) > 3 and header[3] == "sentence_id"
    words, onsets, offsets, sids = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3 + int(has_sid):
            raise ParseError(f"{path}: expected {3 + int(has_sid)} columns", line=lineno)
        word = fields[0]
        if not word:
            raise ParseError(f"{path}: empty word", line=lineno)
        try:
            onset, offset = float(fields[1]), float(fields[2])
        except ValueError as e:
            raise ParseError(f"{path}: bad time value", line=lineno) from e
        if onset < 0 or offset < onset:
            raise ParseError(f"{path}: need 0 <= onset <= offset", line=lineno)
        words.append(word)
        onsets.append(onset)
        offsets.append(offset)
        if has_sid:
            sids.append(fields[3])
    if not words:
        raise DataError(f"{path}: no annotation rows")
    return WordAnnotations(
        words=words, onsets=onsets, offsets=offsets, sentence_ids=sids if has_sid else None
    )


def write_word_annotations(path, ann: WordAnnotations) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if ann.sentence_ids is not None:
            f.write("word\tonset\toffset\tsentence_id\n")
            for w, a, b, s in zip(ann.words, ann.onsets, ann.offsets, ann.sentence_ids):
                f.write(f"{w}\t{a:.3f}\t{b:.3f}\t{s}\n")
        else:
            f.write("word\tonset\toffset\n")
            for w, a, b in zip(ann.words, ann.onsets, ann.offsets):
                f.write(f"{w}\t{a:.3f}\t{b:.3f}\n")


def read_runs_manifest(path) -> list:
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty manifest")
    if lines[0].split("\t") != ["subject_id", "run_id", "bold_path", "words_path"]:
        raise ParseError(
            f"{path}: expected header subject_id<TAB>run_id<TAB>bold_path<TAB>words_path",
            line=1,
        )
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"{path}: expected 4 columns", line=lineno)
        try:
            run_id = int(fields[1])
        except ValueError as e:
            raise ParseError(f"{path}: run_id must be an integer", line=lineno) from e
        rows.append(
            ManifestRow(
                subject_id=fields[0],
                run_id=run_id,
                bold_path=base / fields[2],
                words_path=base / fields[3],
            )
        )
    if not rows:
        raise DataError(f"{path}: no manifest rows")
    return rows


def write_runs_manifest(path, rows) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("subject_id\trun_id\tbold_path\twords_path\n")
        for r in rows:
            bold = Path(r.bold_path)
            words = Path(r.words_path)
            bold_rel = bold.relative_to(base) if bold.is_absolute() else bold
            words_rel = words.relative_to(base) if words.is_absolute() else words
            f.write(f"{r.subject_id}\t{r.run_id}\t{bold_rel}\t{words_rel}\n")
