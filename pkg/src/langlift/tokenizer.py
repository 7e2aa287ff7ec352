"""Subword tokenizer with UTF-8 byte fallback and vocabulary merging.

A Vocabulary is an ordered inventory of pieces: normal subword surfaces
(word-initial pieces carry the boundary marker U+2581), 256 single-byte
fallback entries, and control entries (bos/eos/unk/pad).  Encoding is
deterministic greedy longest-match over marker-normalized text; any
character with no piece coverage is emitted as its raw UTF-8 bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator

WHITESPACE_MARKER = "▁"  # rendered as ▁; reserved, may not occur in input text

_BYTE_RENDER = {bytes([b]): f"<0x{b:02X}>" for b in range(256)}
_BYTE_PARSE = {v: k for k, v in _BYTE_RENDER.items()}


class VocabError(ValueError):
    """Invalid vocabulary contents."""


class VocabParseError(VocabError):
    """Malformed vocabulary file line."""

    def __init__(self, path: str, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class EncodingError(ValueError):
    """Input text is not encodable as UTF-8."""


class Kind(str, enum.Enum):
    NORMAL = "normal"
    BYTE = "byte"
    CONTROL = "control"


@dataclass(frozen=True)
class VocabEntry:
    surface: bytes
    score: float
    kind: Kind
    id: int

    def render(self) -> str:
        """Display form: byte entries as <0xHH>, others as their text."""
        if self.kind is Kind.BYTE:
            return _BYTE_RENDER[self.surface]
        return self.surface.decode("utf-8")


@dataclass(frozen=True)
class MergeReport:
    base_size: int
    extension_size: int
    duplicates_skipped: int
    added: int
    merged_size: int

    def as_dict(self) -> dict:
        return {
            "base_size": self.base_size,
            "extension_size": self.extension_size,
            "duplicates_skipped": self.duplicates_skipped,
            "added": self.added,
            "merged_size": self.merged_size,
        }


@dataclass(frozen=True)
class FertilityStats:
    n_chars: int
    n_tokens: int
    n_byte_tokens: int
    tokens_per_char: float
    byte_token_fraction: float
    byte_dup_chars: int

    def as_dict(self) -> dict:
        return {
            "n_chars": self.n_chars,
            "n_tokens": self.n_tokens,
            "n_byte_tokens": self.n_byte_tokens,
            "tokens_per_char": self.tokens_per_char,
            "byte_token_fraction": self.byte_token_fraction,
            "byte_dup_chars": self.byte_dup_chars,
        }


class Vocabulary:
    """Immutable ordered piece inventory with dense ids.

    Invariants enforced at construction: ids equal list positions, exactly
    one byte entry per byte value, and no two entries share a surface.
    """

    whitespace_marker = WHITESPACE_MARKER

    def __init__(self, entries: Iterable[VocabEntry]):
        self.entries: list[VocabEntry] = list(entries)
        self._validate()
        # normal-piece index in str space for greedy matching
        self.index: dict[str, int] = {}
        self._byte_ids: dict[int, int] = {}
        self._control_ids: dict[str, int] = {}
        max_len = 1
        for e in self.entries:
            if e.kind is Kind.NORMAL:
                s = e.surface.decode("utf-8")
                self.index[s] = e.id
                max_len = max(max_len, len(s))
            elif e.kind is Kind.BYTE:
                self._byte_ids[e.surface[0]] = e.id
            else:
                self._control_ids[e.surface.decode("utf-8")] = e.id
        self._max_piece_len = max_len

    def _validate(self) -> None:
        seen: set[tuple[bytes, Kind]] = set()
        byte_values: set[int] = set()
        for pos, e in enumerate(self.entries):
            if e.id != pos:
                raise VocabError(f"entry id {e.id} does not match position {pos}")
            if (e.surface, e.kind) in seen:
                raise VocabError(f"duplicate surface {e.render()!r}")
            seen.add((e.surface, e.kind))
            if e.kind is Kind.BYTE:
                if len(e.surface) != 1:
                    raise VocabError(f"byte entry {e.render()!r} must be a single byte")
                byte_values.add(e.surface[0])
            elif e.kind is Kind.NORMAL:
                try:
                    e.surface.decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise VocabError(f"normal surface at id {e.id} is not UTF-8") from exc
        if len(byte_values) != 256:
            raise VocabError(
                f"vocabulary must contain all 256 byte entries, found {len(byte_values)}"
            )

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> VocabEntry:
        return self.entries[idx]

    def byte_id(self, value: int) -> int:
        return self._byte_ids[value]

    def control_id(self, name: str) -> int:
        """Id of a control entry by its surface label, e.g. '</s>'."""
        try:
            return self._control_ids[name]
        except KeyError:
            raise VocabError(f"no control entry {name!r}") from None

    @property
    def eos_id(self) -> int:
        return self.control_id("</s>")

    @property
    def bos_id(self) -> int:
        return self.control_id("<s>")

    def surfaces(self) -> set[tuple[bytes, Kind]]:
        return {(e.surface, e.kind) for e in self.entries}


def load_vocab(path: str) -> Vocabulary:
    """Parse a vocab text file: one `surface<TAB>score<TAB>kind` per line.

    Byte surfaces are written `<0xHH>`; lines starting with `#` are comments.
    """
    entries: list[VocabEntry] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            # comment lines carry no tab; an entry whose surface is '#' does
            if not line or (line.startswith("#") and "\t" not in line):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise VocabParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            surface_text, score_text, kind_text = parts
            try:
                score = float(score_text)
            except ValueError:
                raise VocabParseError(path, lineno, f"bad score {score_text!r}") from None
            try:
                kind = Kind(kind_text)
            except ValueError:
                raise VocabParseError(path, lineno, f"unknown kind {kind_text!r}") from None
            if kind is Kind.BYTE:
                surface = _BYTE_PARSE.get(surface_text)
                if surface is None:
                    raise VocabParseError(path, lineno, f"bad byte surface {surface_text!r}")
            else:
                surface = surface_text.encode("utf-8")
                if not surface:
                    raise VocabParseError(path, lineno, "empty surface")
            entries.append(VocabEntry(surface, score, kind, len(entries)))
    return Vocabulary(entries)


def save_vocab(vocab: Vocabulary, path: str) -> None:
    from .util import atomic_write_text

    lines = [f"{e.render()}\t{e.score:g}\t{e.kind.value}" for e in vocab.entries]
    atomic_write_text(path, "\n".join(lines) + "\n")


def merge_vocab(base: Vocabulary, extension: Vocabulary) -> tuple[Vocabulary, MergeReport]:
    """Append the extension's novel surfaces to the base.

    Base ids are preserved bit-identically; extension entries whose surface
    already exists (all byte entries, repeated controls, shared subwords)
    are skipped.  Novel entries keep extension order and get fresh ids.
    """
    merged = list(base.entries)
    known = base.surfaces()
    skipped = 0
    for e in extension.entries:
        if (e.surface, e.kind) in known:
            skipped += 1
            continue
        known.add((e.surface, e.kind))
        merged.append(VocabEntry(e.surface, e.score, e.kind, len(merged)))
    report = MergeReport(
        base_size=len(base),
        extension_size=len(extension),
        duplicates_skipped=skipped,
        added=len(extension) - skipped,
        merged_size=len(merged),
    )
    return Vocabulary(merged), report


def _normalize(text: str) -> str:
    return WHITESPACE_MARKER + text.replace(" ", WHITESPACE_MARKER)


def _encode(vocab: Vocabulary, text: str, fallback_chars: dict[str, set[int]] | None = None) -> list[int]:
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodingError(str(exc)) from exc
    if not text:
        return []
    norm = _normalize(text)
    index = vocab.index
    out: list[int] = []
    i = 0
    n = len(norm)
    max_len = vocab._max_piece_len
    while i < n:
        length = min(max_len, n - i)
        tid = None
        while length >= 1:
            tid = index.get(norm[i : i + length])
            if tid is not None:
                break
            length -= 1
        if tid is not None:
            out.append(tid)
            i += length
        else:
            ch = norm[i]
            raw = ch.encode("utf-8")
            for b in raw:
                out.append(vocab.byte_id(b))
            if fallback_chars is not None and ch != WHITESPACE_MARKER:
                fallback_chars.setdefault(ch, set()).update(raw)
            i += 1
    # The word-boundary marker injected at text start is elided when the
    # first word begins with a whole in-vocabulary piece; byte-fallback
    # pieces never absorb the boundary, so the marker stays in that case.
    if len(out) >= 2:
        first, second = vocab[out[0]], vocab[out[1]]
        if (
            first.kind is Kind.NORMAL
            and first.surface.decode("utf-8") == WHITESPACE_MARKER
            and second.kind is Kind.NORMAL
            and not second.surface.decode("utf-8").startswith(WHITESPACE_MARKER)
        ):
            out = out[1:]
    return out


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Tokenize text to ids; total on valid UTF-8 (byte fallback covers OOV)."""
    return _encode(vocab, text)


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    """Inverse of encode: reassemble byte runs, map markers back to spaces.

    Invalid reassembled byte runs become U+FFFD so decode stays total on
    arbitrary id sequences (e.g. sampled ones); control pieces render empty.
    """
    size = len(vocab)
    parts: list[str] = []
    byte_run = bytearray()

    def flush() -> None:
        if byte_run:
            parts.append(byte_run.decode("utf-8", errors="replace"))
            byte_run.clear()

    for tid in ids:
        if not 0 <= tid < size:
            raise IndexError(f"token id {tid} out of range for vocabulary of {size}")
        e = vocab[tid]
        if e.kind is Kind.BYTE:
            byte_run.append(e.surface[0])
        elif e.kind is Kind.NORMAL:
            flush()
            parts.append(e.surface.decode("utf-8"))
        else:
            flush()
    flush()
    s = "".join(parts)
    if s.startswith(WHITESPACE_MARKER):
        s = s[len(WHITESPACE_MARKER) :]
    return s.replace(WHITESPACE_MARKER, " ")


def render_tokens(vocab: Vocabulary, ids: Iterable[int]) -> list[str]:
    """Human-readable piece strings for a tokenization (bytes as <0xHH>)."""
    return [vocab[tid].render() for tid in ids]


def fertility_report(vocab: Vocabulary, corpus: str | Iterable[str]) -> FertilityStats:
    """Tokenization-quality stats over a corpus.

    Reports tokens per character, the byte-fallback token fraction, and how
    many distinct characters share at least one byte token with another
    distinct character (the representation-aliasing pathology).
    """
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    n_chars = 0
    n_tokens = 0
    n_byte = 0
    fallback: dict[str, set[int]] = {}
    for text in texts:
        if not text:
            continue
        ids = _encode(vocab, text, fallback_chars=fallback)
        n_chars += len(text)
        n_tokens += len(ids)
        n_byte += sum(1 for tid in ids if vocab[tid].kind is Kind.BYTE)
    if n_chars == 0:
        raise ValueError("empty corpus")
    dup = 0
    chars = list(fallback.items())
    for i, (ch, bs) in enumerate(chars):
        if any(bs & other for j, (_, other) in enumerate(chars) if j != i):
            dup += 1
    return FertilityStats(
        n_chars=n_chars,
        n_tokens=n_tokens,
        n_byte_tokens=n_byte,
        tokens_per_char=n_tokens / n_chars,
        byte_token_fraction=n_byte / n_tokens if n_tokens else 0.0,
        byte_dup_chars=dup,
    )


def iter_corpus_lines(path: str) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            yield line.rstrip("\n")
