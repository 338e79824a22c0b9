"""Byte, character and byte-level BPE tokenizers.

All three kinds share one id layout: ids 0..2 are the ``pad``/``bos``/``eos``
specials, ids 3..258 are the 256 single-byte atoms, and anything after that is
kind-specific (multi-byte characters for ``char``, merged tokens for ``bpe``).
Because every byte has an atom, encoding never fails.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("pad", "bos", "eos")
N_SPECIAL = len(SPECIALS)
BYTE_OFFSET = N_SPECIAL
KINDS = ("byte", "char", "bpe")

FILE_MAGIC = "poftlab-tokenizer 1"


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """``id_to_token[i]`` is the byte string of token ``i``; specials map to
    ``None`` and never appear in ``token_to_id``."""

    id_to_token: tuple
    token_to_id: dict = field(compare=False, repr=False)
    pad: int = PAD
    bos: int = BOS
    eos: int = EOS

    @classmethod
    def build(cls, extra: Sequence[bytes] = ()) -> "Vocabulary":
        tokens: list = [None] * N_SPECIAL + [bytes([b]) for b in range(256)] + list(extra)
        mapping: dict[bytes, int] = {}
        for i, tok in enumerate(tokens):
            if tok is None:
                continue
            if tok in mapping:
                raise TokenizerError(f"duplicate vocabulary entry {tok!r}")
            mapping[tok] = i
        return cls(tuple(tokens), mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)


def byte_atom(b: int) -> int:
    return BYTE_OFFSET + b


class Tokenizer:
    """Immutable tokenizer. Construct with :func:`byte_tokenizer`,
    :func:`char_tokenizer` or :func:`train_bpe`."""

    def __init__(self, kind: str, vocab: Vocabulary | None = None, merges: Sequence[tuple[int, int]] = (), seed: int = 0):
        if kind not in KINDS:
            raise TokenizerError(f"unknown tokenizer kind {kind!r}")
        if merges and kind != "bpe":
            raise TokenizerError("only bpe tokenizers carry merges")
        self.kind = kind
        self.seed = seed
        self.merges = tuple((int(a), int(b)) for a, b in merges)
        # merge (left, right) -> (rank, result id)
        self._ranks: dict[tuple[int, int], tuple[int, int]] = {}
        if kind == "bpe":
            vocab = _replay_merges(self.merges, self._ranks)
        self.vocab = vocab if vocab is not None else Vocabulary.build()
        self._chars = {}
        if kind == "char":
            for i, tok in enumerate(self.vocab.id_to_token):
                if tok is not None and len(tok) > 1:
                    self._chars[tok.decode("utf-8")] = i
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.vocab.pad

    @property
    def bos_id(self) -> int:
        return self.vocab.bos

    @property
    def eos_id(self) -> int:
        return self.vocab.eos

    def __repr__(self) -> str:
        return f"Tokenizer(kind={self.kind!r}, vocab_size={self.vocab_size})"

    def encode(self, s: str) -> list[int]:
        cached = self._cache.get(s)
        if cached is None:
            cached = tuple(self._encode(s))
            if len(self._cache) < 200_000:
                self._cache[s] = cached
        return list(cached)

    def _encode(self, s: str) -> list[int]:
        if self.kind == "char":
            ids: list[int] = []
            for ch in s:
                i = self._chars.get(ch)
                if i is not None:
                    ids.append(i)
                else:
                    ids.extend(byte_atom(b) for b in ch.encode("utf-8"))
            return ids
        ids = [byte_atom(b) for b in s.encode("utf-8")]
        if self.kind == "bpe":
            ids = _apply_merges(ids, self._ranks)
        return ids

    def decode(self, ids: Iterable[int], errors: str = "strict") -> str:
        out = bytearray()
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size:
                raise TokenizerError(f"token id {i} out of range")
            tok = self.vocab.id_to_token[i]
            if tok is None:
                raise TokenizerError(f"cannot decode special token id {i}")
            out += tok
        return out.decode("utf-8", errors=errors)

    def token_count(self, s: str) -> int:
        return len(self.encode(s))

    # serialization

    def dumps(self) -> str:
        lines = [FILE_MAGIC, f"kind {self.kind}", f"seed {self.seed}"]
        for name, i in zip(SPECIALS, (self.pad_id, self.bos_id, self.eos_id)):
            lines.append(f"special {name} {i}")
        for i, tok in enumerate(self.vocab.id_to_token):
            if tok is not None and i >= BYTE_OFFSET + 256:
                lines.append(f"token {i} {tok.hex()}")
        for left, right in self.merges:
            lines.append(f"merge {left} {right}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="ascii")
        return path

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("ascii")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.dumps() == other.dumps()

    def __hash__(self) -> int:
        return hash(self.dumps())


def _apply_merges(ids: list[int], ranks: dict) -> list[int]:
    while len(ids) >= 2:
        best = None
        for pair in zip(ids, ids[1:]):
            hit = ranks.get(pair)
            if hit is not None and (best is None or hit[0] < best[0]):
                best = (hit[0], hit[1], pair)
        if best is None:
            break
        _, new_id, pair = best
        ids = _merge(ids, pair, new_id)
    return ids


def _merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    n = len(ids)
    while i < n:
        if i + 1 < n and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def byte_tokenizer() -> Tokenizer:
    return Tokenizer("byte", Vocabulary.build())


def char_tokenizer(corpus: Iterable[str] = ()) -> Tokenizer:
    """Single-byte characters map to byte atoms; every multi-byte character
    seen in ``corpus`` gets its own id. Unseen characters fall back to bytes."""
    extra = sorted({ch for s in corpus for ch in s if len(ch.encode("utf-8")) > 1})
    return Tokenizer("char", Vocabulary.build([ch.encode("utf-8") for ch in extra]))


def train_bpe(corpus: Sequence[str], num_merges: int, seed: int = 0) -> Tokenizer:
    """Greedy byte-level BPE. Each round merges the most frequent adjacent
    pair; equal counts go to the lexicographically smallest (left, right)
    byte-string pair. ``seed`` is recorded but the procedure has no randomness."""
    if num_merges < 0:
        raise TokenizerError("num_merges must be non-negative")
    corpus = list(corpus)
    if not corpus:
        raise TokenizerError("cannot train BPE on an empty corpus")

    words = Counter(corpus)
    seqs = {s: [byte_atom(b) for b in s.encode("utf-8")] for s in words}
    tokens: list = [None] * N_SPECIAL + [bytes([b]) for b in range(256)]
    index = {tok: i for i, tok in enumerate(tokens) if tok is not None}
    merges: list[tuple[int, int]] = []
    for _ in range(num_merges):
        counts: Counter = Counter()
        for s, seq in seqs.items():
            w = words[s]
            for pair in zip(seq, seq[1:]):
                counts[pair] += w
        if not counts:
            break
        pair = min(counts, key=lambda p: (-counts[p], tokens[p[0]], tokens[p[1]]))
        joined = tokens[pair[0]] + tokens[pair[1]]
        new_id = index.get(joined)
        if new_id is None:
            new_id = len(tokens)
            tokens.append(joined)
            index[joined] = new_id
        merges.append(pair)
        for s in seqs:
            seqs[s] = _merge(seqs[s], pair, new_id)
    return Tokenizer("bpe", merges=merges, seed=seed)


def _replay_merges(merges: Sequence[tuple[int, int]], ranks: dict) -> Vocabulary:
    """Rebuild the BPE vocabulary from its merge list. A merge whose byte
    string already exists reuses that id, so ids and strings stay a bijection."""
    tokens: list = [None] * N_SPECIAL + [bytes([b]) for b in range(256)]
    index = {tok: i for i, tok in enumerate(tokens) if tok is not None}
    for rank, (left, right) in enumerate(merges):
        if not (BYTE_OFFSET <= left < len(tokens) and BYTE_OFFSET <= right < len(tokens)):
            raise TokenizerError(f"merge {rank} references unknown token ids")
        joined = tokens[left] + tokens[right]
        new_id = index.get(joined)
        if new_id is None:
            new_id = len(tokens)
            tokens.append(joined)
            index[joined] = new_id
        ranks.setdefault((left, right), (rank, new_id))
    return Vocabulary(tuple(tokens), index)


def loads(text: str) -> Tokenizer:
    lines = text.splitlines()
    if not lines or lines[0] != FILE_MAGIC:
        raise TokenizerError("not a poftlab tokenizer file")
    kind, seed = None, 0
    extra: dict[int, bytes] = {}
    merges: list[tuple[int, int]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "kind":
            kind = parts[1]
        elif tag == "seed":
            seed = int(parts[1])
        elif tag == "special":
            expected = SPECIALS.index(parts[1])
            if int(parts[2]) != expected:
                raise TokenizerError(f"line {lineno}: unsupported special id layout")
        elif tag == "token":
            extra[int(parts[1])] = bytes.fromhex(parts[2]) if len(parts) > 2 else b""
        elif tag == "merge":
            merges.append((int(parts[1]), int(parts[2])))
        else:
            raise TokenizerError(f"line {lineno}: unknown record {tag!r}")
    if kind is None:
        raise TokenizerError("tokenizer file has no kind")
    start = BYTE_OFFSET + 256
    if sorted(extra) != list(range(start, start + len(extra))):
        raise TokenizerError("token ids are not contiguous")
    if kind == "bpe":
        tok = Tokenizer("bpe", merges=merges, seed=seed)
        listed = tuple(extra[i] for i in sorted(extra))
        if tok.vocab.id_to_token[start:] != listed:
            raise TokenizerError("token table disagrees with merge list")
        return tok
    return Tokenizer(kind, Vocabulary.build([extra[i] for i in sorted(extra)]), seed=seed)


def load(path) -> Tokenizer:
    return loads(Path(path).read_text(encoding="ascii"))


def encode(t: Tokenizer, s: str) -> list[int]:
    return t.encode(s)


def decode(t: Tokenizer, ids) -> str:
    return t.decode(ids)


def token_count(t: Tokenizer, s: str) -> int:
    return t.token_count(s)


def make_tokenizer(kind: str, corpus: Sequence[str] = (), num_merges: int = 0, seed: int = 0) -> Tokenizer:
    if kind == "byte":
        return byte_tokenizer()
    if kind == "char":
        return char_tokenizer(corpus)
    if kind == "bpe":
        return train_bpe(corpus, num_merges, seed)
    raise TokenizerError(f"unknown tokenizer kind {kind!r}")
