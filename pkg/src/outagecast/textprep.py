"""Repair-log text normalization, vocabulary and index encoding."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

UNK = "<unk>"
END = "<end>"
SPECIALS = (UNK, "<tp>", "<cl>", "<feeder>", "<pole>", "<num>", "<addr>", END)

# punctuation dropped before pattern substitution; '-' and '/' survive
PUNCT_CHARS = ".,!?;:\"'()@#"
_PUNCT = frozenset(PUNCT_CHARS)


class VocabError(ValueError):
    pass


def load_patterns(path=None):
    """Parse a pattern table into ``[(token, compiled_regex), ...]``."""
    if path is None:
        text = resources.files(__package__).joinpath("patterns.tsv").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        token, sep, pattern = line.partition("\t")
        if not sep or not token.startswith("<") or not token.endswith(">"):
            raise ValueError(f"pattern file line {lineno}: expected '<token>\\t<regex>'")
        rules.append((token, re.compile(pattern)))
    return rules


_DEFAULT_RULES = None


def _default_rules():
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = load_patterns()
    return _DEFAULT_RULES


def _lower_char(c):
    low = c.lower()
    return low if len(low) == 1 else c


def normalize_spans(raw, rules=None):
    """Normalize text and keep each token's character span in ``raw``.

    Returns ``[(token, start, end), ...]``.  Substituted tokens span the
    whole text they replaced.
    """
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    rules = _default_rules() if rules is None else rules
    # chars paired with their originating span
    chars = []
    spans = []
    for i, c in enumerate(raw):
        if c in _PUNCT:
            continue
        chars.append(_lower_char(c))
        spans.append((i, i + 1))
    text = "".join(chars)
    for token, rx in rules:
        if not rx.search(text):
            continue
        new_chars, new_spans = [], []
        pos = 0
        for m in rx.finditer(text):
            a, b = m.span()
            if a == b:
                continue
            new_chars.extend(text[pos:a])
            new_spans.extend(spans[pos:a])
            whole = (spans[a][0], spans[b - 1][1])
            # pad with spaces so the token never fuses with neighbours
            piece = f" {token} "
            new_chars.extend(piece)
            new_spans.extend([whole] * len(piece))
            pos = b
        new_chars.extend(text[pos:])
        new_spans.extend(spans[pos:])
        text = "".join(new_chars)
        spans = new_spans
    out = []
    for m in re.finditer(r"\S+", text):
        a, b = m.span()
        out.append((m.group(), spans[a][0], spans[b - 1][1]))
    return out


def normalize(raw, rules=None):
    """Lower-case, strip punctuation, replace id patterns, split on whitespace."""
    return [t for t, _, _ in normalize_spans(raw, rules)]


def log_tokens(raw, rules=None):
    """Tokens for one repair log, terminated by the end marker."""
    return normalize(raw, rules) + [END]


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    counts: tuple
    cutoff: int
    index: dict = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens, counts, cutoff):
        tokens = tuple(tokens)
        index = {t: i for i, t in enumerate(tokens)}
        if len(index) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        missing = [s for s in SPECIALS if s not in index]
        if missing:
            raise VocabError(f"vocabulary lacks special tokens {missing}")
        return cls(tokens, tuple(int(c) for c in counts), int(cutoff), index)

    def __len__(self):
        return len(self.tokens)

    @property
    def unk(self):
        return self.index[UNK]

    def lookup(self, token):
        return self.index.get(token, self.index[UNK])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# outagecast-vocab v1 cutoff={self.cutoff}\n")
            for t, c in zip(self.tokens, self.counts):
                fh.write(f"{t}\t{c}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            m = re.match(r"# outagecast-vocab v1 cutoff=(\d+)", header)
            if not m:
                raise VocabError(f"{path}: missing vocabulary header")
            tokens, counts = [], []
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, cnt = line.rpartition("\t")
                tokens.append(tok)
                counts.append(int(cnt))
        return cls.from_tokens(tokens, counts, int(m.group(1)))


def build_vocab(corpus, cutoff):
    """Keep tokens whose training count exceeds ``cutoff``; specials always."""
    if cutoff < 0:
        raise VocabError("cutoff must be >= 0")
    counts = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(doc)
    if n_docs == 0 or not counts:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c > cutoff and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    tokens = list(SPECIALS) + kept
    return Vocab.from_tokens(tokens, [counts.get(t, 0) for t in tokens], cutoff)


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray
    tokens: tuple
    offsets: tuple = ()

    def __len__(self):
        return len(self.ids)


def encode(tokens, vocab, offsets=None):
    """Map tokens to vocabulary indices; an empty list becomes one ``<unk>``."""
    tokens = list(tokens)
    if not tokens:
        return TokenSeq(np.array([vocab.unk], dtype=np.int64), (UNK,), ((0, 0),))
    ids = np.array([vocab.lookup(t) for t in tokens], dtype=np.int64)
    if offsets is None:
        offsets, pos = [], 0
        for t in tokens:
            offsets.append((pos, pos + len(t)))
            pos += len(t) + 1
    return TokenSeq(ids, tuple(tokens), tuple(offsets))


def decode(seq, vocab):
    return [vocab.tokens[i] for i in seq.ids]


def encode_log(raw, vocab, rules=None):
    """Normalize, append the end marker and encode, keeping raw-text offsets."""
    spans = normalize_spans(raw, rules)
    end = len(raw)
    tokens = [t for t, _, _ in spans] + [END]
    offsets = [(a, b) for _, a, b in spans] + [(end, end)]
    return encode(tokens, vocab, offsets)
