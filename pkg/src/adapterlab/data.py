"""
Word-level tokenisation, GLUE-style TSV ingestion and synthetic tasks.

The synthetic generator stands in for GLUE at desk scale. Its labels come
from a rule that :func:`rule_label` recomputes from text alone, so every
generated dataset carries its own ground-truth oracle.
"""

from __future__ import annotations

import csv
import logging
import re
from collections import Counter
from functools import cached_property
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, SchemaError, UsageError

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
N_SPECIAL = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation (punctuation kept as tokens)."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError("vocab must start with the reserved special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index and self.index[word] >= N_SPECIAL

    def id(self, word: str) -> int:
        i = self.index.get(word, UNK)
        return UNK if i < N_SPECIAL else i

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.id(w) for w in words]

    def word(self, i: int) -> str:
        return self.tokens[i]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Keep the ``max_size - 5`` most frequent words; ties break lexicographically."""
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(tokenize(line))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    if max_size < N_SPECIAL:
        raise UsageError(f"max_size must be at least {N_SPECIAL} (the special tokens)")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(SPECIAL_TOKENS) + [w for w, _ in ranked[: max_size - N_SPECIAL]])


def _ids_of(text, vocab: Vocab) -> list[int]:
    words = tokenize(text) if isinstance(text, str) else list(text)
    return vocab.ids(words)


def encode(text, vocab: Vocab, max_seq_len: int, pair=None) -> dict[str, list[int]]:
    """``[CLS] a [SEP] (b [SEP])`` right-padded to ``max_seq_len``.

    ``text``/``pair`` may be raw strings or pre-tokenised word lists. Pairs are
    truncated longest-first, one token at a time.
    """
    if max_seq_len < 3:
        raise UsageError(f"max_seq_len must be >= 3 (got {max_seq_len})")
    a = _ids_of(text, vocab)
    b = _ids_of(pair, vocab) if pair is not None else None
    if b is None:
        a = a[: max_seq_len - 2]
        ids = [CLS] + a + [SEP]
    else:
        while len(a) + len(b) > max_seq_len - 3:
            if len(a) > len(b):
                a.pop()
            else:
                b.pop()
        ids = [CLS] + a + [SEP] + b + [SEP]
    mask = [1] * len(ids) + [0] * (max_seq_len - len(ids))
    ids = ids + [PAD] * (max_seq_len - len(ids))
    return {"token_ids": ids, "attention_mask": mask}


# -- labelled datasets ---------------------------------------------------------------

TASK_KINDS = ("single_sentence", "sentence_pair", "regression")


@dataclass(frozen=True)
class Example:
    example_id: str
    text: str
    label: float | int
    text_pair: str | None = None


@dataclass
class LabeledDataset:
    examples: list[Example]
    task_kind: str = "single_sentence"
    num_labels: int = 2
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}")
        for ex in self.examples:
            if self.task_kind == "regression":
                if not np.isfinite(ex.label):
                    raise DataError(f"example {ex.example_id}: regression label must be finite")
            elif not (isinstance(ex.label, (int, np.integer)) and 0 <= ex.label < self.num_labels):
                raise DataError(f"example {ex.example_id}: label {ex.label!r} outside [0, {self.num_labels})")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> list:
        return [ex.label for ex in self.examples]

    def texts(self) -> list[str]:
        out = []
        for ex in self.examples:
            out.append(ex.text)
            if ex.text_pair is not None:
                out.append(ex.text_pair)
        return out


@dataclass
class EncodedBatchSource:
    """Fixed-length id/mask matrices (and labels, when supervised)."""

    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray | None = None
    example_ids: list[str] | None = None

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def subset(self, idx) -> "EncodedBatchSource":
        return EncodedBatchSource(
            self.token_ids[idx], self.attention_mask[idx],
            None if self.labels is None else self.labels[idx],
            None if self.example_ids is None else [self.example_ids[i] for i in np.asarray(idx)],
        )


def encode_dataset(ds: LabeledDataset, vocab: Vocab, max_seq_len: int) -> EncodedBatchSource:
    rows = [encode(ex.text, vocab, max_seq_len, pair=ex.text_pair) for ex in ds.examples]
    dtype = np.float64 if ds.task_kind == "regression" else np.int64
    return EncodedBatchSource(
        np.array([r["token_ids"] for r in rows], dtype=np.int64).reshape(-1, max_seq_len),
        np.array([r["attention_mask"] for r in rows], dtype=np.int64).reshape(-1, max_seq_len),
        np.array(ds.labels, dtype=dtype),
        [ex.example_id for ex in ds.examples],
    )


def encode_corpus(texts: Sequence[str], vocab: Vocab, max_seq_len: int) -> EncodedBatchSource:
    rows = [encode(t, vocab, max_seq_len) for t in texts]
    return EncodedBatchSource(
        np.array([r["token_ids"] for r in rows], dtype=np.int64).reshape(-1, max_seq_len),
        np.array([r["attention_mask"] for r in rows], dtype=np.int64).reshape(-1, max_seq_len),
    )


@dataclass(frozen=True)
class TsvSchema:
    text_column: str = "sentence"
    label_column: str = "label"
    pair_column: str | None = None
    id_column: str | None = None
    task_kind: str = "single_sentence"
    num_labels: int = 2

    @property
    def columns(self) -> list[str]:
        cols = [self.text_column, self.label_column]
        return cols + [c for c in (self.pair_column, self.id_column) if c]


def load_tsv(path, schema: TsvSchema, strict: bool = True) -> LabeledDataset:
    """Parse a UTF-8, header-first TSV into a dataset.

    Malformed rows raise :class:`DataError` naming every bad line when
    ``strict``; otherwise they are skipped and listed in ``dataset.skipped``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"TSV file not found: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        absent = [c for c in schema.columns if c not in header]
        if absent:
            raise SchemaError(f"{path}: header {header} lacks required columns {absent}")
        col = {c: header.index(c) for c in schema.columns}
        examples, problems = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                problems.append(f"line {lineno}: expected {len(header)} columns, found {len(row)}")
                continue
            raw = row[col[schema.label_column]].strip()
            try:
                if schema.task_kind == "regression":
                    label = float(raw)
                    if not np.isfinite(label):
                        raise ValueError
                else:
                    label = int(raw)
                    if not 0 <= label < schema.num_labels:
                        raise ValueError
            except ValueError:
                problems.append(f"line {lineno}: bad label {raw!r} for {schema.task_kind} schema")
                continue
            ex_id = row[col[schema.id_column]] if schema.id_column else str(len(examples))
            pair = row[col[schema.pair_column]] if schema.pair_column else None
            examples.append(Example(ex_id, row[col[schema.text_column]], label, pair))
    if problems and strict:
        raise DataError(f"{path}: {len(problems)} malformed row(s): " + "; ".join(problems))
    for p in problems:
        log.warning("%s: skipped %s", path, p)
    kind = schema.task_kind
    return LabeledDataset(examples, kind, 1 if kind == "regression" else schema.num_labels, problems)


def write_tsv(ds: LabeledDataset, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        cols = ["id", "sentence"] + (["sentence2"] if ds.task_kind == "sentence_pair" else []) + ["label"]
        fh.write("\t".join(cols) + "\n")
        for ex in ds.examples:
            row = [ex.example_id, ex.text] + ([ex.text_pair or ""] if ds.task_kind == "sentence_pair" else [])
            fh.write("\t".join(row + [str(ex.label)]) + "\n")


# -- synthetic tasks -------------------------------------------------------------------

RULES = ("keyword_presence", "keyword_parity", "pair_overlap")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 200
    seq_len: int = 32
    rule: str = "keyword_presence"
    class_balance: float = 0.5
    noise_rate: float = 0.0
    seed: int = 0
    n_train: int = 2000
    n_dev: int = 500
    n_keywords: int = 4
    min_words: int = 4

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES} (got {self.rule!r})")
        if self.vocab_size < N_SPECIAL + self.n_keywords + 8:
            raise ConfigError("vocab_size too small for the keyword set and filler words")
        if not 0.0 <= self.class_balance <= 1.0 or not 0.0 <= self.noise_rate < 0.5:
            raise ConfigError("class_balance must be in [0,1] and noise_rate in [0,0.5)")
        if self.max_words < self.min_words:
            raise ConfigError(f"seq_len {self.seq_len} leaves no room for {self.min_words} words")

    @cached_property
    def words(self) -> list[str]:
        return [f"w{i:03d}" for i in range(self.vocab_size - N_SPECIAL)]

    @cached_property
    def keywords(self) -> list[str]:
        return self.words[: self.n_keywords]

    @cached_property
    def fillers(self) -> list[str]:
        return self.words[self.n_keywords:]

    @property
    def max_words(self) -> int:
        return (self.seq_len - 3) // 2 if self.rule == "pair_overlap" else self.seq_len - 2


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    train: LabeledDataset
    dev: LabeledDataset
    unlabeled_pretrain_corpus: list[str]
    flipped: set[str] = field(default_factory=set)


def rule_label(spec: SyntheticTaskSpec, text: str, pair: str | None = None) -> int:
    """Recompute the noiseless label from text alone."""
    keys = set(spec.keywords)
    words = text.split()
    if spec.rule == "keyword_presence":
        return int(any(w in keys for w in words))
    if spec.rule == "keyword_parity":
        return sum(w in keys for w in words) % 2
    return int(bool(set(words) & set((pair or "").split())))


def _sentence(rng, spec: SyntheticTaskSpec, label: int, pool: list[str]) -> list[str]:
    n = int(rng.integers(spec.min_words, spec.max_words + 1))
    words = [pool[i] for i in rng.integers(0, len(pool), n)]
    if spec.rule == "keyword_presence" and label:
        for pos in rng.choice(n, size=int(rng.integers(1, min(2, n) + 1)), replace=False):
            words[pos] = spec.keywords[int(rng.integers(len(spec.keywords)))]
    elif spec.rule == "keyword_parity":
        count = int(rng.choice([1, 3] if label else [0, 2]))
        for pos in rng.choice(n, size=min(count, n), replace=False):
            words[pos] = spec.keywords[int(rng.integers(len(spec.keywords)))]
    return words


def _example(rng, spec: SyntheticTaskSpec, label: int) -> tuple[str, str | None]:
    fillers = spec.fillers
    a = _sentence(rng, spec, label, fillers)
    if spec.rule != "pair_overlap":
        return " ".join(a), None
    used = set(a)
    rest = [w for w in fillers if w not in used]
    b = _sentence(rng, spec, 0, rest)
    if label:
        b[int(rng.integers(len(b)))] = a[int(rng.integers(len(a)))]
    return " ".join(a), " ".join(b)


def generate_synthetic(spec: SyntheticTaskSpec) -> SyntheticTask:
    """Seeded train/dev splits whose labels follow ``spec.rule``.

    Exactly ``round(noise_rate * n)`` labels per split are flipped. Splits are
    disjoint at the text level. The pretraining corpus is the train text with
    labels stripped.
    """
    rng = np.random.default_rng([spec.seed, 0x5EED])
    seen: set[tuple] = set()
    splits = {}
    flipped: set[str] = set()
    for split, n in (("train", spec.n_train), ("dev", spec.n_dev)):
        examples = []
        while len(examples) < n:
            label = int(rng.random() < spec.class_balance)
            text, pair = _example(rng, spec, label)
            if (text, pair) in seen:
                continue
            seen.add((text, pair))
            examples.append(Example(f"{split}-{len(examples)}", text, label, pair))
        n_flip = int(round(spec.noise_rate * n))
        for i in sorted(rng.choice(n, size=n_flip, replace=False).tolist()):
            ex = examples[i]
            examples[i] = Example(ex.example_id, ex.text, 1 - ex.label, ex.text_pair)
            flipped.add(ex.example_id)
        kind = "sentence_pair" if spec.rule == "pair_overlap" else "single_sentence"
        splits[split] = LabeledDataset(examples, kind, 2)
    corpus = splits["train"].texts()
    return SyntheticTask(spec, splits["train"], splits["dev"], corpus, flipped)


def synthetic_vocab(spec: SyntheticTaskSpec) -> Vocab:
    """All synthetic words, in index order, so ids do not depend on sampled frequencies."""
    return Vocab(list(SPECIAL_TOKENS) + spec.words)


# -- synonym lexicon ---------------------------------------------------------------------


class SynonymLexicon:
    """Ordered substitute candidates per word; a word never lists itself."""

    def __init__(self, entries: dict[str, Sequence[str]] | None = None):
        self.entries: dict[str, list[str]] = {}
        for word, subs in (entries or {}).items():
            self.add(word, subs)

    def add(self, word: str, subs: Iterable[str]) -> None:
        clean, seen = [], set()
        for s in subs:
            s = s.strip().lower()
            if s and s != word and s not in seen:
                clean.append(s)
                seen.add(s)
        if clean:
            self.entries[word.lower()] = clean

    def candidates(self, word: str) -> list[str]:
        return list(self.entries.get(word, ()))

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def out_of_vocab(self, vocab: Vocab) -> set[str]:
        """Substitutes that would encode to UNK."""
        return {s for subs in self.entries.values() for s in subs if s not in vocab}

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            for w in sorted(self.entries):
                fh.write(f"{w}\t{','.join(self.entries[w])}\n")

    @classmethod
    def load(cls, path) -> "SynonymLexicon":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"lexicon file not found: {path}")
        lex = cls()
        with path.open(encoding="utf-8", newline="") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}: line {lineno}: expected 'word<TAB>syn1,syn2,...'")
                lex.add(parts[0].strip(), parts[1].split(","))
        return lex


def synthetic_lexicon(spec: SyntheticTaskSpec, n_candidates: int = 3, seed: int | None = None) -> SynonymLexicon:
    """Label-preserving substitutes for keyword rules: keywords map to keywords, fillers to fillers."""
    rng = np.random.default_rng([spec.seed if seed is None else seed, 0x1E8])
    lex = SynonymLexicon()
    for pool in (spec.keywords, spec.fillers):
        for w in pool:
            others = [o for o in pool if o != w]
            k = min(n_candidates, len(others))
            lex.add(w, [others[i] for i in rng.choice(len(others), size=k, replace=False)])
    return lex
