"""
Probability-weighted word saliency (PWWS) greedy synonym substitution.

For an input with words ``w_1..w_n`` and original prediction ``y``:

* saliency ``S_i = P(y|x) - P(y|x with w_i -> [UNK])``
* best swap ``w*_i`` maximises ``dP_i = P(y|x) - P(y|x with w_i -> w')`` over
  the lexicon candidates of ``w_i`` (first candidate wins ties)
* priority ``H_i = softmax(S)_i * dP*_i``

Positions are visited in descending ``H`` (lower position first on ties) and
``w*_i`` is applied cumulatively until the prediction changes or the budget
runs out. Best swaps are chosen once, on the original input. Named-entity
swaps from the original method are not implemented.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import SPECIAL_TOKENS, UNK, Example, LabeledDataset, SynonymLexicon, Vocab, encode, tokenize
from .errors import DataError, UsageError
from .model import Model

UNK_TOKEN = SPECIAL_TOKENS[UNK]


class Victim:
    """Classifier wrapper that counts queries (one query = one text classified)."""

    def __init__(self, model: Model, vocab: Vocab, max_seq_len: int | None = None, batch_size: int = 64):
        self.model = model
        self.vocab = vocab
        self.max_seq_len = max_seq_len or model.config.max_seq_len
        self.batch_size = batch_size
        self.queries = 0

    def probs(self, word_lists: Sequence[Sequence[str]], pair: str | None = None) -> np.ndarray:
        self.queries += len(word_lists)
        rows = [encode(list(w), self.vocab, self.max_seq_len, pair=pair) for w in word_lists]
        ids = np.array([r["token_ids"] for r in rows], dtype=np.int64)
        mask = np.array([r["attention_mask"] for r in rows], dtype=np.int64)
        out = []
        for i in range(0, len(rows), self.batch_size):
            logits = self.model.logits(ids[i:i + self.batch_size], mask[i:i + self.batch_size])
            with T.no_grad():
                out.append(T.softmax(T.Tensor(logits), axis=-1).data)
        return np.concatenate(out, axis=0)

    def predict(self, text: str, pair: str | None = None) -> int:
        return int(np.argmax(self.probs([tokenize(text)], pair)[0]))


@dataclass
class AttackTrace:
    saliency: list[float]
    phi: list[float]
    best: dict[int, tuple[str, float]]
    priority: dict[int, float]
    order: list[int]


@dataclass
class AttackRecord:
    example_id: str
    original_text: str
    adversarial_text: str
    substitutions: list[tuple[int, str, str]]
    original_pred: int
    adversarial_pred: int
    success: bool
    model_queries: int
    label: int | None = None
    text_pair: str | None = None
    trace: AttackTrace | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        d["substitutions"] = [list(s) for s in self.substitutions]
        if self.trace is not None:
            d["order"] = list(self.trace.order)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AttackRecord":
        d = dict(d)
        d.pop("order", None)
        d["substitutions"] = [tuple(s) for s in d["substitutions"]]
        return cls(**d)


def _check_position(words: Sequence[str], position: int) -> None:
    if not 0 <= position < len(words):
        raise UsageError(f"position {position} out of range for a {len(words)}-word input")


def word_saliency(victim: Victim, example: Example, position: int) -> float:
    """Drop in P(original prediction) when the word at ``position`` becomes [UNK]."""
    words = tokenize(example.text)
    _check_position(words, position)
    p = victim.probs([words, _replace(words, position, UNK_TOKEN)], example.text_pair)
    y = int(np.argmax(p[0]))
    return float(p[0, y] - p[1, y])


def best_substitute(victim: Victim, example: Example, position: int, lexicon: SynonymLexicon):
    """``(substitute, dP)`` maximising the probability drop, or ``None`` if the word has no candidates."""
    words = tokenize(example.text)
    _check_position(words, position)
    cands = lexicon.candidates(words[position])
    if not cands:
        return None
    p = victim.probs([words] + [_replace(words, position, c) for c in cands], example.text_pair)
    y = int(np.argmax(p[0]))
    drops = p[0, y] - p[1:, y]
    k = int(np.argmax(drops))
    return cands[k], float(drops[k])


def _replace(words: Sequence[str], i: int, w: str) -> list[str]:
    out = list(words)
    out[i] = w
    return out


def pwws_attack(victim: Victim, example: Example, lexicon: SynonymLexicon,
                max_substitution_frac: float = 1.0) -> AttackRecord:
    """Greedy PWWS attack on the first text segment of ``example``.

    The budget is ``floor(max_substitution_frac * attackable positions)``. The
    attack always targets the model's original prediction, whatever the gold
    label.
    """
    start_queries = victim.queries
    words = tokenize(example.text)
    pair = example.text_pair
    p0 = victim.probs([words], pair)[0]
    y = int(np.argmax(p0))
    base = p0[y]

    saliency = []
    if words:
        masked = victim.probs([_replace(words, i, UNK_TOKEN) for i in range(len(words))], pair)
        saliency = (base - masked[:, y]).tolist()

    attackable = [i for i, w in enumerate(words) if lexicon.candidates(w)]
    best: dict[int, tuple[str, float]] = {}
    if attackable:
        variants, owners = [], []
        for i in attackable:
            for c in lexicon.candidates(words[i]):
                variants.append(_replace(words, i, c))
                owners.append((i, c))
        probs = victim.probs(variants, pair)[:, y]
        for i in attackable:
            rows = [j for j, (pos, _) in enumerate(owners) if pos == i]
            drops = base - probs[rows]
            k = int(np.argmax(drops))
            best[i] = (owners[rows[k]][1], float(drops[k]))

    if saliency:
        with T.no_grad():
            phi = T.softmax(T.Tensor(np.array(saliency)), axis=0).data.tolist()
    else:
        phi = []
    priority = {i: phi[i] * best[i][1] for i in attackable}
    order = sorted(attackable, key=lambda i: (-priority[i], i))
    budget = math.floor(max_substitution_frac * len(attackable) + 1e-12)

    current = list(words)
    subs: list[tuple[int, str, str]] = []
    pred = y
    for i in order[:budget]:
        current[i] = best[i][0]
        subs.append((i, words[i], best[i][0]))
        pred = int(np.argmax(victim.probs([current], pair)[0]))
        if pred != y:
            break

    return AttackRecord(
        example_id=example.example_id,
        original_text=example.text,
        adversarial_text=" ".join(current),
        substitutions=subs,
        original_pred=y,
        adversarial_pred=pred,
        success=pred != y,
        model_queries=victim.queries - start_queries,
        label=example.label if isinstance(example.label, (int, np.integer)) else None,
        text_pair=pair,
        trace=AttackTrace(saliency, phi, best, priority, order),
    )


@dataclass
class AttackSummary:
    rate: float
    records: list[AttackRecord]
    attempted: int
    skipped_misclassified: int

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.records)


def attack_success_rate(victim: Victim, dataset: LabeledDataset | Sequence[Example], lexicon: SynonymLexicon,
                        max_substitution_frac: float = 1.0, max_examples: int | None = None) -> AttackSummary:
    """Attack every originally-correct example; rate = successes / attempted."""
    examples = list(dataset.examples if isinstance(dataset, LabeledDataset) else dataset)
    if not examples:
        raise DataError("cannot attack an empty dataset")
    if max_examples is not None:
        examples = examples[:max_examples]
    records, skipped = [], 0
    for ex in examples:
        if victim.predict(ex.text, ex.text_pair) != ex.label:
            skipped += 1
            continue
        records.append(pwws_attack(victim, ex, lexicon, max_substitution_frac))
    if not records:
        raise DataError("no example was classified correctly, so none could be attacked")
    return AttackSummary(sum(r.success for r in records) / len(records), records, len(records), skipped)


def write_records(records: Sequence[AttackRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    return path


def read_records(path) -> list[AttackRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [AttackRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def recount_rate(records: Sequence[AttackRecord]) -> float:
    if not records:
        raise DataError("no attack records")
    return sum(r.success for r in records) / len(records)
