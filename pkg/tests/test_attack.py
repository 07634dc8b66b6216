"""PWWS attack, query accounting and attack-success-rate evaluation."""

import math

import numpy as np
import pytest

from adapterlab.attack import (
    AttackRecord,
    Victim,
    attack_success_rate,
    best_substitute,
    pwws_attack,
    read_records,
    recount_rate,
    word_saliency,
    write_records,
)
from adapterlab.data import (
    Example,
    LabeledDataset,
    SynonymLexicon,
    encode_dataset,
    generate_synthetic,
    synthetic_lexicon,
    synthetic_vocab,
    tokenize,
)
from adapterlab.errors import DataError, UsageError
from adapterlab.model import ModelConfig, build_model
from adapterlab.training import OptimizerConfig, Schedule, TrainPhase, run_phase

from oracles import SPEC, instance, pwws_oracle, random_victim


@pytest.fixture(scope="module")
def trained():
    """Small model trained on keyword_presence (full fine-tuning)."""
    task = generate_synthetic(SPEC)
    vocab = synthetic_vocab(SPEC)
    cfg = ModelConfig(vocab_size=len(vocab), max_seq_len=12, d_model=16, n_layers=1, n_heads=2, d_ff=32,
                      dropout_rate=0.0)
    model = build_model(cfg, 0)
    phase = TrainPhase("finetune", "classification", Schedule(15, "epochs", log_every=100),
                       OptimizerConfig(learning_rate=3e-3, batch_size=32), "without_adapter")
    run_phase(model, phase, encode_dataset(task.train, vocab, 12), seed=0)
    return Victim(model, vocab, 12), task


class TestSaliency:
    def test_irrelevant_word_near_zero(self, trained):
        victim, task = trained
        ex = next(e for e in task.dev.examples if e.label == 0)
        assert abs(word_saliency(victim, ex, 0)) < 0.05

    def test_keyword_positive(self, trained):
        victim, task = trained
        keys = set(SPEC.keywords)
        hits = []
        for ex in task.dev.examples:
            words = tokenize(ex.text)
            pos = [i for i, w in enumerate(words) if w in keys]
            if len(pos) == 1 and victim.predict(ex.text) == 1:
                hits.append(word_saliency(victim, ex, pos[0]))
        assert hits and min(hits) > 0

    def test_deterministic(self):
        victim = random_victim()
        ex = Example("e", "w010 w011 w012 w013", 0)
        a = [word_saliency(victim, ex, i) for i in range(4)]
        b = [word_saliency(victim, ex, i) for i in range(4)]
        assert a == b

    def test_position_out_of_range(self):
        with pytest.raises(UsageError):
            word_saliency(random_victim(), Example("e", "w010 w011", 0), 2)


class TestBestSubstitute:
    def test_single_candidate(self):
        lex = SynonymLexicon({"w010": ["w020"]})
        sub, _ = best_substitute(random_victim(), Example("e", "w010 w011", 0), 0, lex)
        assert sub == "w020"

    def test_tie_takes_first(self):
        # both candidates encode to UNK, so they tie exactly
        lex = SynonymLexicon({"w010": ["zzz", "yyy"]})
        sub, _ = best_substitute(random_victim(), Example("e", "w010 w011", 0), 0, lex)
        assert sub == "zzz"

    def test_exhaustive_max(self):
        victim = random_victim(3)
        ex = Example("e", "w010 w011 w012", 0)
        cands = ["w020", "w021", "w022", "w023"]
        sub, drop = best_substitute(victim, ex, 1, SynonymLexicon({"w011": cands}))
        base = victim.probs([tokenize(ex.text)])[0]
        y = int(np.argmax(base))
        drops = [base[y] - victim.probs([["w010", c, "w012"]])[0][y] for c in cands]
        assert drop == max(drops) and sub == cands[drops.index(max(drops))]

    def test_no_candidates(self):
        assert best_substitute(random_victim(), Example("e", "w010", 0), 0, SynonymLexicon()) is None


class TestPwws:
    def test_no_lexicon_entries(self):
        rec = pwws_attack(random_victim(), Example("e", "w010 w011 w012", 0), SynonymLexicon())
        assert not rec.success and rec.substitutions == []

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        victim = random_victim(seed)
        text, lex = instance(rng)
        rec = pwws_attack(victim, Example("e", text, 0), lex)
        ref = pwws_oracle(victim.model, victim.vocab, 12, text, lex)
        t = rec.trace
        assert t.saliency == ref["saliency"]
        assert t.phi == ref["phi"]
        assert t.best == ref["best"]
        assert t.priority == ref["priority"]
        assert t.order == ref["order"]
        assert rec.substitutions == ref["substitutions"]

    def test_three_word_hand_order(self):
        victim = random_victim(5)
        lex = SynonymLexicon({"w010": ["w030"], "w011": ["w031", "w032"], "w012": ["w033"]})
        rec = pwws_attack(victim, Example("e", "w010 w011 w012", 0), lex)
        ref = pwws_oracle(victim.model, victim.vocab, 12, "w010 w011 w012", lex)
        assert rec.trace.order == ref["order"] and len(rec.trace.order) == 3

    def test_phi_sums_to_one(self):
        rec = pwws_attack(random_victim(1), Example("e", "w010 w011 w012 w013 w014", 0),
                          SynonymLexicon({"w010": ["w020"]}))
        assert abs(sum(rec.trace.phi) - 1.0) < 1e-12

    def test_query_accounting(self):
        rng = np.random.default_rng(11)
        for seed in range(8):
            victim = random_victim(seed)
            text, lex = instance(rng)
            rec = pwws_attack(victim, Example("e", text, 0), lex)
            words = tokenize(text)
            n_cands = sum(len(lex.candidates(w)) for w in words)
            assert rec.model_queries == 1 + len(words) + n_cands + len(rec.substitutions)

    def test_record_invariants(self):
        rng = np.random.default_rng(12)
        for seed in range(8):
            victim = random_victim(seed)
            text, lex = instance(rng)
            rec = pwws_attack(victim, Example("e", text, 0), lex, max_substitution_frac=0.5)
            orig, adv = tokenize(rec.original_text), tokenize(rec.adversarial_text)
            changed = {i for i, (a, b) in enumerate(zip(orig, adv)) if a != b}
            assert changed == {i for i, _, _ in rec.substitutions}
            assert all(s in lex.candidates(w) for _, w, s in rec.substitutions)
            assert len({i for i, _, _ in rec.substitutions}) == len(rec.substitutions)
            assert rec.success == (rec.adversarial_pred != rec.original_pred)
            attackable = sum(1 for w in orig if lex.candidates(w))
            assert len(rec.substitutions) <= math.floor(0.5 * attackable)

    def test_misclassified_still_attacks_original_prediction(self, trained):
        victim, task = trained
        ex = task.dev.examples[0]
        flipped = Example(ex.example_id, ex.text, 1 - victim.predict(ex.text))
        rec = pwws_attack(victim, flipped, synthetic_lexicon(SPEC))
        assert rec.original_pred == victim.predict(ex.text)


class TestSuccessRate:
    def test_robust_model_zero(self):
        victim = random_victim(0)
        texts = [" ".join(SPEC.fillers[i:i + 4]) for i in range(0, 40, 4)]
        preds = [victim.predict(t) for t in texts]
        ds = LabeledDataset([Example(str(i), t, p) for i, (t, p) in enumerate(zip(texts, preds))],
                            "single_sentence", 2)
        # every substitute encodes to UNK-free identical ids: map each word to itself via a case variant
        lex = SynonymLexicon({w: [w.upper()] for t in texts for w in t.split()})
        # upper-case variants are lowercased by the lexicon, so they collapse to self and are dropped
        summary = attack_success_rate(victim, ds, lex)
        assert summary.rate == 0.0 and summary.attempted == len(texts)

    def test_always_flips(self, trained):
        victim, task = trained
        pos = [e for e in task.dev.examples if e.label == 1 and victim.predict(e.text) == 1]
        lex = SynonymLexicon({k: ["w035"] for k in SPEC.keywords})
        summary = attack_success_rate(victim, [e for e in pos if sum(w in SPEC.keywords for w in e.text.split()) == 1][:10],
                                      lex)
        assert summary.rate == 1.0

    def test_recount_from_file(self, trained, tmp_path):
        victim, task = trained
        summary = attack_success_rate(victim, task.dev, synthetic_lexicon(SPEC), max_examples=30)
        path = write_records(summary.records, tmp_path / "rec.jsonl")
        back = read_records(path)
        assert recount_rate(back) == summary.rate
        assert [r.to_json() for r in back] == [AttackRecord.from_json(r.to_json()).to_json() for r in summary.records]

    def test_adversarial_text_reproduces_prediction(self, trained):
        victim, task = trained
        summary = attack_success_rate(victim, task.dev, synthetic_lexicon(SPEC), max_examples=30)
        for r in summary.records:
            assert victim.predict(r.adversarial_text) == r.adversarial_pred

    def test_only_correct_examples(self, trained):
        victim, task = trained
        summary = attack_success_rate(victim, task.dev, synthetic_lexicon(SPEC), max_examples=30)
        correct = sum(victim.predict(e.text) == e.label for e in task.dev.examples[:30])
        assert summary.attempted == correct and summary.skipped_misclassified == 30 - correct

    def test_empty_and_none_attempted(self):
        victim = random_victim()
        with pytest.raises(DataError):
            attack_success_rate(victim, [], SynonymLexicon())
        ex = Example("e", "w010 w011", 1 - victim.predict("w010 w011"))
        with pytest.raises(DataError):
            attack_success_rate(victim, [ex], SynonymLexicon())
