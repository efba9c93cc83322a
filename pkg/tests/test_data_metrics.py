import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bleu_by_hand
from palm_lab.core_math import SeededRng
from palm_lab.data_metrics import (CooccurrenceTable, HallucinationConfig, ParallelCorpus, ToyTaskSpec,
                                   alignment_score, corpus_bleu, decode_lexicon, format_corpus,
                                   generate_dataset, hallucination_ratio, length_stats, lexicon_mapping,
                                   load_corpus, make_target, metrics_report, moving_average, parse_corpus,
                                   save_corpus, sequence_accuracy, stepwise_precision, stretch)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_copy_and_reverse_targets():
    copy = ToyTaskSpec("copy", 10)
    assert make_target([5, 3, 7], copy) == [5, 3, 7]
    assert make_target([1, 2, 3], ToyTaskSpec("reverse", 10)) == [3, 2, 1]
    assert make_target([5, 3, 7], ToyTaskSpec("copy", 10, target_len_multiplier=2.0)) == [5, 5, 3, 3, 7, 7]


def test_stretch_lengths():
    assert len(stretch([4] * 7, 1.5)) == math.floor(7 * 1.5)
    assert stretch([4, 5], 1.0) == [4, 5]


@pytest.mark.parametrize("mult", [1.0, 1.5, 2.0, 2.7])
def test_lexicon_round_trip(mult):
    spec = ToyTaskSpec("lexicon_translation", 20, (1, 9), mult, pairs=50, seed=4)
    mapping = lexicon_mapping(spec)
    assert sorted(mapping.tolist()) == list(range(20))
    assert mapping[:3].tolist() == [0, 1, 2]
    corpus = generate_dataset(spec)
    for s, r in corpus.pairs:
        assert decode_lexicon(r, spec) == s


def test_generation_is_deterministic_and_in_range():
    spec = ToyTaskSpec("reverse", 12, (2, 5), pairs=30, seed=9)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert a.pairs == b.pairs
    assert all(2 <= len(s) <= 5 for s in a.sources)
    assert all(3 <= tok < 12 for s in a.sources for tok in s)
    assert generate_dataset(ToyTaskSpec("reverse", 12, (2, 5), pairs=30, seed=10)).pairs != a.pairs


def test_spec_validation():
    for bad in [dict(kind="sort", vocab_size=10), dict(kind="copy", vocab_size=3),
                dict(kind="copy", vocab_size=10, source_len_range=(0, 3)),
                dict(kind="copy", vocab_size=10, source_len_range=(4, 3)),
                dict(kind="copy", vocab_size=10, target_len_multiplier=0.5)]:
        with pytest.raises(ValueError):
            ToyTaskSpec(**bad)
    with pytest.raises(ValueError):
        ToyTaskSpec.from_dict({"kind": "copy", "vocab_size": 10, "extra": 1})
    assert ToyTaskSpec("lexicon", 10).kind == "lexicon_translation"
    spec = ToyTaskSpec("copy", 10, (2, 3))
    assert ToyTaskSpec.from_dict(spec.to_dict()) == spec


def test_corpus_file_round_trip(tmp_path):
    corpus = generate_dataset(ToyTaskSpec("copy", 16, pairs=4, seed=1))
    path = tmp_path / "c.tsv"
    save_corpus(path, corpus)
    assert len(path.read_text().splitlines()) == 4
    assert load_corpus(path, 16).pairs == corpus.pairs
    assert format_corpus(parse_corpus(format_corpus(corpus))) == format_corpus(corpus)


def test_corpus_validation():
    with pytest.raises(ValueError):
        ParallelCorpus([([], [3])], 5)
    with pytest.raises(ValueError):
        ParallelCorpus([([3], [9])], 5)
    with pytest.raises(ValueError, match="line 1"):
        parse_corpus("3 4 5\n")
    with pytest.raises(ValueError, match="decimal"):
        parse_corpus("3 x\t4\n")
    assert len(parse_corpus("")) == 0


def test_stepwise_precision():
    refs = [[3, 4, 5], [6, 7]]
    assert all(stepwise_precision(refs, refs, i) == 1.0 for i in (1, 2))
    assert stepwise_precision([[8, 8], [9]], refs, 1) == 0.0
    assert stepwise_precision([[3, 9, 5], [9, 6]], refs, 2) == 0.5
    with pytest.raises(ValueError, match="no sentence reaches"):
        stepwise_precision(refs, refs, 4)
    with pytest.raises(ValueError):
        stepwise_precision(refs, refs, 0)


def test_alignment_score():
    corpus = ParallelCorpus([([3, 4], [5]), ([3], [5, 6])], 8)
    cfg = HallucinationConfig(alpha=2.0, beta=1.0)
    assert alignment_score(3, 5, corpus, cfg) == pytest.approx(0.5)
    assert alignment_score(4, 5, corpus, cfg) == pytest.approx(sig(-1.0))
    table = CooccurrenceTable.build([[3]] * 60, [[5]] * 60)
    assert alignment_score(3, 5, table, cfg) > 1 - 1e-12
    with pytest.raises(ValueError):
        HallucinationConfig(beta=0.0)


def test_hallucination_two_sentence_oracle():
    sources = [[3, 4], [3, 5]]
    generated = [[6, 4], [6, 7, 8]]
    refs = [[4, 6], [9, 9, 9]]
    cfg = HallucinationConfig(alpha=1.0, beta=1.0)
    # step 1: 6 is in r1; for sentence 2, count(3, 6) = 2 and count(5, 6) = 1
    assert abs(hallucination_ratio(sources, generated, refs, cfg, 1) - (1 - (1 + sig(1.0)) / 2)) <= 1e-12
    # step 2: 4 is in r1; 7 co-occurs once with 3 and with 5
    assert abs(hallucination_ratio(sources, generated, refs, cfg, 2) - 0.25) <= 1e-12
    assert abs(hallucination_ratio(sources, generated, refs, cfg, 3) - 0.5) <= 1e-12
    with pytest.raises(ValueError):
        hallucination_ratio(sources, generated, refs, cfg, 4)


def test_hallucination_zero_when_outputs_are_references():
    corpus = generate_dataset(ToyTaskSpec("lexicon", 20, (2, 6), 2.0, pairs=20, seed=2))
    for i in range(1, 5):
        assert hallucination_ratio(corpus.sources, corpus.references, corpus.references, i=i) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_stay_in_unit_interval_and_h_is_monotone(seed):
    rng = SeededRng(seed)
    gen = lambda: [[int(x) + 3 for x in rng.integers(6, 1 + int(rng.integers(4)))] for _ in range(5)]
    sources, generated, refs = gen(), gen(), gen()
    for i in range(1, 5):
        if not any(len(g) >= i for g in generated):
            break
        a = stepwise_precision(generated, refs, i)
        h1 = hallucination_ratio(sources, generated, refs, HallucinationConfig(alpha=2.0), i)
        # lowering alpha raises every alignment score
        h2 = hallucination_ratio(sources, generated, refs, HallucinationConfig(alpha=0.5), i)
        assert 0.0 <= a <= 1.0 and 0.0 <= h1 <= 1.0
        assert h2 <= h1 + 1e-15


def test_bleu_hand_computed():
    gen = [[1, 2, 3, 4], [7, 8]]
    refs = [[1, 2, 3, 5], [7, 8, 9]]
    expected = math.exp(1 - 7 / 6) * (2 / 9) ** 0.25
    assert abs(corpus_bleu(gen, refs) - expected) <= 1e-12
    assert abs(corpus_bleu(gen[:1], refs[:1]) - (3 / 4 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25) <= 1e-12


def test_bleu_edges():
    refs = [[3, 4, 5, 6, 7], [8, 9]]
    assert corpus_bleu(refs, refs) == pytest.approx(1.0, abs=1e-15)
    assert corpus_bleu([[10, 11], [12]], refs) == 0.0
    assert corpus_bleu([[], []], refs) == 0.0
    with pytest.raises(ValueError):
        corpus_bleu([], [])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_bleu_matches_oracle_and_ignores_order(seed):
    rng = SeededRng(seed)
    gen = [[int(x) for x in rng.integers(4, 2 + int(rng.integers(6)))] for _ in range(4)]
    refs = [[int(x) for x in rng.integers(4, 2 + int(rng.integers(6)))] for _ in range(4)]
    value = corpus_bleu(gen, refs)
    if value > 0:
        assert value == pytest.approx(bleu_by_hand(gen, refs), rel=1e-12)
    order = rng.permutation(4)
    assert corpus_bleu([gen[k] for k in order], [refs[k] for k in order]) == pytest.approx(value, rel=1e-12)


def test_length_stats():
    out = length_stats({"LM": [[1, 2], [3]], "PALM": [[1, 2, 3], [4]]})
    assert out["avg_len"] == {"LM": 1.5, "PALM": 2.0}
    assert out["delta_L"] == 0.5
    same = length_stats({"LM": [[1]], "PALM": [[2]]})
    assert same["delta_L"] == 0.0
    assert "delta_L" not in length_stats({"ED": [[1]]})
    with pytest.raises(ValueError):
        length_stats({})


def test_sequence_accuracy_and_moving_average():
    assert sequence_accuracy([[1], [2, 3]], [[1], [2]]) == 0.5
    assert moving_average([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) == [1.0, 1.5, 2.0, 2.5, 3.0, 4.0]
    with pytest.raises(ValueError):
        moving_average([1.0], 0)


def test_metrics_report_shape():
    refs = [[3, 4, 5], [6, 7]]
    report = metrics_report("PALM", [[3], [4]], refs, refs)
    assert set(report) == {"model", "bleu", "seq_accuracy", "avg_len", "stepwise"}
    assert [s["i"] for s in report["stepwise"]] == [1, 2, 3]
    assert all(s["A_i"] == 1.0 and s["H_i"] == 0.0 for s in report["stepwise"])
    json.dumps(report)
