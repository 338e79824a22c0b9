import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from poftlab import data as D
from poftlab.data import Corpus, DatasetError, Example

SMALL = D.generate_synthetic_corpus("copy,reverse,addition,sort", 40, seed=1)


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------- examples and JSONL


def test_example_id_is_a_content_hash():
    a = Example("copy: abc", "abc")
    assert a.id == Example("copy: abc", "abc", label="noise").id
    assert a.id != Example("copy: abc", "abd").id
    with pytest.raises(DatasetError):
        Example("copy: abc", "abc", id="0" * 20)
    with pytest.raises(DatasetError):
        Example("x", "y", label="dirty")


def test_corpus_rejects_duplicate_ids():
    with pytest.raises(DatasetError):
        Corpus([Example("a", "b"), Example("a", "b", "noise")])


def test_jsonl_round_trip(tmp_path):
    corpus = Corpus([*SMALL.examples[:5], Example("q", "é", "noise", {"ifd": 0.5})], {"seed": 1})
    path = D.save_jsonl(corpus, tmp_path / "c.jsonl")
    again = D.load_jsonl(path)
    assert again == corpus
    assert again.provenance == {"seed": 1}
    assert again[-1].external_scores == {"ifd": 0.5}


def test_missing_response_names_the_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"instruction": "a", "response": "b"}) + "\n" + json.dumps({"instruction": "c"}) + "\n")
    with pytest.raises(DatasetError, match=r"bad.jsonl:2: .*response"):
        D.load_jsonl(path)


@pytest.mark.parametrize("line, message", [
    ("{not json", "malformed"),
    ("[1, 2]", "not an object"),
    ('{"instruction": "a", "response": "b", "id": "deadbeef"}', "does not match"),
])
def test_malformed_lines(tmp_path, line, message):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(DatasetError, match=message):
        D.load_jsonl(path)


def test_rehash_recomputes_stale_ids(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"instruction": "a", "response": "b", "id": "deadbeef"}\n')
    assert D.load_jsonl(path, rehash=True)[0].id == Example("a", "b").id


def test_duplicate_records_rejected(tmp_path):
    path = tmp_path / "dup.jsonl"
    rec = json.dumps({"instruction": "a", "response": "b"})
    path.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(DatasetError, match="duplicate"):
        D.load_jsonl(path)


def test_loading_1000_examples_preserves_order(tmp_path):
    corpus = D.generate_synthetic_corpus("copy,addition", 1000, seed=9)
    path = D.save_jsonl(corpus, tmp_path / "big.jsonl")
    assert D.load_jsonl(path).ids() == corpus.ids()


def test_missing_label_loads_as_unknown(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"instruction": "a", "response": "b"}\n')
    assert D.load_jsonl(path)[0].label == "unknown"


# ---------------------------------------------------------------- synthetic tasks


@pytest.mark.parametrize("task", D.TASKS)
def test_synthetic_answers_are_exact(task):
    corpus = D.generate_synthetic_corpus(task, 50, seed=3)
    for ex in corpus:
        name, _, arg = ex.instruction.partition(": ")
        if task == "copy":
            assert ex.response == arg
        elif task == "reverse":
            assert ex.response == arg[::-1]
        elif task == "addition":
            a, b = map(int, arg.split())
            assert int(ex.response) == a + b
        else:
            assert ex.response.split() == sorted(arg.split())
        assert ex.label == "clean"


def test_copy_and_addition_templates():
    ins, resp = D._make_task("copy", np.random.default_rng(0))
    assert resp == ins[len("copy: "):]
    corpus = D.generate_synthetic_corpus("addition", 400, seed=0)
    assert all(str(sum(map(int, ex.instruction[5:].split()))) == ex.response for ex in corpus)


def test_no_duplicate_ids_at_size_10000():
    corpus = D.generate_synthetic_corpus("copy,reverse,addition,sort", 10000, seed=0)
    assert len(set(corpus.ids())) == 10000


def test_generation_is_deterministic_and_respects_exclusions():
    a = D.generate_synthetic_corpus("copy,sort", 30, seed=5)
    assert a == D.generate_synthetic_corpus("copy,sort", 30, seed=5)
    b = D.generate_synthetic_corpus("copy,sort", 30, seed=5, exclude=a.ids()[:10])
    assert not set(a.ids()[:10]) & set(b.ids())


@pytest.mark.parametrize("mix", ["", "poetry", {"copy": 0}])
def test_bad_task_mix(mix):
    with pytest.raises(DatasetError):
        D.generate_synthetic_corpus(mix, 5, seed=0)


def test_task_mix_weights():
    assert D.parse_task_mix("copy=3,sort") == {"copy": 3.0, "sort": 1.0}
    assert D.parse_task_mix(["copy"]) == {"copy": 1.0}


def test_split_is_disjoint_and_complete():
    train, held = D.split_corpus(SMALL, 10, seed=2)
    assert len(held) == 10 and len(train) == 30
    assert sorted(train.ids() + held.ids()) == sorted(SMALL.ids())


# ---------------------------------------------------------------- noise

ZERO = {"ins": 0.0, "del": 0.0, "sub": 0.0}


def test_pure_mismatch_is_a_derangement_of_responses():
    corpus = D.generate_synthetic_corpus("copy", 60, seed=2)
    noise = D.make_noise(corpus, 60, mismatch_fraction=1.0, char_rates=ZERO, seed=0)
    originals = {ex.instruction: ex.response for ex in corpus}
    pool = set(originals.values())
    for ex in noise:
        assert ex.label == "noise"
        assert ex.response in pool
        assert ex.response != originals[ex.instruction]


def test_no_mismatch_no_corruption_is_a_relabel():
    noise = D.make_noise(SMALL, 12, mismatch_fraction=0.0, char_rates=ZERO, seed=4)
    index = SMALL.by_id()
    assert all(ex.label == "noise" for ex in noise)
    assert all(index[ex.id].with_label("noise") == ex for ex in noise)
    with pytest.raises(DatasetError, match="both corpora"):
        D.blend(SMALL, noise, 0)


def test_substitution_rate_matches_binomial_statistics():
    rng = np.random.default_rng(0)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    examples = [Example(f"copy: {i}", "".join(rng.choice(letters, 100))) for i in range(1000)]
    corpus = Corpus(examples)
    noise = D.make_noise(corpus, 1000, mismatch_fraction=0.0, char_rates={"sub": 0.1}, seed=1)
    originals = {ex.instruction: ex.response for ex in corpus}
    dists = np.array([levenshtein(originals[ex.instruction], ex.response) for ex in noise])
    n, p = 100, 0.1
    bound = 3 * math.sqrt(n * p * (1 - p) / len(dists))
    assert abs(dists.mean() - n * p) < bound


def test_mismatched_noise_never_keeps_its_own_response():
    noise = D.make_noise(SMALL, 40, mismatch_fraction=0.5, seed=3)
    originals = {ex.instruction: ex.response for ex in SMALL}
    assert all(ex.response != originals[ex.instruction] for ex in noise)
    assert noise.provenance["n_mismatched"] > 0


def test_noise_is_deterministic_per_seed():
    a = D.make_noise(SMALL, 20, seed=7)
    assert a == D.make_noise(SMALL, 20, seed=7)
    assert a != D.make_noise(SMALL, 20, seed=8)


def test_noise_errors():
    with pytest.raises(DatasetError, match="too small"):
        D.make_noise(Corpus([Example("a", "b")]), 1, mismatch_fraction=1.0)
    with pytest.raises(DatasetError):
        D.make_noise(SMALL, len(SMALL) + 1)
    with pytest.raises(DatasetError):
        D.make_noise(SMALL, 3, char_rates={"sub": 1.5})
    with pytest.raises(DatasetError):
        D.make_noise(SMALL, 3, char_rates={"swap": 0.1})


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet="abc", min_size=1, max_size=30), st.integers(0, 2**31))
def test_corruption_only_uses_the_alphabet(text, seed):
    out = D.corrupt_text(text, {"ins": 0.3, "del": 0.3, "sub": 0.3}, list("xyz"), np.random.default_rng(seed))
    assert out
    assert set(out) <= set("abcxyz")


# ---------------------------------------------------------------- blend


def test_blend_invariants():
    clean, rest = SMALL.subset(SMALL.ids()[:30]), SMALL.subset(SMALL.ids()[30:])
    noise = D.make_noise(rest, 10, seed=0)
    mixed = D.blend(clean, noise, shuffle_seed=3)
    assert len(mixed) == len(clean) + len(noise)
    assert mixed.label_counts()["noise"] == 10
    assert mixed.label_counts()["clean"] == 30
    assert mixed == D.blend(clean, noise, shuffle_seed=3)


def test_blend_with_empty_noise_is_a_shuffle():
    mixed = D.blend(SMALL, Corpus(), shuffle_seed=1)
    assert sorted(mixed.ids()) == sorted(SMALL.ids())
    assert mixed.ids() != SMALL.ids()


# ---------------------------------------------------------------- filtering


def test_filter_keeps_top_scores():
    exs = [Example(f"e{i}", "x") for i in range(5)]
    aggs = {ex.id: -float(i + 1) for i, ex in enumerate(exs)}
    kept = D.filter_by_percentile(Corpus(exs), aggs, 0.4)
    assert [aggs[i] for i in kept.ids()] == [-1.0, -2.0]


def test_filter_keep_one_is_identity_up_to_order():
    aggs = {ex.id: float(len(ex.response)) for ex in SMALL}
    kept = D.filter_by_percentile(SMALL, aggs, 1.0)
    assert sorted(kept.ids()) == sorted(SMALL.ids())


def test_filter_ties_break_by_id():
    exs = [Example(f"e{i}", "x") for i in range(6)]
    kept = D.filter_by_percentile(Corpus(exs), {ex.id: 0.0 for ex in exs}, 0.5)
    assert kept.ids() == sorted(ex.id for ex in exs)[:3]


@pytest.mark.parametrize("frac, n", [(0.6, 3), (0.2, 1), (0.21, 2), (1e-6, 1)])
def test_filter_counts_use_ceiling(frac, n):
    exs = [Example(f"e{i}", "x") for i in range(5)]
    assert len(D.filter_by_percentile(Corpus(exs), {ex.id: 0.0 for ex in exs}, frac)) == n


def test_filter_errors():
    with pytest.raises(DatasetError):
        D.filter_by_percentile(SMALL, {}, 0.5)
    with pytest.raises(DatasetError):
        D.filter_by_percentile(SMALL, {ex.id: 0.0 for ex in SMALL}, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 0), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_filter_is_a_monotone_subset_above_the_quantile(scores, frac):
    exs = [Example(f"e{i}", "r") for i in range(len(scores))]
    aggs = {ex.id: s for ex, s in zip(exs, scores)}
    kept = D.filter_by_percentile(Corpus(exs), aggs, frac)
    vals = [aggs[i] for i in kept.ids()]
    assert set(kept.ids()) <= set(aggs)
    assert vals == sorted(vals, reverse=True)
    assert len(kept) == math.ceil(frac * len(exs) - 1e-9)
    dropped = set(aggs) - set(kept.ids())
    assert all(aggs[d] <= min(vals) for d in dropped)


def test_external_aggregates_and_audit(tmp_path):
    exs = [Example(f"e{i}", "x", external_scores={"ifd": float(i)}) for i in range(4)]
    corpus = Corpus(exs)
    aggs = D.external_aggregates(corpus, "ifd")
    kept = D.filter_by_percentile(corpus, aggs, 0.5)
    assert [aggs[i] for i in kept.ids()] == [3.0, 2.0]
    rows = D.write_filter_audit(corpus, aggs, kept, tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "id,label,aggregate,status"
    assert sum(r.endswith("kept") for r in rows) == 2
    with pytest.raises(DatasetError):
        D.external_aggregates(corpus, "deita")


# ---------------------------------------------------------------- regeneration


def test_greedy_regeneration_is_deterministic():
    teacher = random_model(seed=2, max_seq=40).freeze()
    corpus = D.generate_synthetic_corpus("copy", 6, seed=0)
    a = D.regenerate_responses(teacher, corpus, temperature=0.0, max_tokens=5, seed=0)
    b = D.regenerate_responses(teacher, corpus, temperature=0.0, max_tokens=5, seed=99)
    assert a == b
    assert all(ex.label == "unknown" for ex in a)
    assert a.provenance["teacher_sha256"] == teacher.digest()


def test_sampled_regeneration_repeats_per_seed():
    teacher = random_model(seed=2, max_seq=40).freeze()
    corpus = D.generate_synthetic_corpus("copy", 6, seed=0)
    a = D.regenerate_responses(teacher, corpus, temperature=1.0, max_tokens=5, seed=3)
    assert a == D.regenerate_responses(teacher, corpus, temperature=1.0, max_tokens=5, seed=3)


def test_regeneration_flags_truncation():
    teacher = random_model(seed=2, max_seq=40).freeze()
    corpus = D.generate_synthetic_corpus("copy", 4, seed=0)
    out = D.regenerate_responses(teacher, corpus, max_tokens=2)
    assert len(out.provenance["truncated_ids"]) + len(out.provenance["empty_source_ids"]) > 0


def test_regeneration_needs_frozen_teacher():
    with pytest.raises(DatasetError):
        D.regenerate_responses(random_model(), SMALL)
