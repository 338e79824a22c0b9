import json
import math

import numpy as np
import pytest

from conftest import random_model
from poftlab import scores as S
from poftlab.data import Corpus, Example, generate_synthetic_corpus
from poftlab.model import ModelConfig, init_model
from poftlab.scores import ScoreCache, ScoreCacheError, ScoreEntry
from poftlab.tokenizers import char_tokenizer, train_bpe

CORPUS = generate_synthetic_corpus("copy,sort", 12, seed=4)


def zero_ref(name="zero", tokenizer=None):
    tok = tokenizer or char_tokenizer()
    return init_model(ModelConfig(tok.vocab_size, 8, 1, 2, 48), 0, tok, name=name).freeze()


def test_zero_reference_scores_minus_log_vocab():
    model = zero_ref()
    cache = S.score_dataset([model], CORPUS)
    assert len(cache) == len(CORPUS)
    for ex in CORPUS:
        e = cache.get("zero", ex.id)
        assert e.r == pytest.approx(-math.log(model.config.vocab_size), rel=1e-15)
        assert e.token_count == len(model.tokenizer.encode(ex.response)) + 1
        assert e.r == e.logp / e.token_count


def test_rescoring_gives_byte_identical_cache(tmp_path):
    models = [random_model(seed=1, max_seq=48).freeze(), zero_ref()]
    models[0].name = "rand"
    S.score_dataset(models, CORPUS, batch_size=5, path=tmp_path / "a.jsonl")
    first = (tmp_path / "a.jsonl").read_bytes()
    again = S.score_dataset(models, CORPUS, batch_size=3, path=tmp_path / "a.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == first
    assert len(again) == 2 * len(CORPUS)


def test_scoring_is_batch_size_independent():
    model = random_model(seed=1, max_seq=48).freeze()
    a = S.score_dataset([model], CORPUS, batch_size=1)
    b = S.score_dataset([model], CORPUS, batch_size=64)
    for key, e in a.entries.items():
        assert b.entries[key].logp == pytest.approx(e.logp, abs=1e-12)


def test_resume_scores_only_missing_examples(tmp_path):
    model = zero_ref()
    path = tmp_path / "c.jsonl"
    S.score_dataset([model], Corpus(CORPUS.examples[:5]), path=path)
    cache = S.score_dataset([model], CORPUS, path=path)
    assert len(cache) == len(CORPUS)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + len(CORPUS)
    assert [json.loads(line)["example_id"] for line in lines[1:]] == CORPUS.ids()


def test_cache_round_trip_and_idempotence(tmp_path):
    model = random_model(seed=2, max_seq=48).freeze()
    cache = S.score_dataset([model], CORPUS)
    path = cache.save(tmp_path / "s.jsonl")
    loaded = ScoreCache.load(path)
    assert loaded.entries == cache.entries
    assert loaded.metadata == cache.metadata
    rescored = S.score_dataset([model], CORPUS, cache=loaded)
    assert rescored.entries == cache.entries


def test_header_metadata(tmp_path):
    model = zero_ref()
    S.score_dataset([model], CORPUS, path=tmp_path / "s.jsonl")
    header = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])["header"]
    assert header["eos_included"] is True
    assert header["models"]["zero"]["checkpoint_sha256"] == model.digest()
    assert header["models"]["zero"]["tokenizer_sha256"] == model.tokenizer.digest()
    assert "created" in header


def test_hash_mismatch_is_an_error(tmp_path):
    path = tmp_path / "s.jsonl"
    S.score_dataset([zero_ref()], CORPUS, path=path)
    changed = random_model(seed=3, max_seq=48).freeze()
    changed.name = "zero"
    with pytest.raises(ScoreCacheError, match="hash"):
        S.score_dataset([changed], CORPUS, path=path)


def test_unfrozen_reference_rejected():
    with pytest.raises(ScoreCacheError):
        S.score_dataset([random_model(seed=1)], CORPUS)


def test_oversize_and_empty_examples_become_error_entries():
    long_ex = Example("copy: " + "a" * 60, "a" * 60)
    empty = Example("copy: x", "")
    corpus = Corpus([CORPUS[0], long_ex, empty])
    cache = S.score_dataset([zero_ref()], corpus)
    assert cache.get("zero", long_ex.id).error == "oversize"
    assert cache.get("zero", empty.id).error == "empty_response"
    assert cache.get("zero", long_ex.id).r is None
    with pytest.raises(ScoreCacheError):
        S.aggregate_scores(cache, ["zero"], "avg", corpus.ids())
    aggs = S.aggregate_scores(cache, ["zero"], "avg", corpus.ids(), skip_errors=True)
    assert list(aggs) == [CORPUS[0].id]


def test_staleness_detection():
    cache = S.score_dataset([zero_ref()], CORPUS)
    edited = Corpus([CORPUS[0].with_response(CORPUS[0].response + "x"), *CORPUS.examples[1:]])
    stale = S.stale_entries(cache, edited)
    assert [e.example_id for e in stale] == [CORPUS[0].id]
    assert S.missing_examples(cache, edited, ["zero"]) == [edited[0].id]


def _manual_cache(values):
    cache = ScoreCache()
    for m, row in values.items():
        for ex_id, r in row.items():
            cache.add(ScoreEntry(m, ex_id, r * 2, 2))
    return cache


def test_aggregate_examples():
    cache = _manual_cache({"a": {"x": -1.0}, "b": {"x": -2.0}, "c": {"x": -3.0}})
    ids = ["a", "b", "c"]
    assert S.aggregate_scores(cache, ids, "avg")["x"].value == -2.0
    assert S.aggregate_scores(cache, ids, "min")["x"].value == -3.0
    assert S.aggregate_scores(cache, ids, "max")["x"].value == -1.0
    for strategy in ("avg", "min", "max"):
        assert S.aggregate_scores(cache, ["b"], strategy)["x"].value == -2.0


def test_aggregate_missing_entry():
    cache = _manual_cache({"a": {"x": -1.0}, "b": {}})
    with pytest.raises(ScoreCacheError, match="missing"):
        S.aggregate_scores(cache, ["a", "b"], "avg", ["x"])


def test_avg_lies_between_min_and_max():
    rng = np.random.default_rng(0)
    values = {m: {f"e{i}": float(rng.uniform(-9, 0)) for i in range(50)} for m in "abc"}
    cache = _manual_cache(values)
    avg, lo, hi = (S.aggregate_scores(cache, list("abc"), s) for s in ("avg", "min", "max"))
    for k in avg:
        assert lo[k].value <= avg[k].value <= hi[k].value


def test_single_reference_and_collaborative_rankings_can_disagree():
    # three examples; reference a prefers x, reference b strongly prefers z
    values = {"a": {"x": -1.0, "y": -2.0, "z": -3.0}, "b": {"x": -7.0, "y": -5.0, "z": -0.5}}
    cache = _manual_cache(values)

    def order(ids):
        aggs = S.aggregate_scores(cache, ids, "avg")
        return sorted(aggs, key=lambda k: -aggs[k].value)

    assert order(["a"]) == ["x", "y", "z"]
    assert order(["a", "b"]) == ["z", "y", "x"]
    assert order(["a"]) != order(["a", "b"])


def test_external_scores_are_injectable(tmp_path):
    path = tmp_path / "s.jsonl"
    cache = S.score_dataset([zero_ref()], CORPUS, path=path)
    S.inject_external(cache, "ifd", {ex.id: -0.1 * i for i, ex in enumerate(CORPUS)})
    loaded = ScoreCache.load(path)
    aggs = S.aggregate_scores(loaded, ["ext:ifd"], "avg", CORPUS.ids())
    assert aggs[CORPUS[3].id].value == pytest.approx(-0.3)
    assert S.stale_entries(loaded, Corpus()) and all(
        not e.model_id.startswith("ext:") for e in S.stale_entries(loaded, Corpus()))


def test_load_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("")
    with pytest.raises(ScoreCacheError):
        ScoreCache.load(bad)
    bad.write_text('{"nope": 1}\n')
    with pytest.raises(ScoreCacheError):
        ScoreCache.load(bad)
    good = ScoreCache()
    bad.write_text(good.header_line() + '\n{"model_id": "m", "example_id": "x", "logp": -2.0, '
                   '"token_count": 2, "r": -3.0, "error": null}\n')
    with pytest.raises(ScoreCacheError, match="r !="):
        ScoreCache.load(bad)


def test_different_tokenizers_give_different_counts():
    corpus_text = [t for ex in CORPUS for t in (ex.instruction, ex.response)]
    char = zero_ref("char")
    bpe = zero_ref("bpe", train_bpe(corpus_text, 40))
    cache = S.score_dataset([char, bpe], CORPUS)
    counts = [(cache.get("char", i).token_count, cache.get("bpe", i).token_count) for i in CORPUS.ids()]
    assert any(a != b for a, b in counts)


# ---------------------------------------------------------------- histograms


def test_histogram_of_equal_scores_has_one_occupied_bin():
    edges, dens = S.score_histogram([-2.0] * 10, 5)
    assert np.count_nonzero(dens) == 1


@pytest.mark.parametrize("bins", [1, 7, 30])
def test_histogram_normalises(bins):
    vals = np.random.default_rng(bins).normal(-3, 1, 500)
    edges, dens = S.score_histogram(vals, bins)
    assert abs(float((dens * np.diff(edges)).sum()) - 1.0) < 1e-9


def test_histogram_rejects_empty():
    with pytest.raises(ScoreCacheError):
        S.score_histogram([], 3)


def test_histogram_csv(tmp_path):
    hist = S.score_histogram([-1.0, -2.0, -2.5], 2)
    path = S.write_histogram_csv(tmp_path / "h.csv", {"clean": hist})
    rows = path.read_text().splitlines()
    assert rows[0] == "series,bin_left,bin_right,density"
    assert len(rows) == 3


def test_tail_mass_grows_with_low_scoring_noise():
    rng = np.random.default_rng(0)
    clean = rng.normal(-1.0, 0.3, 400)
    noise = rng.normal(-4.0, 0.5, 80)
    p5 = float(np.percentile(clean, 5))
    assert S.tail_mass(np.concatenate([clean, noise]), p5) > S.tail_mass(clean, p5)
