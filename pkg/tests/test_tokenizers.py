import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poftlab import tokenizers as tk
from poftlab.tokenizers import TokenizerError, byte_tokenizer, char_tokenizer, train_bpe

ASCII = st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=40)


def test_bpe_aaaa_hand_simulation():
    tok = train_bpe(["aaaa"], num_merges=1)
    a = tk.byte_atom(ord("a"))
    assert tok.merges == ((a, a),)
    assert tok.encode("aaaa") == [tok.vocab.token_to_id[b"aa"]] * 2
    assert tok.token_count("aaaa") == 2


def test_bpe_without_merges_is_byte_level():
    tok = train_bpe(["hello world"], num_merges=0)
    s = "hello there"
    assert tok.encode(s) == byte_tokenizer().encode(s)


def test_bpe_tie_break_is_lexicographic():
    # "ab" and "cd" both occur once; the smaller byte pair wins
    tok = train_bpe(["abcd"], num_merges=1)
    assert tok.vocab.id_to_token[-1] == b"ab"


def test_bpe_rejects_empty_corpus_and_negative_merges():
    with pytest.raises(TokenizerError):
        train_bpe([], 3)
    with pytest.raises(TokenizerError):
        train_bpe(["a"], -1)


def test_bpe_is_deterministic():
    corpus = ["the cat", "the hat", "that thing"] * 3
    assert train_bpe(corpus, 10).dumps() == train_bpe(corpus, 10).dumps()


@pytest.mark.parametrize("kind", ["byte", "char", "bpe"])
def test_token_count_examples(kind):
    tok = tk.make_tokenizer(kind, ["ab", "abc"], num_merges=2)
    assert tok.token_count("") == 0
    assert tok.token_count("ab") == (2 if kind != "bpe" else 1)
    assert tok.token_count("ab") == len(tok.encode("ab"))


def test_byte_tokenizer_counts_bytes():
    assert byte_tokenizer().token_count("ab") == 2
    assert byte_tokenizer().token_count("é") == 2


def test_char_and_bpe_counts_differ_when_merges_apply():
    corpus = ["the theory", "this that", "then there"]
    char = char_tokenizer(corpus)
    bpe = train_bpe(corpus, 5)
    assert bpe.token_count("the") < char.token_count("the")


def test_char_tokenizer_gives_multibyte_chars_one_id():
    tok = char_tokenizer(["naïve café"])
    assert tok.token_count("ïé") == 2
    assert byte_tokenizer().token_count("ïé") == 4
    # an unseen multi-byte character falls back to byte atoms
    assert tok.token_count("ü") == 2


@settings(max_examples=80, deadline=None)
@given(st.text(max_size=30))
def test_byte_and_char_round_trip_any_text(s):
    for tok in (byte_tokenizer(), char_tokenizer(["ünïcode"])):
        assert tok.decode(tok.encode(s)) == s


@settings(max_examples=50, deadline=None)
@given(st.lists(ASCII, min_size=1, max_size=6), st.integers(0, 30))
def test_bpe_round_trips_its_corpus(corpus, merges):
    tok = train_bpe(corpus, merges)
    for s in corpus:
        assert tok.decode(tok.encode(s)) == s


@settings(max_examples=60, deadline=None)
@given(ASCII, ASCII)
def test_concatenation_law_for_byte_and_char(a, b):
    for tok in (byte_tokenizer(), char_tokenizer()):
        assert tok.token_count(a + b) == tok.token_count(a) + tok.token_count(b)


@settings(max_examples=40, deadline=None)
@given(st.lists(ASCII, min_size=1, max_size=5), st.integers(0, 20))
def test_serialization_round_trip(corpus, merges):
    tok = train_bpe(corpus, merges, seed=3)
    again = tk.loads(tok.dumps())
    assert again == tok
    assert again.seed == 3
    for s in corpus:
        assert again.encode(s) == tok.encode(s)


def test_save_load_file(tmp_path):
    tok = char_tokenizer(["ß and ø"])
    path = tok.save(tmp_path / "tok.txt")
    assert tk.load(path) == tok
    assert tk.load(path).digest() == tok.digest()


def test_vocabulary_bijection_and_specials():
    tok = train_bpe(["banana bandana"], 8)
    vocab = tok.vocab
    specials = {vocab.pad, vocab.bos, vocab.eos}
    assert len(specials) == 3 and all(0 <= i < len(vocab) for i in specials)
    for i, t in enumerate(vocab.id_to_token):
        if t is not None:
            assert vocab.token_to_id[t] == i
    assert len(vocab.token_to_id) == len(vocab) - 3


def test_decode_rejects_specials_and_out_of_range():
    tok = byte_tokenizer()
    with pytest.raises(TokenizerError):
        tok.decode([tok.eos_id])
    with pytest.raises(TokenizerError):
        tok.decode([tok.vocab_size])


@pytest.mark.parametrize("text", [
    "bogus header\n",
    "poftlab-tokenizer 1\nkind bpe\nmerge 999 3\n",
    "poftlab-tokenizer 1\nkind char\ntoken 300 6161\n",
    "poftlab-tokenizer 1\nwhat 1\n",
])
def test_loads_rejects_malformed_files(text):
    with pytest.raises(TokenizerError):
        tk.loads(text)


def test_unknown_kind():
    with pytest.raises(TokenizerError):
        tk.make_tokenizer("wordpiece")
