import pytest

from mmtprobe.corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    Vocab,
    default_image_ids,
    load_parallel,
    make_synthetic_corpus,
    read_token_lines,
    synthetic_lexicon_tsv,
    two_form_nouns,
    write_token_lines,
)
from mmtprobe.errors import CorpusError
from mmtprobe.masking import MaskLexicon


def test_vocab_reserves_specials():
    v = Vocab.build([["b", "a", "b"]])
    assert v.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert (PAD_ID, BOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)


def test_vocab_orders_by_frequency_then_lexicographic():
    v = Vocab.build([["b", "a", "b", "c", "a", "b"]])
    assert v.itos[4:] == ["b", "a", "c"]


def test_vocab_encode_decode_round_trip():
    v = Vocab.build([["hello", "world"]])
    ids = v.encode(["world", "hello", "unseen"])
    assert ids[2] == UNK_ID
    assert v.decode(ids[:2]) == ["world", "hello"]


def test_vocab_save_load(tmp_path):
    v = Vocab.build([["x", "y", "z", "x"]])
    v.save(tmp_path / "v.txt")
    w = Vocab.load(tmp_path / "v.txt")
    assert w.itos == v.itos and w.stoi == v.stoi


def test_vocab_load_rejects_non_vocab_file(tmp_path):
    (tmp_path / "bad.txt").write_text("just\nwords\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        Vocab.load(tmp_path / "bad.txt")


def test_token_lines_round_trip(tmp_path):
    sents = [["a", "b"], ["c"], []]
    write_token_lines(tmp_path / "c.txt", sents)
    assert read_token_lines(tmp_path / "c.txt") == sents


def test_read_token_lines_reports_bad_utf8_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_bytes(b"good line\n\xff\xfe broken\n")
    with pytest.raises(CorpusError, match="line 2"):
        read_token_lines(path)


def test_read_token_lines_missing_file(tmp_path):
    with pytest.raises(CorpusError):
        read_token_lines(tmp_path / "nope.txt")


def test_load_parallel_length_mismatch(tmp_path):
    write_token_lines(tmp_path / "a.src", [["x"], ["y"]])
    write_token_lines(tmp_path / "a.tgt", [["x"]])
    with pytest.raises(CorpusError, match="mismatch"):
        load_parallel(tmp_path / "a.src", tmp_path / "a.tgt")


def test_default_image_ids_are_stable():
    assert default_image_ids(2) == ["line000000", "line000001"]


def test_synthetic_corpus_shape_and_determinism():
    a = make_synthetic_corpus(10, seed=4)
    b = make_synthetic_corpus(10, seed=4)
    assert [e.src for e in a] == [e.src for e in b]
    assert [e.tgt for e in a] == [e.tgt for e in b]
    for e in a:
        assert len(e.src) == len(e.tgt) == 7
        assert e.src[0] == "a" and e.src[4] == "a"


def test_synthetic_copy_task_targets_equal_sources():
    for e in make_synthetic_corpus(5, seed=0, copy_task=True):
        assert e.src == e.tgt


def test_synthetic_two_form_nouns_vary_target_inflection():
    examples = make_synthetic_corpus(400, seed=0)
    two_form = two_form_nouns()
    seen = {}
    for e in examples:
        for src_tok, tgt_tok in zip(e.src, e.tgt):
            if src_tok in two_form:
                seen.setdefault(src_tok, set()).add(tgt_tok)
    assert any(len(forms) == 2 for forms in seen.values())


def test_synthetic_lexicon_parses_and_covers_nouns(tmp_path):
    path = tmp_path / "lex.tsv"
    path.write_text(synthetic_lexicon_tsv(), encoding="utf-8")
    lexicon = MaskLexicon.from_tsv(path)
    examples = make_synthetic_corpus(20, seed=0)
    for e in examples:
        assert e.src[2] in lexicon.nouns
        assert e.src[6] in lexicon.nouns
        assert e.src[1] in lexicon.colors
