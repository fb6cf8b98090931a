import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genmc.data import (DELIM, EOS, OPTION_IDS, PAD, SPECIALS, UNK, DataError, MCQAExample, Vocab,
                        batchify, build_vocab, dump_jsonl, gen_synth_copy, gen_synth_twohop,
                        join_pair, load_jsonl, make_batch, read_header, tokenize, twohop_world,
                        write_jsonl)


def test_reserved_ids():
    v = build_vocab(["hello"])
    assert v.stoi["\n"] == DELIM == 4
    assert [v.stoi[f"({c})"] for c in "ABCDEFGH"] == list(OPTION_IDS) == list(range(5, 13))
    assert v.itos[:4] == ["<pad>", "<s>", "</s>", "<unk>"]


def test_vocab_frequency_then_lexicographic_order():
    v = build_vocab(["a b a"])
    assert v.encode("a")[0] < v.encode("b")[0]
    w = build_vocab(["zeta alpha"])
    assert w.encode("alpha")[0] < w.encode("zeta")[0]


def test_vocab_cap_keeps_most_frequent():
    v = build_vocab(["x x x y y z"], max_size=len(SPECIALS) + 2)
    assert v.encode("x y z") == [v.stoi["x"], v.stoi["y"], UNK]


def test_vocab_rejects_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([])


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Where's the Cat?") == ["where", "'", "s", "the", "cat", "?"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["red", "fox", "jumps", "k7", "?", ","]), min_size=1, max_size=12))
def test_encode_decode_roundtrip(words):
    v = build_vocab(["red fox jumps k7 ? ,"])
    text = " ".join(words)
    assert v.decode(v.encode(text)) == text


def test_unseen_token_is_unk():
    assert build_vocab(["a b"]).encode("a q")[1] == UNK


def test_vocab_save_load(tmp_path):
    v = build_vocab(["the cat sat", "on the mat"])
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v


# -- loader --------------------------------------------------------------------------------

def _line(n, answer=0, **kw):
    obj = {"id": "x", "question": "which one ?", "options": [f"opt {i}" for i in range(n)],
           "answer_idx": answer}
    obj.update(kw)
    return json.dumps(obj)


def test_load_five_option_csqa_shape(tmp_path):
    p = tmp_path / "csqa.jsonl"
    p.write_text(_line(5, 3, dataset="csqa") + "\n")
    (ex,) = load_jsonl(p)
    assert ex.n_options == 5 and ex.answer == "opt 3" and ex.dataset_name == "csqa"


def test_load_eight_option_qasc_shape(tmp_path):
    p = tmp_path / "qasc.jsonl"
    p.write_text(_line(8, 7) + "\n")
    assert load_jsonl(p)[0].n_options == 8


def test_load_skips_header_and_blank_lines(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('# {"task": "copy"}\n\n' + _line(4) + "\n")
    assert len(load_jsonl(p)) == 1 and read_header(p) == {"task": "copy"}


@pytest.mark.parametrize("bad", [
    _line(4, 4),                               # answer_idx = n
    _line(4, -1),
    _line(0),
    _line(1),
    _line(9),
    json.dumps({"id": "x", "question": "q", "options": ["a", ""], "answer_idx": 0}),
    json.dumps({"id": "x", "options": ["a", "b"], "answer_idx": 0}),
    json.dumps({"id": "x", "question": "q", "options": "ab", "answer_idx": 0}),
    json.dumps({"id": "x", "question": "q", "options": ["a", "b"], "answer_idx": "0"}),
    "{not json",
    "[1, 2]",
])
def test_loader_rejects_malformed_with_line_number(tmp_path, bad):
    p = tmp_path / "bad.jsonl"
    p.write_text(_line(4) + "\n" + _line(4) + "\n" + bad + "\n")
    with pytest.raises(DataError, match=r"bad\.jsonl:3:") as info:
        load_jsonl(p)
    assert info.value.lineno == 3


def test_example_validation():
    with pytest.raises(ValueError):
        MCQAExample("a", "q", ["x", "y"], 2)


def test_write_then_load_roundtrip(tmp_path):
    exs = gen_synth_copy(5, 20, 4, 3)
    write_jsonl(tmp_path / "c.jsonl", exs, header={"seed": 3})
    assert load_jsonl(tmp_path / "c.jsonl") == exs


# -- synthetic generators -------------------------------------------------------------------

def test_copy_is_deterministic():
    assert dump_jsonl(gen_synth_copy(50, 40, 4, 9)) == dump_jsonl(gen_synth_copy(50, 40, 4, 9))
    assert dump_jsonl(gen_synth_copy(50, 40, 4, 9)) != dump_jsonl(gen_synth_copy(50, 40, 4, 10))


def test_copy_options_distinct_and_mapping_fixed():
    seen = {}
    for ex in gen_synth_copy(300, 40, 5, 2):
        assert len(set(ex.options)) == ex.n_options == 5
        key = ex.question.split()[3]
        assert seen.setdefault(key, ex.answer) == ex.answer


def test_copy_answer_position_uniform_chi_square():
    # chi-square with 3 dof; the 1% critical value is 11.345
    counts = np.bincount([ex.answer_index for ex in gen_synth_copy(10_000, 60, 4, 0)], minlength=4)
    stat = ((counts - 2500.0) ** 2 / 2500.0).sum()
    assert stat < 11.345


def test_copy_rejects_too_many_options():
    with pytest.raises(ValueError):
        gen_synth_copy(5, 6, 4, 0)


def test_twohop_deterministic():
    a = gen_synth_twohop(40, 90, 4, 1, part="train", bridge_fraction=0.3)
    b = gen_synth_twohop(40, 90, 4, 1, part="train", bridge_fraction=0.3)
    assert a == b


def test_twohop_question_option_overlap_is_zero():
    for ex in gen_synth_twohop(200, 90, 4, 1):
        assert not set(tokenize(ex.question)) & set(tokenize(ex.answer))


def test_twohop_answer_is_composition():
    world = twohop_world(90, 1)
    for ex in gen_synth_twohop(100, 90, 4, 1):
        k = int(ex.question.split()[-2][1:])
        assert ex.answer == f"a{world.answer(k)}"


def test_twohop_key_split_disjoint():
    def keys(exs):
        return {ex.question.split()[-2] for ex in exs if "two steps" in ex.question}
    train = keys(gen_synth_twohop(2000, 150, 4, 4, part="train", bridge_fraction=0.5))
    held = keys(gen_synth_twohop(500, 150, 4, 4, part="heldout"))
    assert train and held and not train & held


def test_twohop_bridges_cover_heldout_keys():
    world = twohop_world(150, 4)
    exs = gen_synth_twohop(3000, 150, 4, 4, part="train", bridge_fraction=0.5)
    one_hop = {ex.question.split()[-2] for ex in exs if "one step" in ex.question}
    assert {f"k{k}" for k in world.heldout} <= one_hop


def test_twohop_rejects_tiny_vocab():
    with pytest.raises(ValueError):
        gen_synth_twohop(5, 5, 2, 0)


# -- batching ---------------------------------------------------------------------------------

def test_batchify_keeps_partial_batch():
    sizes = [len(b) for b in batchify(list(range(10)), 8)]
    assert sizes == [8, 2]


def test_batchify_shuffle_is_seeded():
    xs = list(range(30))
    assert batchify(xs, 4, 5) == batchify(xs, 4, 5)
    assert batchify(xs, 4, 5) != batchify(xs, 4, 6)
    assert sorted(sum(batchify(xs, 4, 5), [])) == xs


def test_long_question_truncated_to_source_limit():
    words = " ".join(f"w{i}" for i in range(100))
    ex = MCQAExample("a", words, ["yes", "no"], 0)
    v = build_vocab([words, "yes no"])
    b = make_batch([ex], v, 64, 32)
    assert b.q_ids.shape == (1, 64) and b.q_mask.all()
    assert b.pair_ids.shape[-1] == 64
    assert b.pair_ids[0, 0, -2:].tolist() == [DELIM, v.stoi["yes"]]


def test_join_pair_layout():
    assert join_pair([7, 8], [9], 10) == [7, 8, DELIM, 9]
    assert join_pair([7, 8], [9], 10, middle=[20, 21]) == [7, 8, DELIM, 20, 21, DELIM, 9]
    assert join_pair([7, 8], [9], 10, middle=[]) == [7, 8, DELIM, 9]


def test_batch_masks_and_targets():
    exs = [MCQAExample("a", "p q r", ["s", "t u"], 1), MCQAExample("b", "p", ["s", "t", "v"], 0)]
    v = build_vocab(["p q r s t u v"])
    b = make_batch(exs, v, 64, 32)
    assert np.array_equal(b.q_mask, b.q_ids != PAD)
    assert np.array_equal(b.pair_mask, b.pair_ids != PAD)
    assert b.option_mask.tolist() == [[True, True, False], [True, True, True]]
    assert b.target_ids[0].tolist() == [v.stoi["t"], v.stoi["u"], EOS]
    assert b.target_ids[1].tolist() == [v.stoi["s"], EOS, PAD]
