import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlvr_pointer import synth
from nlvr_pointer.data import (
    PAD_ID,
    UNK_ID,
    ParseError,
    RawExample,
    RawObject,
    Vocabulary,
    build_vocabulary,
    collate,
    encode_example,
    encode_object,
    make_batches,
    parse_structured_json,
    read_corpus,
    tokenize,
)


def record(**overrides):
    base = {
        "sentence": "There is a black block.",
        "label": "true",
        "identifier": "12-3",
        "structured_rep": [
            [{"x_loc": 20, "y_loc": 80, "size": 20, "type": "square", "color": "Black"}],
            [],
            [{"x_loc": 0, "y_loc": 100, "size": 10, "type": "circle", "color": "#0099ff"}],
        ],
    }
    base.update(overrides)
    return json.dumps(base)


# ---------------------------------------------------------------- parsing


def test_parse_label_true():
    assert parse_structured_json(record()).label == 1


def test_parse_label_false_case_insensitive():
    assert parse_structured_json(record(label="False")).label == 0


def test_parse_object_passthrough():
    ex = parse_structured_json(record())
    assert ex.boxes[0][0] == RawObject(20, 80, 20, "square", "black")
    assert ex.identifier == "12-3" and ex.boxes[1] == []


def test_parse_hex_blue():
    assert parse_structured_json(record()).boxes[2][0].color == "blue"


def test_parse_unknown_color_maps_to_blue_with_warning(caplog):
    rep = [[{"x_loc": 1, "y_loc": 1, "size": 10, "type": "circle", "color": "#123456"}], [], []]
    ex = parse_structured_json(record(structured_rep=rep))
    assert ex.boxes[0][0].color == "blue"
    assert "unrecognized color" in caplog.text


def test_parse_two_boxes():
    with pytest.raises(ParseError, match="expected 3 sub-images"):
        parse_structured_json(record(structured_rep=[[], []]))


@pytest.mark.parametrize(
    "bad",
    [
        {"x_loc": 120, "y_loc": 1, "size": 10, "type": "circle", "color": "Black"},
        {"x_loc": 1, "y_loc": 1, "size": 15, "type": "circle", "color": "Black"},
        {"x_loc": 1, "y_loc": 1, "size": 10, "type": "star", "color": "Black"},
        {"y_loc": 1, "size": 10, "type": "circle", "color": "Black"},
    ],
)
def test_parse_out_of_domain_carries_identifier(bad):
    with pytest.raises(ParseError) as info:
        parse_structured_json(record(structured_rep=[[bad], [], []]))
    assert info.value.identifier == "12-3"


def test_parse_malformed_json():
    with pytest.raises(ParseError):
        parse_structured_json("{not json")


def test_parse_missing_field():
    line = json.loads(record())
    del line["sentence"]
    with pytest.raises(ParseError, match="sentence"):
        parse_structured_json(json.dumps(line))


# ---------------------------------------------------------------- tokenize


def test_tokenize_rules():
    assert tokenize("There is a black block.") == ["there", "is", "a", "black", "block", "."]


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_case_folding():
    assert tokenize("A A a") == ["a", "a", "a"]


def test_tokenize_multiple_trailing_marks():
    assert tokenize("yes, really?!") == ["yes", ",", "really", "?", "!"]


# ---------------------------------------------------------------- vocabulary


def test_vocab_threshold():
    vocab = Vocabulary.build([["a", "b", "c"], ["a", "b", "c"], ["a", "c"], ["d"]])
    assert "a" in vocab and "c" in vocab
    assert "b" not in vocab and vocab.encode(["b"]) == [UNK_ID]
    assert vocab.tokens == ["<pad>", "<unk>", "a", "c"]


def test_vocab_empty_corpus():
    assert len(Vocabulary.build([])) == 2


def test_vocab_roundtrip_text(tmp_path):
    vocab = Vocabulary.build([["x", "y"]] * 3)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert path.read_text() == "<pad>\t0\n<unk>\t1\nx\t2\ny\t3\n"
    assert Vocabulary.load(path).tokens == vocab.tokens


def test_vocab_is_split_pure():
    train = [parse_structured_json(json.dumps(r)) for r in synth.generate(30, seed=1)]
    dev = [parse_structured_json(json.dumps(r)) for r in synth.generate(30, seed=2)]
    a = build_vocabulary(train)
    b = build_vocabulary(train)
    assert a.tokens == b.tokens
    for ex in dev:
        encode_example(ex, a)
    assert a.tokens == b.tokens


# ---------------------------------------------------------------- features


def test_encode_object_by_hand():
    f = encode_object(RawObject(20, 80, 20, "square", "black"))
    np.testing.assert_allclose(f, [-0.6, 0.6, 2 / 3, 1, 0, 0, 1, 0, 0], atol=1e-15)


def test_encode_object_midpoint_and_extremes():
    assert tuple(encode_object(RawObject(50, 50, 10, "circle", "blue"))[:2]) == (0.0, 0.0)
    assert tuple(encode_object(RawObject(0, 100, 30, "triangle", "yellow"))[:2]) == (-1.0, 1.0)


def test_encode_object_rejects_out_of_domain():
    with pytest.raises(ValueError):
        encode_object(RawObject(101, 0, 10, "circle", "blue"))


objects = st.builds(
    RawObject,
    st.integers(0, 100),
    st.integers(0, 100),
    st.sampled_from([10, 20, 30]),
    st.sampled_from(["square", "triangle", "circle"]),
    st.sampled_from(["black", "yellow", "blue"]),
)


@settings(max_examples=200, deadline=None)
@given(objects, objects)
def test_encode_object_injective_and_in_range(a, b):
    fa, fb = encode_object(a), encode_object(b)
    assert np.all(np.abs(fa[:2]) <= 1) and fa[2] in (1 / 3, 2 / 3, 1.0)
    assert fa[3:6].sum() == 1 and fa[6:].sum() == 1
    assert (a == b) == np.array_equal(fa, fb)


def test_encode_example_unknown_tokens():
    vocab = Vocabulary.build([])
    ex = encode_example(parse_structured_json(record()), vocab)
    assert list(ex.token_ids) == [UNK_ID] * 6


def test_encode_example_empty_subimage():
    vocab = Vocabulary.build([])
    ex = encode_example(parse_structured_json(record()), vocab)
    assert ex.subimages[1].shape == (0, 9)


def test_decode_recovers_in_vocabulary_tokens():
    raw = parse_structured_json(record())
    vocab = Vocabulary.build([tokenize(raw.sentence)] * 3)
    ex = encode_example(raw, vocab)
    assert vocab.decode(ex.token_ids) == tokenize(raw.sentence)


# ---------------------------------------------------------------- batching


def examples(n, seed=0):
    raws = [parse_structured_json(json.dumps(r)) for r in synth.generate(n, seed=seed)]
    vocab = build_vocabulary(raws)
    return [encode_example(r, vocab) for r in raws]


def test_batch_sizes():
    assert [len(b) for b in make_batches(examples(10), 4)] == [4, 4, 2]


def test_batch_zero_size():
    with pytest.raises(ValueError):
        make_batches(examples(2), 0)


def test_unbatch_roundtrip():
    exs = examples(13, seed=4)
    recovered = [ex for b in make_batches(exs, 5) for ex in b.unbatch()]
    assert recovered == exs


def test_batch_masks_mark_real_positions():
    exs = examples(6, seed=5)
    b = collate(exs)
    for i, ex in enumerate(exs):
        assert b.token_mask[i].sum() == len(ex.token_ids)
        assert np.all(b.tokens[i, ~b.token_mask[i]] == PAD_ID)
        for j in range(3):
            assert b.object_mask[i, j].sum() == len(ex.subimages[j])
            assert np.all(b.objects[i, j, ~b.object_mask[i, j]] == 0)


def test_shuffle_deterministic():
    exs = examples(10)
    a = make_batches(exs, 3, True, np.random.default_rng(9))
    b = make_batches(exs, 3, True, np.random.default_rng(9))
    assert [x.identifiers for x in a] == [x.identifiers for x in b]


def test_corpus_file_properties(tmp_path):
    path = tmp_path / "train.jsonl"
    synth.write_jsonl(synth.generate(200, seed=11), path)
    raws = read_corpus(path)
    assert len(raws) == 200
    for ex in raws:
        assert len(ex.boxes) == 3
        assert all(1 <= len(box) <= 6 for box in ex.boxes)
    labels = [r.label for r in raws]
    assert sum(labels) == 100
