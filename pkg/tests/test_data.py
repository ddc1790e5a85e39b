import hashlib
import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damvd.data import (
    END_ID, PAD_ID, SCHEMA, SPECIALS, START_ID, UNK_ID, DatasetError, Vocabulary, answer_is_consistent,
    build_vocab, dataset_to_json, detokenize, generate_dataset, load_dataset, save_dataset, tokenize,
)

# sha256 of save_dataset(generate_dataset(7, 64, 3, 20)), frozen when the generator was finalised
ACCEPTANCE_SHA256 = "e2dcc3f3770f8b878b2e328c443c296354f4ebb6cd7163d1bea0c0403db73d9c"


@pytest.fixture(scope="module")
def small():
    return generate_dataset(3, 10, 3, 20)


def test_tokenize_examples():
    assert tokenize("Is there a square?") == ["is", "there", "a", "square", "?"]
    assert tokenize("") == []
    assert tokenize("Yes, there is.") == ["yes", ",", "there", "is", "."]


@settings(max_examples=50)
@given(st.lists(st.sampled_from(["is", "a", "red", "?", ",", "two", "circle"]), max_size=10))
def test_detokenize_tokenize_idempotent(tokens):
    text = detokenize(tokens)
    assert detokenize(tokenize(text)) == text


def test_special_ids():
    assert (PAD_ID, START_ID, END_ID, UNK_ID) == (0, 1, 2, 3)
    assert Vocabulary([]).itos == list(SPECIALS)


def test_generation_is_pure(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_dataset(generate_dataset(11, 5, 2, 8), a)
    save_dataset(generate_dataset(11, 5, 2, 8), b)
    assert a.read_bytes() == b.read_bytes()
    assert dataset_to_json(generate_dataset(12, 5, 2, 8)) != dataset_to_json(generate_dataset(11, 5, 2, 8))


def test_acceptance_dataset_checksum(tmp_path):
    path = tmp_path / "d.json"
    save_dataset(generate_dataset(7, 64, 3, 20), path)
    assert hashlib.sha256(path.read_bytes()).hexdigest() == ACCEPTANCE_SHA256


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 3), st.integers(2, 20))
def test_round_invariants(seed, n_images, rounds, n_candidates):
    ds = generate_dataset(seed, n_images, rounds, n_candidates)
    assert len(ds.dialogues) == n_images
    for dlg in ds.dialogues:
        image = ds.image(dlg.image_id)
        assert 1 <= len(image.regions) <= 4
        assert len(dlg.rounds) == rounds
        for r in dlg.rounds:
            assert len(r.candidates) == n_candidates == len(r.relevance)
            assert sum(c == r.answer for c in r.candidates) == 1
            assert r.candidates[r.gt_index] == r.answer
            assert r.relevance[r.gt_index] == 1.0
            assert sorted(r.relevance)[-2:] == [0.5, 1.0]
            assert Counter(r.relevance)[0.5] == 1
            assert len({tuple(c) for c in r.candidates}) == n_candidates
            assert answer_is_consistent(image, r.question, r.answer)
            para = r.candidates[r.relevance.index(0.5)]
            assert answer_is_consistent(image, r.question, para)
            assert para[0] == r.answer[0]


def test_distractors_are_wrong(small):
    for dlg in small.dialogues:
        image = small.image(dlg.image_id)
        for r in dlg.rounds:
            for c, rel in zip(r.candidates, r.relevance):
                if rel == 0.0:
                    assert not answer_is_consistent(image, r.question, c)


def test_history_accumulates(small):
    ex = small.examples()
    assert [e.round for e in ex[:3]] == [0, 1, 2]
    assert ex[0].history == [small.dialogues[0].caption]
    assert ex[2].history[2] == ex[1].question + ex[1].answer


def test_regions_decode_to_objects(small):
    for im in small.images:
        objs = im.objects()
        assert len({(r, c) for _, _, r, c in objs}) == len(objs)
        assert im.captions[0][3] in ("one", "two", "three", "four")


def test_pool_exhausted():
    with pytest.raises(ValueError, match="template pool exhausted"):
        generate_dataset(0, 4, 3, 40)
    with pytest.raises(ValueError, match="template pool exhausted"):
        generate_dataset(0, 8, 9, 4)


@pytest.mark.parametrize("args", [(0, 0, 1, 5), (0, 1, 0, 5), (0, 1, 1, 1)])
def test_bad_sizes(args):
    with pytest.raises(ValueError):
        generate_dataset(*args)


def test_vocab_covers_everything(small):
    vocab = build_vocab(small, 0)
    assert all(t in vocab for t in small.tokens())
    assert UNK_ID not in vocab.encode(list(small.tokens()))


def test_vocab_strict_min_freq_and_order(small):
    counts = Counter(small.tokens())
    k = 5
    vocab = build_vocab(small, k)
    for tok, c in counts.items():
        assert (tok in vocab) == (c > k)
    exactly = [t for t, c in counts.items() if c == k]
    for tok in exactly:
        assert vocab.encode([tok]) == [UNK_ID]
    kept = vocab.itos[len(SPECIALS) :]
    assert kept == sorted(kept, key=lambda t: (-counts[t], t))
    assert build_vocab(small, k).itos == vocab.itos


def test_vocab_json_round_trip(small):
    vocab = build_vocab(small, 2)
    back = Vocabulary.from_json(json.loads(json.dumps(vocab.to_json())))
    assert back.itos == vocab.itos and back.min_freq == 2
    assert back.decode(back.encode(["is", "there"])) == ["is", "there"]


def test_save_load_round_trip(tmp_path, small):
    path = tmp_path / "d.json"
    save_dataset(small, path, config={"seed": 3})
    back = load_dataset(path)
    assert back == small
    assert json.loads(path.read_text())["schema"] == SCHEMA


def _corrupt(tmp_path, small, mutate):
    obj = dataset_to_json(small)
    mutate(obj)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(obj))
    return path


def test_missing_relevance_named(tmp_path, small):
    path = _corrupt(tmp_path, small, lambda o: o["dialogues"][0]["rounds"][1].pop("relevance"))
    with pytest.raises(DatasetError, match=r"dialogues\[0\]\.rounds\[1\].*'relevance'"):
        load_dataset(path)


def test_unknown_schema(tmp_path, small):
    path = _corrupt(tmp_path, small, lambda o: o.update(schema="dam-visdial/99"))
    with pytest.raises(DatasetError, match="schema"):
        load_dataset(path)


def test_relevance_length_mismatch(tmp_path, small):
    path = _corrupt(tmp_path, small, lambda o: o["dialogues"][1]["rounds"][0]["relevance"].pop())
    with pytest.raises(DatasetError, match="relevance"):
        load_dataset(path)


def test_parse_error_has_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "dam-visdial/1",\n "images": [')
    with pytest.raises(DatasetError, match=r"bad\.json:2:\d+"):
        load_dataset(path)
