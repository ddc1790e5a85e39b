import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damvd import autodiff as ad
from damvd.autodiff import Tensor
from damvd.data import Example, Image, Round, build_vocab, generate_dataset
from damvd.encoders import attend, collate, encode, gate_fusion
from damvd.gradcheck import randomize
from damvd.model import VARIANTS, DamModel, ModelConfig


@pytest.fixture(scope="module")
def corpus():
    ds = generate_dataset(5, 6, 3, 6)
    return ds, build_vocab(ds)


def make_model(vocab, variant, hidden=6, seed=0, scale=0.5):
    cfg = ModelConfig(len(vocab), embed_dim=5, hidden=hidden, variant=variant)
    return randomize(DamModel.init(cfg, seed=seed, dtype=np.float64), scale, seed)


def zero(model, prefix):
    for name, p in model.params.items():
        if name.startswith(prefix):
            p.data[...] = 0.0


def single_example(n_regions=1, history=1):
    regions = [[1, 0, 0, 1, 0, 0, 0, 0.5, 0.5], [0, 1, 0, 0, 1, 0, 0, 0, 1]][:n_regions]
    image = Image(0, regions, [["an", "image", "with", "one", "object"]])
    rnd = Round(["is", "there", "a", "circle", "?"], ["yes"], [["yes"]], [1.0], 0)
    hist = [["an", "image", "with", "one", "object"], ["is", "there", "a", "square", "?", "no"]][:history]
    return Example(0, len(hist) - 1, image, hist, rnd)


# -- attention ----------------------------------------------------------------


def test_single_key():
    rng = np.random.default_rng(0)
    k = Tensor(rng.normal(size=4))
    res = attend(Tensor(rng.normal(size=4)), [k], Tensor(rng.normal(size=(1, 4))))
    assert res.weights.data.tolist() == [1.0]
    np.testing.assert_allclose(res.summary.data, k.data, rtol=1e-15)


def test_zero_scorer_uniform():
    rng = np.random.default_rng(1)
    keys = [Tensor(rng.normal(size=3)) for _ in range(4)]
    res = attend(Tensor(rng.normal(size=3)), keys, Tensor(np.zeros((1, 3))), Tensor(np.zeros(1)))
    np.testing.assert_allclose(res.weights.data, 0.25)
    np.testing.assert_allclose(res.summary.data, np.mean([k.data for k in keys], axis=0))


def test_identical_keys():
    rng = np.random.default_rng(2)
    k = rng.normal(size=5)
    res = attend(Tensor(rng.normal(size=5)), [Tensor(k)] * 3, Tensor(rng.normal(size=(1, 5))))
    np.testing.assert_allclose(res.summary.data, k, rtol=1e-12)


def test_empty_keys():
    with pytest.raises(ValueError):
        attend(Tensor(np.zeros(3)), [], Tensor(np.zeros((1, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 6))
def test_weights_are_distribution(seed, n, h):
    rng = np.random.default_rng(seed)
    keys = Tensor(rng.normal(size=(2, n, h)))
    res = attend(Tensor(rng.normal(size=(2, h))), keys, Tensor(rng.normal(size=(1, h))))
    w = res.weights.data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w > 0)
    np.testing.assert_allclose(res.summary.data, np.einsum("bn,bnh->bh", w, keys.data), atol=1e-12)


def test_masked_keys_get_zero_weight():
    rng = np.random.default_rng(3)
    keys = Tensor(rng.normal(size=(1, 3, 4)))
    bias = Tensor(np.array([[0.0, -1e9, 0.0]]))
    res = attend(Tensor(rng.normal(size=(1, 4))), keys, Tensor(rng.normal(size=(1, 4))), bias=bias)
    assert res.weights.data[0, 1] == 0.0


def test_gate_fusion_bounds(corpus):
    _, vocab = corpus
    model = make_model(vocab, "dualvd")
    v = Tensor(np.random.default_rng(4).normal(size=(2, 6)))
    _, gate = gate_fusion(v, v, model, "enc.ifuse")
    ab = np.concatenate([v.data, v.data], axis=-1)
    assert np.all((gate.data > 0) & (gate.data < 1))
    assert np.all(np.abs(gate.data * ab) <= np.abs(ab))


# -- encoders -----------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_k_shape_and_determinism(corpus, variant):
    ds, vocab = corpus
    model = make_model(vocab, variant)
    batch = collate(ds.examples()[:4], vocab)
    a, b = encode(model, batch), encode(model, batch)
    assert a.K.shape == (4, 6) and a.variant == variant
    assert a.K.data.tobytes() == b.K.data.tobytes()
    # caption first, then one utterance per earlier round
    assert a.H_mask.sum(axis=1).tolist() == [ex.round + 1 for ex in ds.examples()[:4]]


@pytest.mark.parametrize("variant", VARIANTS)
def test_batching_matches_single_examples(corpus, variant):
    ds, vocab = corpus
    model = make_model(vocab, variant)
    examples = ds.examples()[:6]
    K = encode(model, collate(examples, vocab)).K.data
    for i, ex in enumerate(examples):
        np.testing.assert_allclose(K[i], encode(model, collate([ex], vocab)).K.data[0], rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("variant", ["lf", "dualvd"])
def test_zero_fusion_gives_zero_k(corpus, variant):
    _, vocab = corpus
    model = make_model(vocab, variant)
    zero(model, "enc.fuse")
    kb = encode(model, collate([single_example(2, 2)], vocab))
    assert np.array_equal(kb.K.data, np.zeros((1, 6)))


def test_dualvd_zero_weights(corpus):
    _, vocab = corpus
    model = make_model(vocab, "dualvd")
    zero(model, "")
    kb = encode(model, collate([single_example(2, 2)], vocab))
    assert np.array_equal(kb.K.data, np.zeros((1, 6)))


def test_lf_means_collapse(corpus):
    _, vocab = corpus
    model = make_model(vocab, "lf")
    kb = encode(model, collate([single_example(1, 1)], vocab))
    np.testing.assert_array_equal(kb.mean("I").data, kb.I_regions.data[:, 0])
    np.testing.assert_array_equal(kb.mean("H").data, kb.H_utts.data[:, 0])


def _mn_query(model, kb):
    x = np.concatenate([kb.Q_embed.data, kb.mean("I").data], axis=-1)
    return x @ model["enc.query.W"].data.T + model["enc.query.b"].data


def test_mn_single_round(corpus):
    _, vocab = corpus
    model = make_model(vocab, "mn")
    kb = encode(model, collate([single_example(2, 1)], vocab))
    np.testing.assert_allclose(kb.K.data, _mn_query(model, kb) + kb.H_utts.data[:, 0], rtol=1e-12)


def test_mn_zero_attention_is_mean(corpus):
    _, vocab = corpus
    model = make_model(vocab, "mn")
    zero(model, "enc.att_h")
    kb = encode(model, collate([single_example(2, 2)], vocab))
    np.testing.assert_allclose(kb.K.data, _mn_query(model, kb) + kb.H_utts.data.mean(axis=1), rtol=1e-12)
    np.testing.assert_allclose(kb.attention["history"], 0.5)


def test_dualvd_requires_captions(corpus):
    _, vocab = corpus
    model = make_model(vocab, "dualvd")
    ex = single_example()
    ex.image.captions = []
    with pytest.raises(ValueError):
        encode(model, collate([ex], vocab))


def test_empty_question(corpus):
    _, vocab = corpus
    ex = single_example()
    ex.rnd.question = []
    with pytest.raises(ValueError, match="empty question"):
        collate([ex], vocab)


@pytest.mark.parametrize("variant", VARIANTS)
def test_encoder_gradients_and_no_dead_params(corpus, variant):
    ds, vocab = corpus
    model = make_model(vocab, variant, hidden=4)
    batch = collate(ds.examples()[1:4], vocab)
    w = Tensor(np.random.default_rng(5).normal(size=(3, 4)))
    params = {k: v for k, v in model.params.items() if k.startswith("enc.") or k == "embed"}

    def fn():
        return ad.total(ad.mul(encode(model, batch).K, w))

    report = ad.finite_diff_check(fn, params, max_entries=12)
    assert report.passed, report.lines()
    for name, p in params.items():
        assert np.abs(p.grad).max() > 0, f"{name} receives no gradient"
