import numpy as np
import pytest

from dlnlab import autograd as ag
from dlnlab.autograd import Tensor, get_tape, parameter
from dlnlab.dln import (
    DynamicLossNetwork,
    encode_pair,
    evaluate_predictions,
    pad_batch,
    stage1_loss,
)
from dlnlab.exceptions import DatasetTooSmall, NotADistribution
from dlnlab.text import TokenSeq, Vocabulary
from builders import init_dln, tiny_vocab
from gradcheck import check_gradients


@pytest.fixture(autouse=True)
def fresh_tape():
    get_tape().clear()
    yield
    get_tape().clear()


def T(s):
    return TokenSeq(s.split())


def test_layout_contract():
    v = Vocabulary(["a", "b"])
    enc = encode_pair(T("a b"), T("a b"), v)
    a, b = v.stoi["a"], v.stoi["b"]
    assert enc.ids.tolist() == [Vocabulary.bos_id, a, b, Vocabulary.sep_id, a, b, Vocabulary.eos_id]
    assert enc.segments.tolist() == [0, 0, 0, 0, 1, 1, 1]


def test_unknown_words_map_to_unk():
    v = tiny_vocab()
    enc = encode_pair(T("zebra yak"), T("quokka"), v)
    assert enc.ids.tolist() == [Vocabulary.bos_id, Vocabulary.unk_id, Vocabulary.unk_id, Vocabulary.sep_id,
                                Vocabulary.unk_id, Vocabulary.eos_id]


@pytest.mark.parametrize("nc,nr", [(40, 40), (60, 3), (3, 60), (30, 30)])
def test_overlong_pairs_truncate(nc, nr):
    v = tiny_vocab()
    enc = encode_pair(TokenSeq(["man"] * nc), TokenSeq(["dog"] * nr), v, max_len=32)
    assert len(enc) <= 32
    assert (enc.ids == Vocabulary.sep_id).sum() == 1
    assert enc.n_candidate >= min(nc, 14)


def test_outputs_in_unit_cube_and_padding_invariant():
    m = init_dln(seed=3)
    short = encode_pair(T("a man"), T("a man is cooking"), m.vocabulary_)
    long = encode_pair(T("a dog is running in the park"), T("a dog in the park"), m.vocabulary_)
    both = m.forward_encoded([short, long]).data
    alone = m.forward_encoded([short]).data
    assert np.all((both >= 0) & (both <= 1))
    np.testing.assert_allclose(both[0], alone[0], atol=1e-12)


def test_stage1_loss_examples():
    truth = np.array([[0.2, 0.4, 0.6]])
    assert stage1_loss(Tensor(truth), truth).item() == 0.0
    assert stage1_loss(Tensor(truth + 1.0), truth).item() == pytest.approx(3.0)
    rng = np.random.default_rng(0)
    pred, y = rng.random((7, 3)), rng.random((7, 3))
    w = (0.5, 2.0, 1.0)
    brute = sum(sum(w[k] * (pred[i, k] - y[i, k]) ** 2 for k in range(3)) for i in range(7)) / 7
    assert abs(stage1_loss(Tensor(pred), y, w).item() - brute) < 1e-12


def test_hard_soft_consistency():
    m = init_dln(seed=1)
    rng = np.random.default_rng(5)
    V = len(m.vocabulary_)
    for _ in range(10):
        cand = TokenSeq(rng.choice(m.vocabulary_.words, size=rng.integers(1, 7)))
        ref = TokenSeq(rng.choice(m.vocabulary_.words, size=rng.integers(1, 7)))
        onehot = np.eye(V)[m.vocabulary_.encode(cand)][None]
        soft = m.forward_soft(onehot, [ref]).data
        hard = m.forward([(cand, ref)]).data
        np.testing.assert_allclose(soft, hard, atol=1e-9)


def test_uniform_distribution_equals_mixture_embedding():
    m = init_dln(seed=2)
    V = len(m.vocabulary_)
    dist = np.full((1, 3, V), 1.0 / V)
    ref = T("a man")
    out = m.forward_soft(dist, [ref]).data
    enc = encode_pair(TokenSeq(["a"] * 3), ref, m.vocabulary_)
    ids, segs, mask = pad_batch([enc])
    tok = m.params_["tok_emb"].data
    x = tok[ids].copy()
    x[0, 1:4] = tok.mean(axis=0)
    direct = m._encode(Tensor(x), segs, mask).data
    np.testing.assert_allclose(out, direct, atol=1e-12)
    assert np.all(np.isfinite(out))


def test_soft_lengths_ignore_trailing_rows():
    m = init_dln(seed=4)
    V = len(m.vocabulary_)
    rng = np.random.default_rng(1)
    d = rng.dirichlet(np.ones(V), size=(2, 5))
    refs = [T("a dog"), T("the park")]
    full = m.forward_soft(d[:, :3], refs).data
    d2 = d.copy()
    d2[:, 3:] = 1.0 / V
    part = m.forward_soft(d2, refs, lengths=[3, 3]).data
    np.testing.assert_allclose(full, part, atol=1e-12)


def test_soft_rejects_non_distributions():
    m = init_dln()
    V = len(m.vocabulary_)
    with pytest.raises(NotADistribution):
        m.forward_soft(np.full((1, 2, V), 0.5), [T("a")])
    with pytest.raises(NotADistribution):
        m.forward_soft(np.full((1, 2, V + 1), 1.0 / (V + 1)), [T("a")])


def test_soft_gradient_matches_finite_differences():
    m = init_dln(seed=6)
    V = len(m.vocabulary_)
    rng = np.random.default_rng(2)
    logits = parameter(rng.normal(size=(2, 4, V)))
    refs = [T("a man is cooking"), T("the dog")]

    def predicted_bleu():
        return ag.sum_(m.forward_soft(ag.softmax(logits, axis=-1), refs, lengths=[4, 3])[:, 0])

    assert check_gradients(predicted_bleu, [logits]) <= 1e-4


def test_one_step_descends():
    m = init_dln(seed=7)
    X = [(T("a man is cooking"), T("a man is cooking")), (T("dog park"), T("a dog in the park"))]
    y = np.array([[1.0, 1.0, 1.0], [0.1, 0.3, 0.2]])
    encs = [encode_pair(c, r, m.vocabulary_) for c, r in X]
    loss = stage1_loss(m.forward_encoded(encs), y)
    before = loss.item()
    ag.backward(loss)
    for p in m.parameters:
        p.data -= 1e-3 * p.grad
    get_tape().clear()
    assert stage1_loss(m.forward_encoded(encs), y).item() < before


def _records(n, rng):
    words = tiny_vocab().words
    return [(TokenSeq(rng.choice(words, size=rng.integers(1, 6))), TokenSeq(rng.choice(words, size=rng.integers(1, 6))))
            for _ in range(n)]


def test_constant_targets_converge():
    rng = np.random.default_rng(0)
    X = _records(200, rng)
    y = np.tile([0.3, 0.6, 0.1], (200, 1))
    m = DynamicLossNetwork(vocabulary=tiny_vocab(), d_model=8, d_ff=8, head_hidden=8, n_layers=1, learning_rate=1e-2,
                           batch_size=32, epochs=10, min_records=100, random_state=0).fit(X, y)
    pred = m.predict(X[:20])
    np.testing.assert_allclose(pred, y[:20], atol=0.03)
    assert len(m.history_) == 10
    assert sorted(m.heldout_indices_.tolist()) == m.heldout_indices_.tolist()
    assert len(m.heldout_indices_) == 20


def test_fit_rejects_small_datasets():
    rng = np.random.default_rng(0)
    X = _records(50, rng)
    with pytest.raises(DatasetTooSmall):
        DynamicLossNetwork().fit(X, np.zeros((50, 3)))


def test_fit_validates_targets():
    rng = np.random.default_rng(0)
    X = _records(10, rng)
    with pytest.raises(ValueError):
        DynamicLossNetwork(min_records=1).fit(X, np.full((10, 3), 1.5))
    with pytest.raises(ValueError):
        DynamicLossNetwork(min_records=1).fit(X, np.zeros((9, 3)))


def test_report_perfect_and_constant():
    rng = np.random.default_rng(0)
    y = rng.random((100, 3))
    perfect = evaluate_predictions(y, y)
    assert all(abs(perfect.pearson[k] - 1.0) < 1e-12 for k in perfect.pearson)
    assert all(v == 0.0 for v in perfect.mae.values())
    for t, p in perfect.histograms.values():
        assert np.array_equal(t, p)
    const = evaluate_predictions(y, np.full_like(y, 0.5))
    assert const.pearson == {"bleu": 0.0, "meteor": 0.0, "cider": 0.0}
    assert all(const.degenerate.values())


def test_report_csv(tmp_path):
    y = np.random.default_rng(1).random((40, 3))
    rep = evaluate_predictions(y, y * 0.9)
    rep.write_histograms(tmp_path / "h.csv", "bleu")
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "bin_lo,bin_hi,truth_count,pred_count"
    assert len(rows) == 21
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == 40


def test_save_load_round_trip(tmp_path):
    m = init_dln(seed=8)
    m.history_ = []
    m.save(tmp_path / "dln")
    back = DynamicLossNetwork.load(tmp_path / "dln")
    X = [(T("a man"), T("a dog is running"))]
    assert np.array_equal(m.predict(X), back.predict(X))
    assert back.get_params()["d_model"] == 8


def test_parameter_validation():
    with pytest.raises(ValueError):
        DynamicLossNetwork(d_model=10, n_heads=3, min_records=1).fit(_records(5, np.random.default_rng(0)),
                                                                     np.zeros((5, 3)))
