import math

import numpy as np
import pytest

from cytoforge import mil
from cytoforge.errors import ConfigError
from cytoforge.features import Bag, EmbeddingMatrix, LabeledTileSet
from cytoforge.mil import MilParams, TrainConfig
from cytoforge.synthetic import gaussian_bags
from oracles import fd_gradient_error

SIG1 = 1.0 / (1.0 + math.exp(-1.0))


def _tiny_params(dim=2, hidden=3):
    p = MilParams.init(dim, hidden, seed=0)
    p.g_w = np.array([1.0, -1.0])
    p.g_b = np.zeros(())
    return p


def _zero_params(dim=4, hidden=3):
    return MilParams.zeros_like(MilParams.init(dim, hidden))


def test_instance_scores_zero_params():
    np.testing.assert_array_equal(mil.instance_scores(_zero_params(), np.ones((5, 4))), 0.5)


def test_instance_score_scalar_example():
    assert mil.instance_scores(_tiny_params(), np.array([[2.0, 1.0]]))[0] == pytest.approx(0.73106, abs=1e-5)
    assert mil.instance_scores(_tiny_params(), np.array([[2.0, 1.0]]))[0] == pytest.approx(SIG1, abs=1e-15)


def test_instance_score_monotone():
    p = _tiny_params()
    H = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
    s = mil.instance_scores(p, H)
    assert s[0] < s[1] < s[2]


@pytest.mark.parametrize("scores,k,expected", [
    ([0.9, 0.1, 0.5], 2, [0, 2]),
    ([0.2, 0.3, 0.1], 8, [1, 0, 2]),
    ([0.4, 0.4, 0.4], 2, [0, 1]),
])
def test_select_topk(scores, k, expected):
    assert list(mil.select_topk(scores, k)) == expected


def test_attention_single_and_identical():
    p = MilParams.init(6, 5, seed=3)
    h = np.random.default_rng(0).standard_normal(6)
    alpha, z = mil.attention_aggregate(p, h[None, :])
    assert list(alpha) == [1.0]
    np.testing.assert_array_equal(z, h)
    alpha, z = mil.attention_aggregate(p, np.tile(h, (4, 1)))
    np.testing.assert_allclose(alpha, 0.25, atol=1e-15)
    np.testing.assert_allclose(z, h, atol=1e-12)


def test_attention_permutation():
    rng = np.random.default_rng(1)
    p = MilParams.init(6, 5, seed=3)
    H = rng.standard_normal((7, 6))
    perm = rng.permutation(7)
    a1, z1 = mil.attention_aggregate(p, H)
    a2, z2 = mil.attention_aggregate(p, H[perm])
    np.testing.assert_allclose(a2, a1[perm], atol=1e-15)
    np.testing.assert_allclose(z2, z1, atol=1e-12)
    assert np.all(a1 > 0) and abs(a1.sum() - 1) <= 1e-12


def test_slide_score_examples():
    p = _tiny_params()
    assert mil.slide_score(p, np.array([2.0, 1.0])) == pytest.approx(SIG1, abs=1e-15)
    assert mil.slide_score(_zero_params(2), np.array([3.0, -7.0])) == 0.5
    h = np.array([[0.3, -1.2]])
    assert mil.bag_prediction(p, h, 8) == mil.instance_scores(p, h)[0]


@pytest.mark.parametrize("labels,Y", [([0, 0, 0], 0), ([0, 1, 0], 1), ([1, 0, 0], 1), ([0, 0, 1], 1)])
def test_bag_label(labels, Y):
    assert mil.bag_label(labels) == Y


def test_combined_loss_examples():
    assert mil.combined_loss(0.5, 1, [], [], 0.3) == pytest.approx(math.log(2), abs=1e-12)
    assert mil.combined_loss(0.8, 1, [0.1, 0.9], [1, 0], 0.0) == pytest.approx(-math.log(0.8), abs=1e-12)
    # slide BCE 0.2 and tile BCEs 0.4, 0.8
    sp, t1, t2 = math.exp(-0.2), math.exp(-0.4), math.exp(-0.8)
    assert mil.combined_loss(sp, 1, [t1, t2], [1, 1], 0.5) == pytest.approx(0.5, abs=1e-12)


def test_bce_clamped():
    assert float(mil.bce(0.0, 1)) == pytest.approx(-math.log(1e-7))
    assert np.isfinite(mil.bce(1.0, 0))


def test_gradient_matches_logistic_regression():
    rng = np.random.default_rng(2)
    p = MilParams.init(5, 4, seed=1)
    h = rng.standard_normal((1, 5))
    _, g = mil.backward(p, h, 1, np.zeros((0, 5)), [], k=3, lambda_tile=0.0)
    yhat = mil.instance_scores(p, h)[0]
    np.testing.assert_allclose(g.g_w, (yhat - 1) * h[0], atol=1e-15)
    assert float(g.g_b) == pytest.approx(yhat - 1, abs=1e-15)


def test_zero_embeddings_zero_gating_gradients():
    p = MilParams.init(4, 3, seed=0)
    _, g = mil.backward(p, np.zeros((6, 4)), 0, np.zeros((2, 4)), [1, 0], k=3, lambda_tile=0.5)
    assert not g.V.any() and not g.U.any()


@pytest.mark.parametrize("seed", range(6))
def test_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = MilParams.init(8, 4, seed=seed)
    p.g_b = np.array(rng.normal())
    H = rng.standard_normal((int(rng.integers(3, 12)), 8))
    Ht = rng.standard_normal((3, 8))
    yt = rng.integers(0, 2, 3)
    err = fd_gradient_error(p, H, int(rng.integers(2)), Ht, yt, 3, [0.0, 0.5][seed % 2])
    assert err <= 1e-4


def test_topk_only_selected_instances_matter():
    rng = np.random.default_rng(3)
    p = MilParams.init(6, 4, seed=2)
    H = rng.standard_normal((20, 6))
    fwd = mil.forward_bag(p, H, 5)
    H2 = H.copy()
    rest = np.setdiff1d(np.arange(20), fwd.top)
    H2[rest] = 0.0
    # zeroed rows score 0.5 at most sigmoid(g_b); keep them below the selected ones
    if mil.instance_scores(p, H2)[rest].max() < fwd.scores[fwd.top].min():
        assert abs(mil.forward_bag(p, H2, 5).pred - fwd.pred) <= 1e-12


class TestQueues:
    def test_top_ten_of_negative_slide(self):
        q = mil.QueuePair()
        scores = np.random.default_rng(0).random(20)
        ids = [f"t{i}" for i in range(20)]
        mil.update_queues(q, "s", 0, scores, ids)
        kept = [t for t, _ in q.hard_negatives["s"]]
        assert kept == [ids[i] for i in np.argsort(-scores)[:10]]
        stored = [sc for _, sc in q.hard_negatives["s"]]
        others = [scores[i] for i in range(20) if ids[i] not in kept]
        assert min(stored) >= max(others)
        assert q.confident_positives == {}

    def test_short_slide_and_replacement(self):
        q = mil.QueuePair()
        mil.update_queues(q, "p", 1, [0.1, 0.9, 0.3, 0.2], list("abcd"))
        assert [t for t, _ in q.confident_positives["p"]] == ["b", "c", "d", "a"]
        mil.update_queues(q, "p", 1, [0.5], ["e"])
        assert q.confident_positives["p"] == [("e", 0.5)]


@pytest.fixture(scope="module")
def small_bags():
    return [sb.bag for sb in gaussian_bags(12, seed=0, n_instances=20, dim=8)]


def test_zero_epochs_returns_init(small_bags):
    cfg = TrainConfig(epochs=0, hidden=6, seed=4)
    params, log, _ = mil.train(small_bags, cfg)
    init = MilParams.init(8, 6, seed=4)
    for (_, a), (_, b) in zip(params.items(), init.items()):
        np.testing.assert_array_equal(a, b)
    assert log == []


def test_training_is_deterministic(small_bags):
    cfg = TrainConfig(epochs=3, hidden=6, seed=1, slide_batch=4)
    a = mil.train(small_bags, cfg)[0]
    b = mil.train(small_bags, cfg)[0]
    for (_, x), (_, y) in zip(a.items(), b.items()):
        assert x.tobytes() == y.tobytes()


def test_training_reduces_loss(small_bags):
    _, log, _ = mil.train(small_bags, TrainConfig(epochs=30, hidden=8, lr=1e-2, slide_batch=4))
    assert log[-1]["loss"] < log[0]["loss"]


def test_offline_and_online_need_inputs(small_bags):
    with pytest.raises(ConfigError):
        mil.train(small_bags, TrainConfig(epochs=1, c3p_mode="online"))
    with pytest.raises(ConfigError):
        mil.train(small_bags, TrainConfig(epochs=1, c3p_mode="offline"))


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.k, cfg.slide_batch, cfg.tile_batch, cfg.queue_capacity) == (8, 16, 8, 10)
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps) == (1e-3, 0.9, 0.999, 1e-8)


def test_evaluate_chance_level():
    rng = np.random.default_rng(5)
    p = MilParams.init(8, 4, seed=9)
    bags = [Bag(f"b{i}", i % 2, [f"b{i}/{j}" for j in range(10)], rng.standard_normal((10, 8))) for i in range(1000)]
    n = 1000
    tiles = LabeledTileSet(EmbeddingMatrix([f"t{i}" for i in range(n)], rng.standard_normal((n, 8))),
                           np.arange(n) % 2)
    rep = mil.evaluate(p, bags, tiles, k=3)
    assert 0.4 <= rep.slide_auc <= 0.6
    assert 0.4 <= rep.tile_auc <= 0.6


def test_evaluate_identical_tile_scores():
    p = MilParams.init(4, 3)
    tiles = LabeledTileSet(EmbeddingMatrix(["a", "b", "c"], np.ones((3, 4))), [0, 1, 1])
    assert mil.evaluate(p, [], tiles, 2, strict=False).tile_auc == 0.5


def test_model_round_trip(tmp_path):
    p = MilParams.init(7, 5, seed=2)
    mil.save_model(p, tmp_path / "m.json", seed=2, k=4)
    q, meta = mil.load_model(tmp_path / "m.json")
    assert meta == {"dim": 7, "hidden": 5, "seed": 2, "k": 4}
    for (_, a), (_, b) in zip(p.items(), q.items()):
        assert a.tobytes() == b.tobytes()
