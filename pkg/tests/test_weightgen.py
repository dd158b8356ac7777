
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcases import worst_error
from mlwc.weightgen import (
    AttGenConfig,
    AttGenParams,
    DegeneratePrototypeError,
    att_gen,
    att_gen_matrix,
    att_gen_train,
    avg_gen,
    avg_gen_matrix,
    episode_accuracy,
)


def _oracle(support):
    rows = [f / np.sqrt(sum(x * x for x in f)) for f in support]
    mean = sum(rows) / len(rows)
    return mean / np.sqrt(sum(x * x for x in mean))


def test_single_shot_is_normalized_feature():
    f = np.array([[3.0, 0.0, 4.0]])
    np.testing.assert_allclose(avg_gen(f), [0.6, 0.0, 0.8], atol=1e-15)


def test_antipodal_support_is_degenerate():
    with pytest.raises(DegeneratePrototypeError, match="cancel"):
        avg_gen(np.array([[1.0, 0.0], [-1.0, 0.0]]), "x")
    with pytest.raises(DegeneratePrototypeError):
        avg_gen(np.zeros((1, 3)))


@given(st.integers(0, 100_000))
def test_matches_independent_oracle(seed):
    support = np.random.default_rng(seed).standard_normal((5, 6))
    assert np.max(np.abs(avg_gen(support) - _oracle(support))) <= 1e-12


@given(st.integers(0, 100_000), st.lists(st.floats(1e-3, 1e3), min_size=4, max_size=4))
def test_unit_norm_permutation_and_scale_invariance(seed, scales):
    rng = np.random.default_rng(seed)
    support = rng.standard_normal((4, 5))
    w = avg_gen(support)
    assert abs(np.linalg.norm(w) - 1) < 1e-12
    np.testing.assert_allclose(avg_gen(support[rng.permutation(4)]), w, atol=1e-12)
    np.testing.assert_allclose(avg_gen(support * np.array(scales)[:, None]), w, atol=1e-12)


def test_matrix_stacks_columns():
    support = np.random.default_rng(0).standard_normal((3, 2, 4))
    w = avg_gen_matrix(support)
    assert w.shape == (4, 3)
    np.testing.assert_allclose(w[:, 1], avg_gen(support[1]))


def _params(rng, d=4, kb=5):
    base = rng.standard_normal((d, kb))
    return base, AttGenParams.init(base)


def test_zero_attention_gate_is_avg_path():
    rng = np.random.default_rng(0)
    base, params = _params(rng)
    support = rng.standard_normal((3, 4))
    w, _ = att_gen(support, base, params, normalize=False)
    unit = support / np.linalg.norm(support, axis=1, keepdims=True)
    np.testing.assert_allclose(w, unit.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(att_gen(support, base, params)[0], avg_gen(support), atol=1e-12)


@given(st.integers(0, 100_000))
def test_attention_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    base, params = _params(rng)
    params.phi_q = rng.standard_normal((4, 4))
    _, att = att_gen_matrix(rng.standard_normal((2, 3, 4)), base, params, allowed=np.array([0, 1, 3]))
    assert att.shape == (2, 3, 3)
    assert np.all(att >= 0) and np.max(np.abs(att.sum(-1) - 1)) <= 1e-12


def test_hard_attention_limit():
    rng = np.random.default_rng(1)
    base, params = _params(rng)
    z = rng.standard_normal(4)
    params.keys[2] = z / np.linalg.norm(z)  # phi_q is the identity at init
    params.phi_avg = np.zeros(4)
    params.phi_att = np.ones(4)
    params.att_scale = 1e4
    w, att = att_gen(z[None], base, params, normalize=False)
    np.testing.assert_allclose(att[0, 2], 1.0, atol=1e-9)
    np.testing.assert_allclose(w, base[:, 2] / np.linalg.norm(base[:, 2]), atol=1e-9)


def _clusters(seed=0, n_classes=10, per_class=12, d=6):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, d))
    labels = np.repeat(np.arange(n_classes), per_class)
    feats = centers[labels] + 0.8 * rng.standard_normal((len(labels), d))
    base = centers.T + 0.1 * rng.standard_normal((d, n_classes))
    return feats, labels, base


def test_zero_lr_keeps_params_and_matches_avg():
    feats, labels, base = _clusters()
    cfg = AttGenConfig(episodes=20, lr=0.0, eval_episodes=50)
    init = AttGenParams.init(base)
    trained, history = att_gen_train(feats, labels, base, init, cfg)
    assert len(history) == 20
    for a, b in zip(trained.as_dict("p").values(), init.as_dict("p").values()):
        assert np.array_equal(a, b)
    assert episode_accuracy(feats, labels, base, trained, cfg, 0) == episode_accuracy(feats, labels, base, None, cfg, 0)


def test_training_deterministic_and_not_worse():
    feats, labels, base = _clusters(1)
    cfg = AttGenConfig(episodes=150, eval_episodes=200)
    a, _ = att_gen_train(feats, labels, base, AttGenParams.init(base), cfg)
    b, _ = att_gen_train(feats, labels, base, AttGenParams.init(base), cfg)
    for x, y in zip(a.as_dict("p").values(), b.as_dict("p").values()):
        assert np.array_equal(x, y)
    avg = episode_accuracy(feats, labels, base, None, cfg, 5)
    att = episode_accuracy(feats, labels, base, a, cfg, 5)
    assert att >= avg - 0.5


def test_n_way_must_leave_classes_to_attend():
    feats, labels, base = _clusters(n_classes=4)
    with pytest.raises(ValueError):
        att_gen_train(feats, labels, base, AttGenParams.init(base), AttGenConfig(n_way=4))


def test_params_dict_round_trip():
    _, params = _params(np.random.default_rng(0))
    back = AttGenParams.from_dict(params.as_dict("x"), "x")
    assert all(np.array_equal(u, v) for u, v in zip(back.as_dict("x").values(), params.as_dict("x").values()))


def test_attgen_gradients():
    assert worst_error("attgen", points=20) <= 1e-4
