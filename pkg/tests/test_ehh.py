import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwltsc import ehh
from pwltsc.ehh import (
    EhhNetwork,
    LinearEhh,
    anova_decompose,
    ehh_forward,
    ehh_generate,
    ehh_train,
    fit_linear_ehh,
    importance_inverse,
    regression_basis,
)
from pwltsc.errors import ConfigError, DataError, ShapeError, SingularityError
from pwltsc.pwlnet import brelu_bias_grid, segment_check

from oracles import anova_reference, central_fd, ehh_node_values, param_fd, rel_err


def random_ehh(rng, M, n_out=1, cap=None):
    grid = brelu_bias_grid(1.0, 0.0, dim=M)
    net = ehh_generate(M, grid, P=2, cap=cap, rng=rng, n_out=n_out)
    net.alpha = rng.normal(size=net.alpha.shape)
    net.alpha0 = rng.normal(size=n_out)
    return net


def test_generate_counts():
    net = ehh_generate(2, [[0.0, 1.0], [0.0, 1.0]], cap=None)
    assert net.n_sources == 4 and len(net.min_nodes) == 4
    assert len(ehh_generate(1, [[0.0, 1.0, 2.0]]).min_nodes) == 0
    net3 = ehh_generate(3, [[0.0], [0.0], [0.0]], cap=2, rng=np.random.default_rng(0))
    assert net3.n_sources == 3 and len(net3.min_nodes) == 2
    assert np.all(net.alpha == 0)


def test_generate_rejects_negative_cap():
    with pytest.raises(ConfigError):
        ehh_generate(2, [[0.0], [0.0]], cap=-1)


def test_min_nodes_use_distinct_dimensions():
    net = random_ehh(np.random.default_rng(0), 4)
    for k in range(len(net.min_nodes)):
        dims = net.node_dims(net.n_sources + k)
        assert len(set(dims)) == 2
    with pytest.raises(ShapeError):
        EhhNetwork(2, [0, 0], [0.0, 1.0], [(0, 1)], np.zeros(3), [0.0])


def test_forward_examples():
    one = EhhNetwork(1, [0], [0.0], [], [[1.0]], [0.0])
    assert ehh_forward(one, np.array([[2.0]]))[0, 0] == 2.0
    pair = EhhNetwork(2, [0, 1], [0.0, 0.0], [(0, 1)], [[0.0], [0.0], [1.0]], [0.0])
    assert pair.forward(np.array([[2.0, 1.0]]))[0, 0] == 1.0
    assert pair.forward(np.array([[2.0, -1.0]]))[0, 0] == 0.0
    const = EhhNetwork(2, [0, 1], [0.0, 0.0], [(0, 1)], np.zeros((3, 1)), [3.5])
    assert np.all(const.forward(np.random.default_rng(0).normal(size=(7, 2))) == 3.5)
    with pytest.raises(ShapeError):
        one.forward(np.zeros((1, 2)))


def test_forward_matches_definition():
    rng = np.random.default_rng(4)
    net = random_ehh(rng, 3)
    for x in rng.normal(size=(10, 3)):
        z = ehh_node_values(net, x)
        ref = net.alpha0[0] + sum(a * v for a, v in zip(net.alpha[:, 0], z))
        assert net.forward(x[None])[0, 0] == pytest.approx(ref, abs=1e-12)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    done = 0
    while done < 10:
        net = random_ehh(rng, 3, n_out=2)
        X = rng.normal(size=(4, 3))
        gaps = np.abs(X[:, net.src_dim] - net.src_bias)
        if gaps.min() < 1e-3:
            continue
        C = rng.normal(size=(4, 2))
        g, dX = net.backward(X, C)
        loss = lambda: float(np.sum(C * net.forward(X)))  # noqa: E731
        assert rel_err(g["alpha"], param_fd(loss, net.alpha)) < 1e-4
        assert rel_err(g["alpha0"], param_fd(loss, net.alpha0)) < 1e-4
        fd = central_fd(lambda Z: float(np.sum(C * net.forward(Z))), X)
        assert rel_err(dX, fd) < 1e-4
        done += 1


def test_train_recovers_generating_network():
    rng = np.random.default_rng(1)
    true = random_ehh(rng, 2)
    X = rng.normal(size=(200, 2))
    Y = true.forward(X)
    fit = ehh_generate(2, brelu_bias_grid(1.0, 0.0, dim=2), rng=rng)
    ehh_train(fit, X, Y, lam=0.0)
    assert np.mean((fit.forward(X) - Y) ** 2) <= 1e-6


def test_train_large_penalty_gives_mean():
    rng = np.random.default_rng(2)
    net = random_ehh(rng, 2)
    X = rng.normal(size=(50, 2))
    Y = rng.normal(size=(50, 1))
    ehh_train(net, X, Y, lam=1e6)
    assert np.all(np.abs(net.alpha) < 1e-12)
    np.testing.assert_allclose(net.forward(X), Y.mean(), atol=1e-12)


def test_train_single_sample_interpolates():
    net = ehh_generate(2, [[0.0], [0.0]])
    ehh_train(net, np.array([[1.0, 2.0]]), np.array([[3.0]]), lam=0.0)
    assert net.forward(np.array([[1.0, 2.0]]))[0, 0] == pytest.approx(3.0, abs=1e-12)


def test_train_empty_dataset():
    with pytest.raises(DataError):
        ehh_train(ehh_generate(1, [[0.0]]), np.zeros((0, 1)), np.zeros((0, 1)))


def test_sparsity_monotone_in_penalty():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(150, 3))
    Y = np.maximum(0, X[:, :1]) - 0.5 * np.minimum(np.maximum(0, X[:, 1:2]), np.maximum(0, X[:, 2:3] + 1))
    Y = Y + 0.05 * rng.normal(size=Y.shape)
    counts = []
    for lam in [1e-4, 1e-3, 1e-2, 1e-1, 1.0]:
        net = ehh_generate(3, brelu_bias_grid(1.0, 0.0, dim=3), cap=30, rng=np.random.default_rng(0))
        ehh_train(net, X, Y, lam)
        counts.append(net.nonzero_weights())
    assert all(b <= a for a, b in zip(counts, counts[1:])), counts


def test_anova_zero_weights():
    net = ehh_generate(2, [[0.0], [0.0]])
    rep = anova_decompose(net, np.random.default_rng(0).normal(size=(10, 2)))
    assert np.all(rep.main == 0) and all(v == 0 for v in rep.pairs.values())


def test_anova_three_point_example():
    net = EhhNetwork(2, [0, 1], [0.0, 0.0], [], [[1.0], [0.0]], [0.0])
    X = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    rep = anova_decompose(net, X)
    # oracle: population std of {0, 0, 1}
    mu = 1 / 3
    expected = math.sqrt(((0 - mu) ** 2 * 2 + (1 - mu) ** 2) / 3)
    assert rep.main[0] == pytest.approx(expected, abs=1e-15)
    assert rep.main[0] == pytest.approx(math.sqrt(2 / 9), abs=1e-12)
    assert rep.main[1] == 0.0


def test_anova_duplication_invariance():
    rng = np.random.default_rng(5)
    net = random_ehh(rng, 3)
    X = rng.normal(size=(12, 3))
    a = anova_decompose(net, X)
    b = anova_decompose(net, np.vstack([X, X]))
    np.testing.assert_allclose(a.main, b.main, atol=1e-12)


def test_anova_empty_and_high_order():
    net = ehh_generate(3, [[0.0], [0.0], [0.0]], P=3)
    with pytest.raises(ConfigError):
        anova_decompose(net, np.zeros((2, 3)))
    with pytest.raises(DataError):
        anova_decompose(ehh_generate(1, [[0.0]]), np.zeros((0, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 20), st.integers(0, 10_000))
def test_anova_matches_brute_force(M, n, seed):
    rng = np.random.default_rng(seed)
    net = random_ehh(rng, M, cap=6)
    X = rng.normal(size=(n, M)) * 1.5
    rep = anova_decompose(net, X)
    terms, sig = anova_reference(net, X)
    for m in range(M):
        assert abs(rep.main[m] - sig.get((m,), 0.0)) <= 1e-10
    for key, s in rep.pairs.items():
        assert abs(s - sig[key]) <= 1e-10
    # completeness: every node belongs to exactly one term
    total = rep.terms_main.sum(axis=1)[:, 0] + sum(v[:, 0] for v in rep.terms_pair.values())
    np.testing.assert_allclose(total, net.forward(X)[:, 0] - net.alpha0[0], atol=1e-9)


def test_per_component_half_split():
    rep = ehh.AnovaReport(np.array([1.0, 2.0, 0.0]), {(0, 2): 4.0}, None, {})
    np.testing.assert_allclose(rep.per_component, [3.0, 2.0, 2.0])


def test_anova_csv(tmp_path):
    net = random_ehh(np.random.default_rng(0), 2)
    rep = anova_decompose(net, np.random.default_rng(1).normal(size=(5, 2)))
    rep.write_csv(tmp_path / "a.csv", ["u", "v"])
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "component,sigma" and lines[1].startswith("u,") and lines[-1].startswith("u:v,")


def test_inverse_examples():
    np.testing.assert_array_equal(importance_inverse(np.eye(3), np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(importance_inverse(2 * np.eye(2), np.array([1.0, 1.0])), [0.5, 0.5])
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    s_in = rng.uniform(0.5, 1.0, size=4)
    s = W @ s_in
    np.testing.assert_allclose(W @ importance_inverse(W, s), s, atol=1e-9)


def test_inverse_clamps_negatives_and_counts():
    before = ehh.counters["clamped_entries"]
    out = importance_inverse(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([1.0, 1.0]))
    assert out.tolist() == [0.0, 1.0]
    assert ehh.counters["clamped_entries"] == before + 1


def test_inverse_rank_deficient_names_columns():
    W = np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]])
    with pytest.raises(SingularityError) as exc:
        importance_inverse(W, np.ones(3))
    assert exc.value.columns


def test_ehh_is_continuous_piecewise_linear():
    rng = np.random.default_rng(12)
    net = random_ehh(rng, 3)
    for _ in range(20):
        a, b = rng.normal(size=3) * 2, rng.normal(size=3) * 2
        c = segment_check(net.forward, a, b, 1001, net.activation_pattern)
        f = segment_check(net.forward, a, b, 10001, net.activation_pattern)
        assert c["max_second_diff"] <= 1e-9
        assert f["max_jump"] <= 0.2 * c["max_jump"] + 1e-12


def test_checkpoint_round_trip():
    net = random_ehh(np.random.default_rng(6), 3, n_out=2, cap=5)
    back = EhhNetwork.from_dict(net.to_dict())
    X = np.random.default_rng(0).normal(size=(6, 3))
    assert np.array_equal(net.forward(X), back.forward(X))
    assert set(net.to_dict()) >= {"M", "bias_lists", "source_nodes", "min_nodes", "alpha", "alpha0"}


def test_regression_basis_is_orthonormal_and_spans_ols():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 6))
    Y = X @ rng.normal(size=(6, 2))
    W = regression_basis(X, Y, 4)
    np.testing.assert_allclose(W @ W.T, np.eye(4), atol=1e-10)
    B = np.linalg.lstsq(X, Y, rcond=None)[0]
    np.testing.assert_allclose(W.T @ (W @ B), B, atol=1e-8)


def test_fit_linear_ehh_learns_and_is_deterministic():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 5))
    Y = np.maximum(0, X[:, :1] + X[:, 1:2]) + 0.1 * X[:, 2:3]
    a = fit_linear_ehh(X, Y, 3, 1e-4, np.random.default_rng(0), steps=50)
    b = fit_linear_ehh(X, Y, 3, 1e-4, np.random.default_rng(0), steps=50)
    assert np.array_equal(a.predict(X), b.predict(X))
    r2 = 1 - np.sum((a.predict(X) - Y) ** 2) / np.sum((Y - Y.mean()) ** 2)
    assert r2 > 0.9
    back = LinearEhh.from_dict(a.to_dict())
    assert np.array_equal(back.predict(X), a.predict(X))
