import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_gradient, loop_delta, ocq_phi, phi
from vqann.baselines import train_pq
from vqann.core import (CodebookSet, cross_term_delta, icm_encode_batch, quantization_error,
                        reconstruct)
from vqann.cq import (PenaltyObjective, TrainConfig, closed_form_update, default_mu_grid, encode,
                      orthogonality_residual, select_mu, train_cq, train_nocq, train_ocq,
                      update_epsilon)
from vqann.data import synth_mixture
from vqann.solvers import kmeans


def small_problem(seed, n=12, m=3, k=3, d=4):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, d)), rng.integers(0, k, (n, m)),
            rng.standard_normal((m, k, d)), rng)


def relative_gap(num, ana):
    return np.linalg.norm(num - ana) / max(np.linalg.norm(ana), 1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_near_gradient_matches_finite_differences(seed):
    x, codes, e, rng = small_problem(seed)
    mu, eps = rng.uniform(0.1, 2.0), float(rng.normal())
    obj = PenaltyObjective(x, codes, 3, 3, mu, eps, "near")
    val, grad = obj(e.ravel())
    assert val == pytest.approx(phi(e, x, codes, mu, eps), rel=1e-10)
    num = central_gradient(lambda t: phi(t.reshape(e.shape), x, codes, mu, eps), e.ravel())
    assert relative_gap(num, grad) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_orth_gradient_matches_finite_differences(seed):
    x, codes, e, rng = small_problem(seed)
    mu = rng.uniform(0.1, 2.0)
    obj = PenaltyObjective(x, codes, 3, 3, mu, 0.0, "orth")
    val, grad = obj(e.ravel())
    assert val == pytest.approx(ocq_phi(e, x, codes, mu), rel=1e-10)
    num = central_gradient(lambda t: ocq_phi(t.reshape(e.shape), x, codes, mu), e.ravel())
    assert relative_gap(num, grad) < 1e-4


@pytest.mark.parametrize("kind", ["near", "orth"])
def test_diag_hessian_matches_second_differences(kind):
    x, codes, e, rng = small_problem(11)
    obj = PenaltyObjective(x, codes, 3, 3, 0.7, 0.3, kind)
    theta = e.ravel()
    used = np.zeros(e.shape, bool)
    for m in range(3):
        used[m, np.unique(codes[:, m])] = True
    h = obj.diag_hessian(e)
    for i in np.flatnonzero(used.ravel()):
        step = np.zeros_like(theta)
        step[i] = 1e-4
        second = (obj.value(theta + step) - 2 * obj.value(theta) + obj.value(theta - step)) / 1e-8
        assert h[i] == pytest.approx(second, rel=1e-3)


def test_update_epsilon_examples():
    assert update_epsilon(train_pq(np.random.default_rng(0).standard_normal((30, 4)), 2, 3)[0],
                          np.zeros((5, 2), int)) == 0.0
    # one dictionary per axis: delta = 2 * a * b for the selected scalars
    e = np.array([[[0.5], [1.5]], [[1.0], [1.0]]])
    assert update_epsilon(e, np.array([[0, 0], [1, 1]])) == pytest.approx(2.0)
    _, codes, e, _ = small_problem(3)
    want = np.mean([loop_delta(e, c) for c in codes])
    assert update_epsilon(e, codes) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        update_epsilon(e, np.zeros((0, 3), int))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 10.0))
def test_epsilon_is_optimal_for_phi(seed, mu):
    x, codes, e, _ = small_problem(seed)
    eps = update_epsilon(e, codes)
    base = phi(e, x, codes, mu, eps)
    for factor in (0.9, 1.1):
        assert phi(e, x, codes, mu, eps * factor) >= base - 1e-9 * abs(base)


def test_pq_start_has_zero_penalties():
    x = synth_mixture(200, 8, 4, 0.2, 0).vectors
    cb, codes = train_pq(x, 2, 8)
    assert np.all(np.abs(cross_term_delta(cb, codes)) < 1e-12)
    assert orthogonality_residual(cb) == 0.0
    model = train_ocq(x, 2, 8, TrainConfig(mu=1.0, outer_iters=0))
    assert model.train_log[0] == pytest.approx(quantization_error(cb, codes, x))
    assert model.diagnostics["orth_residual_log"][0] == 0.0


@pytest.mark.parametrize("trainer,mu", [(train_cq, None), (train_nocq, 0.0), (train_nocq, 0.5),
                                        (train_ocq, 0.5)])
def test_objective_logs_nonincreasing(trainer, mu):
    x = synth_mixture(300, 8, 5, 0.2, 1)
    cfg = TrainConfig(mu=mu, outer_iters=8)
    model = trainer(x, 2, 8, cfg)
    log = np.array(model.train_log)
    assert np.all(np.diff(log) <= 1e-9 * np.abs(log[:-1]))
    assert log[-1] >= 0.0


def test_nocq_mu_zero_tracks_cq():
    x = synth_mixture(300, 8, 5, 0.2, 2)
    cq = train_cq(x, 2, 8, TrainConfig(outer_iters=6))
    nocq = train_nocq(x, 2, 8, TrainConfig(mu=0.0, outer_iters=6))
    np.testing.assert_allclose(nocq.train_log, cq.train_log, rtol=1e-12)
    assert nocq.epsilon == 0.0


def test_single_dictionary_cq_reaches_kmeans_quality():
    x = synth_mixture(400, 6, 8, 0.3, 3).vectors
    cq = train_cq(x, 1, 8, TrainConfig(outer_iters=200, c_update="closed_form", rel_tol=0.0))
    km = kmeans(x, 8, max_iters=500, seed=0)
    assert abs(quantization_error(cq.codebooks, cq.codes, x) - km.error) <= 1e-6 * km.error


def test_n_equals_k_single_dictionary_is_lossless():
    x = np.random.default_rng(4).standard_normal((6, 3))
    cq = train_cq(x, 1, 6, TrainConfig(outer_iters=3))
    assert quantization_error(cq.codebooks, cq.codes, x) < 1e-20


@pytest.mark.parametrize("seed", range(5))
def test_tiny_cq_no_worse_than_pq(seed):
    x = np.random.default_rng(seed).standard_normal((30, 4))
    cq = train_cq(x, 2, 3, TrainConfig(outer_iters=10, seed=seed))
    cb, codes = train_pq(x, 2, 3, seed=seed)
    assert quantization_error(cq.codebooks, cq.codes, x) <= quantization_error(cb, codes, x) + 1e-9


def test_closed_form_update_is_least_squares():
    x, codes, _, _ = small_problem(5, n=40)
    sol = closed_form_update(x, codes, 3)
    best = quantization_error(sol, codes, x)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert best <= quantization_error(sol + 0.01 * rng.standard_normal(sol.shape), codes, x)


def test_blockwise_updates_never_increase_phi():
    x = synth_mixture(200, 6, 4, 0.2, 6).vectors
    m, k, mu = 2, 6, 0.3
    cb, codes = train_pq(x, m, k)
    e = cb.elements + 0.05 * np.random.default_rng(0).standard_normal(cb.elements.shape)
    eps = update_epsilon(e, codes)
    start = phi(e, x, codes, mu, eps)
    codes2 = icm_encode_batch(e, x, mu, eps, codes, 1)
    after_icm = phi(e, x, codes2, mu, eps)
    eps2 = update_epsilon(e, codes2)
    after_eps = phi(e, x, codes2, mu, eps2)
    assert after_icm <= start + 1e-9 and after_eps <= after_icm + 1e-9


def test_default_mu_grid_contains_zero_and_scales():
    x = synth_mixture(200, 8, 4, 0.2, 7)
    cfg = TrainConfig(mu_scales=(1.0, 10.0))
    grid = default_mu_grid(x, 2, 8, cfg)
    assert grid[0] == 0.0 and grid[2] == pytest.approx(10 * grid[1])
    orth = default_mu_grid(x, 2, 8, cfg, "orth")
    assert orth[1] == pytest.approx(grid[1] * 200 / 64)


def test_select_mu_single_value_and_argmax():
    x = synth_mixture(400, 8, 5, 0.2, 8)
    assert select_mu(x, 2, 8, TrainConfig(mu_grid=[0.25])) == 0.25
    cfg = TrainConfig(mu_grid=[0.0, 1e6], outer_iters=3)
    best, scores = select_mu(x, 2, 8, cfg, return_scores=True)
    assert scores[best] == max(scores.values())
    assert best == min(mu for mu, s in scores.items() if s == scores[best])


def test_train_nocq_records_selection_and_dominates_zero():
    x = synth_mixture(500, 8, 5, 0.2, 9)
    model = train_nocq(x, 2, 8, TrainConfig(mu_scales=(0.1, 10.0), outer_iters=4))
    scores = {float(k): v for k, v in model.diagnostics["mu_selection"].items()}
    assert scores[model.mu] >= scores[0.0] - 1e-9


def test_encode_new_points_matches_training_quality():
    x = synth_mixture(400, 8, 5, 0.2, 10).vectors
    model = train_nocq(x, 2, 8, TrainConfig(mu=0.1, outer_iters=5))
    codes = encode(model, x)
    assert quantization_error(model.codebooks, codes, x) <= 1.05 * quantization_error(
        model.codebooks, model.codes, x)
    with pytest.raises(ValueError):
        encode(model, np.zeros((2, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mu=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


def test_reconstruction_of_trained_codes_is_consistent():
    x = synth_mixture(100, 4, 3, 0.2, 12).vectors
    model = train_cq(x, 2, 4, TrainConfig(outer_iters=3))
    assert isinstance(model.codebooks, CodebookSet)
    err = float(((x - reconstruct(model.codebooks, model.codes)) ** 2).sum())
    assert model.diagnostics["error_log"][-1] == pytest.approx(err, rel=1e-10)
