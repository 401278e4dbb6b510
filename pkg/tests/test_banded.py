import numpy as np
import pytest

from varjoint._banded import back_solve_all, factor_all, marginal_terms
from varjoint.likelihood import loglik_subject_marginal
from varjoint.sampler import GibbsSampler
from varjoint.stacked import StackedData

LOG_2PI = np.log(2 * np.pi)


@pytest.fixture(scope="module")
def fixture():
    from varjoint.simulate import setting_truth, simulate_dataset
    truth = setting_truth(2, n_subjects=5, n_obs=60)
    ds, _ = simulate_dataset(truth, np.random.default_rng(3))
    return ds, StackedData(ds)


def test_gram_is_banded(fixture):
    _, st = fixture
    G = st.whitened_gram(np.ones((st.N, st.R)), np.full(st.N, 0.9))[:, :st.L, :st.L]
    h = st.bandwidth
    i, j = np.indices((st.L, st.L))
    assert np.all(G[:, np.abs(i - j) > h] == 0.0)
    assert h == st.degree + 1


def test_factor_matches_dense(fixture):
    _, st = fixture
    rng = np.random.default_rng(0)
    w = np.exp(rng.normal(size=(st.N, st.R)))
    rho = rng.uniform(0.2, 0.99, st.N)
    pp = np.exp(rng.normal(size=(st.N, st.L)))
    chol, v, sc, logdet = factor_all(st.band, st.border, st.scal, w, rho, pp)
    G = st.whitened_gram(w, rho)
    for i in range(st.N):
        P = G[i, :st.L, :st.L] + np.diag(pp[i])
        C = np.linalg.cholesky(P)
        assert logdet[i] == pytest.approx(2 * np.sum(np.log(np.diag(C))), rel=1e-12)
        ref = np.linalg.solve(C, G[i, :st.L, st.L:])
        np.testing.assert_allclose(v[i], ref, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(sc[i], [G[i, st.L, st.L], G[i, st.L, st.L + 1],
                                           G[i, st.L + 1, st.L + 1]], rtol=1e-12)
        rhs = rng.normal(size=st.L)
        x = back_solve_all(chol[i:i + 1], rhs[None, :].copy())[0]
        np.testing.assert_allclose(C.T @ x, rhs, rtol=1e-10, atol=1e-10)


def test_not_positive_definite_gives_nan(fixture):
    _, st = fixture
    w = np.ones((st.N, st.R))
    pp = np.full((st.N, st.L), -1e6)
    _, logdet = marginal_terms(st.band, st.border, st.scal, w, np.full(st.N, 0.5), pp, 0.0)
    assert np.all(np.isnan(logdet))


def test_sampler_marginal_matches_dense_oracle(fixture):
    ds, _ = fixture
    sm = GibbsSampler(ds, rng=0)
    state = sm.initial_state()
    rng = np.random.default_rng(1)
    state.log_sigma2_b[:] = rng.normal(4.0, 1.0, state.log_sigma2_b.shape)
    state.log_sigma2_w[:] = rng.normal(1.0, 0.5, state.log_sigma2_w.shape)
    state.rho[:] = rng.uniform(0.3, 0.99, state.rho.shape)
    marg = sm.marginal_loglik(state)
    for i, s in enumerate(ds.subjects):
        ref = loglik_subject_marginal(s, ds.basis, state.subject(i), state.beta0)
        assert marg[i] - 0.5 * s.n_obs * LOG_2PI == pytest.approx(ref, abs=1e-8, rel=1e-11)
    fac = sm.factorize(state)
    np.testing.assert_allclose(sm.marginal_from_factor(state, fac), marg, rtol=1e-11)
