import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varjoint.diagnostics import rhat, summarize
from varjoint.sampler import Draws


class TestRhat:
    def test_identical_constant_chains(self):
        assert rhat(np.full((3, 50), 2.5)) == 1.0

    def test_distinct_constant_chains(self):
        assert rhat(np.array([[1.0] * 20, [2.0] * 20])) == np.inf

    def test_converged(self):
        x = np.random.default_rng(0).normal(size=(3, 10_000))
        assert rhat(x) < 1.01

    def test_separated(self):
        rng = np.random.default_rng(1)
        x = np.vstack([rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)])
        assert rhat(x) > 2.0

    def test_closed_form(self):
        x = np.array([[0.0, 1.0] * 5, [1.0, 2.0] * 5])
        n = 10
        W = np.mean([np.var(c, ddof=1) for c in x])
        B = n * np.var(x.mean(axis=1), ddof=1)
        assert rhat(x) == pytest.approx(np.sqrt(((n - 1) / n * W + B / n) / W))

    @pytest.mark.parametrize("shape", [(1, 100), (3, 9)])
    def test_too_small(self, shape):
        with pytest.raises(ValueError):
            rhat(np.zeros(shape))

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(0.01, 100), b=st.floats(-100, 100))
    def test_affine_invariance(self, a, b):
        x = np.random.default_rng(2).normal(size=(3, 40))
        assert rhat(a * x + b) == pytest.approx(rhat(x), rel=1e-9)


class TestSummarize:
    def test_quantile_convention(self):
        # 2 chains x 10 draws = values 1..20; linear interpolation at 2.5% / 97.5%
        vals = np.arange(1.0, 21.0).reshape(2, 10, 1)
        s = summarize(vals, ["x"])["x"]
        assert s.lo95 == pytest.approx(1.475)
        assert s.hi95 == pytest.approx(19.525)
        assert s.mean == pytest.approx(10.5)
        assert s.n_draws == 20
        assert s.lo95 < s.hi95

    def test_draws_object_and_csv(self, tmp_path):
        rng = np.random.default_rng(3)
        d = Draws(["a", "b"], rng.normal(size=(3, 20, 2)), np.arange(20))
        summ = summarize(d)
        assert list(summ) == ["a", "b"]
        assert summ.max_rhat() == max(summ["a"].rhat, summ["b"].rhat)
        summ.to_csv(tmp_path / "s.csv", "config_hash: x")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "# config_hash: x"
        assert lines[1] == "parameter,mean,sd,lo95,hi95,rhat"
        assert len(lines) == 4

    def test_single_chain_has_nan_rhat(self):
        s = summarize(np.zeros((1, 50, 1)) + np.arange(50)[None, :, None], ["x"])
        assert np.isnan(s["x"].rhat)
