import math

import numpy as np
import pytest
from scipy import stats

from abshrink.core import ValidationError, two_sided_p
from abshrink.posteriors import Gaussian, Huber, Laplace, Mixture, StudentT, Zero, ZeroInflated
from abshrink.simlab import BLOCK, Scenario, builtin_case, generate, generate_arrays, sample_prior, snr_to_scale


class TestSnr:
    @pytest.mark.parametrize("snr,expected", [(0.1, 1e-7), (0.4, 4e-7), (10, 1e-5)])
    def test_examples(self, snr, expected):
        np.testing.assert_allclose(snr_to_scale(snr, 1_000_000, 1.0), expected, rtol=1e-14)

    def test_rejects(self):
        with pytest.raises(ValidationError):
            snr_to_scale(0.0, 1e6, 1.0)


class TestBuiltin:
    def test_cases(self):
        c1, c2, c3 = (builtin_case(i) for i in (1, 2, 3))
        assert isinstance(c1.prior, Gaussian) and c1.snr == 0.1
        assert isinstance(c2.prior, ZeroInflated) and c2.prior.p0 == 0.5 and c2.prior.base.df == 3 and c2.snr == 0.4
        assert c3.prior.p0 == 0.9 and c3.prior.base.df == 3 and c3.snr == 10
        # the t component carries the stated SNR at the reference size
        np.testing.assert_allclose(c2.prior.base.variance * c2.reference_n / c2.sigma2, 0.4)
        with pytest.raises(ValidationError):
            builtin_case(4)

    def test_overrides(self):
        assert builtin_case(1, n_train=5, seed=9).n_train == 5

    def test_scenario_validation(self):
        with pytest.raises(ValidationError):
            Scenario(prior=Zero(), snr=1.0, size_pool=((10, 0.5), (20, 0.6)))
        with pytest.raises(ValidationError):
            Scenario(prior=Zero(), snr=0.0)


class TestGenerate:
    def test_deterministic(self):
        sc = builtin_case(2, n_train=300, n_test=200, seed=7, aux_metrics=1)
        a, b = generate_arrays(sc, "test"), generate_arrays(sc, "test")
        for name in ("mu", "n_eff", "delta", "delta_a", "delta_b", "aux_delta"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        assert not np.array_equal(a.delta, generate_arrays(sc.with_(seed=8), "test").delta)
        assert not np.array_equal(generate_arrays(sc, "train").delta[:200], a.delta)

    def test_prefix_stable(self):
        # block substreams: complete blocks do not depend on the total size
        sc = builtin_case(1, n_train=3000, seed=1)
        short = generate_arrays(sc.with_(n_train=1500), "train")
        np.testing.assert_array_equal(generate_arrays(sc, "train").delta[:BLOCK], short.delta[:BLOCK])

    def test_zero_prior(self):
        d = generate_arrays(Scenario(prior=Zero(), snr=1.0, n_train=10_000, seed=3), "train")
        assert np.all(d.mu == 0)
        assert stats.kstest(d.delta / np.sqrt(d.se2), "norm").pvalue > 0.01

    def test_case1_selection_rates(self):
        d = generate_arrays(builtin_case(1, n_train=100_000, seed=4), "train")
        p = two_sided_p(d.delta, np.sqrt(d.se2))
        assert abs(np.mean(p < 0.05) - 0.152) <= 0.015
        assert abs(np.mean(p < 0.01) - 0.065) <= 0.01

    def test_split_consistency(self):
        d = generate_arrays(builtin_case(3, n_train=5000, seed=5), "train")
        np.testing.assert_allclose((d.delta_a + d.delta_b) / 2, d.delta, atol=1e-12 * np.max(np.abs(d.delta)))
        for p in d.pairs()[:50]:
            np.testing.assert_allclose(p.se2_a, 2 * p.full_se2)

    def test_noise_variance(self):
        sc = builtin_case(1, n_train=100_000, seed=6)
        d = generate_arrays(sc, "train")
        r = (d.delta - d.mu) ** 2 / d.se2
        assert abs(r.mean() - 1) < 3 * r.std(ddof=1) / math.sqrt(r.size)
        ra = (d.delta_a - d.mu) ** 2 / (2 * d.se2)
        assert abs(ra.mean() - 1) < 3 * ra.std(ddof=1) / math.sqrt(ra.size)

    def test_aux(self):
        d = generate_arrays(builtin_case(1, n_train=10_000, seed=7, aux_metrics=2), "train")
        assert d.aux_delta.shape == (2, 10_000)
        for m in range(2):
            e_main = (d.delta - d.mu) / np.sqrt(d.se2)
            e_aux = (d.aux_delta[m] - d.mu) / np.sqrt(d.se2)
            assert abs(np.corrcoef(e_main, e_aux)[0, 1]) <= 0.02

    def test_experiments(self):
        sc = builtin_case(1, n_train=20, n_test=10, seed=8, aux_metrics=1)
        train, test = generate(sc)
        assert len(train) == 20 and len(test) == 10
        e = train[0]
        arr = generate_arrays(sc, "train")
        assert e.mu_true == arr.mu[0]
        np.testing.assert_allclose(e.readout_full.se2, arr.se2[0], rtol=1e-12)
        assert e.split_pair.delta_a == arr.delta_a[0]
        assert set(e.aux) == {"aux1"}
        assert generate(sc.with_(split=False))[0][0].split_pair is None


class TestSamplePrior:
    @pytest.mark.parametrize("prior", [Gaussian(2.0), Laplace(2.0), StudentT(5.0, 2.0), Huber(1.0, 0.7),
                                       Mixture(0.2, 0.4, 0.4, 1.0, 3.0), ZeroInflated(0.3, Gaussian(2.0))],
                             ids=lambda p: p.kind)
    def test_variance(self, prior):
        x = sample_prior(prior, np.random.default_rng(0), 400_000)
        np.testing.assert_allclose(x.mean(), 0.0, atol=5 * math.sqrt(prior.variance / x.size) + 1e-3)
        np.testing.assert_allclose(x.var(), prior.variance, rtol=0.05)

    def test_huber_shape(self):
        prior = Huber(1.0, 0.7)
        x = sample_prior(prior, np.random.default_rng(1), 200_000)
        grid = np.linspace(-4, 4, 9)
        from scipy import integrate
        dens = lambda m: np.exp(np.where(abs(m) <= 0.7, -m * m / 2, (0.49 - 1.4 * abs(m)) / 2))
        z = integrate.quad(dens, -np.inf, np.inf)[0]
        ref = [integrate.quad(dens, -np.inf, g)[0] / z for g in grid]
        np.testing.assert_allclose([np.mean(x <= g) for g in grid], ref, atol=5e-3)
