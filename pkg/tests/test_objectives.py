import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bhivae import ndgrad as G
from bhivae.nn import DenseParams, MlpSpec, init_mlp
from bhivae.objectives import (
    BlockPrior,
    LossWeights,
    discriminator_losses,
    kl_diag_gaussian_to_standard,
    kl_standard_to_block_prior,
    max_entropy_erasure,
    permute_joint,
    probe_loss,
    reconstruction_loss,
    sample_prior,
    supervised_layer_loss,
    tc_estimate,
    total_supervised_loss,
    total_unsupervised_loss,
)

LN3 = np.log(3.0)
KL_BLOCK_05 = 0.1894922971074428  # 0.5 * (8/3 - 2 + ln 0.75)
MI_05 = 0.14384103622589045  # -0.5 * ln(1 - 0.25)


def zero_classifier(n_in, n_out):
    return [DenseParams(np.zeros((n_in, n_out)), np.zeros(n_out))]


def gaussian_log_ratio(z, rho):
    """log p(s, h) - log p(s) - log p(h) for a unit-variance bivariate normal."""
    s, h = z[:, 0], z[:, 1]
    q = 1 - rho**2
    return -0.5 * np.log(q) - (rho**2 * s**2 - 2 * rho * s * h + rho**2 * h**2) / (2 * q)


class TestDiagonalKL:
    def test_identical_is_zero(self):
        assert kl_diag_gaussian_to_standard(np.zeros((3, 4)), np.zeros((3, 4))).value == 0.0

    def test_shifted_mean(self):
        assert kl_diag_gaussian_to_standard([[1.0]], [[0.0]]).value == pytest.approx(0.5, abs=1e-15)

    def test_variance_two(self):
        kl = kl_diag_gaussian_to_standard([[0.0]], [[np.log(2.0)]]).value
        assert kl == pytest.approx(0.1534264097200273, rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
        arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
    )
    def test_non_negative(self, mu, lv):
        kl = kl_diag_gaussian_to_standard(mu, lv).value
        assert kl >= -1e-12
        if np.all(mu == 0) and np.all(lv == 0):
            assert abs(kl) < 1e-10


class TestBlockPrior:
    def test_displayed_covariance(self):
        cov = BlockPrior((2, 2), 3, 0.5).covariance
        assert cov.shape == (7, 7)
        np.testing.assert_array_equal(cov[:2, :2], [[1, 0.5], [0.5, 1]])
        np.testing.assert_array_equal(cov[4:, 4:], np.eye(3))
        assert cov[1, 2] == 0.0
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_rejects_bad_rho(self):
        with pytest.raises(ValueError):
            BlockPrior((2,), 1, 1.0)

    def test_kl_zero_when_independent(self):
        assert kl_standard_to_block_prior(BlockPrior((2, 2), 2, 0.0)) == pytest.approx(0.0, abs=1e-15)

    def test_kl_single_block(self):
        assert kl_standard_to_block_prior(BlockPrior((2,), 0, 0.5)) == pytest.approx(KL_BLOCK_05, rel=1e-12)

    def test_kl_adds_over_blocks(self):
        assert kl_standard_to_block_prior(BlockPrior((2, 2, 2), 0, 0.5)) == pytest.approx(3 * KL_BLOCK_05, rel=1e-12)

    @pytest.mark.parametrize("rho", [0.0, 0.3, 0.5, 0.8])
    def test_kl_matches_monte_carlo(self, rho):
        prior = BlockPrior((2,), 0, rho)
        x = np.random.default_rng(11).standard_normal((1_000_000, 2))
        log_q = -0.5 * (x**2).sum(axis=1) - np.log(2 * np.pi)
        ratio = log_q - prior.log_density(x)
        tol = max(0.005, 4 * ratio.std() / np.sqrt(len(ratio)))
        assert abs(ratio.mean() - kl_standard_to_block_prior(prior)) < tol

    def test_sampling_is_seeded(self):
        prior = BlockPrior((2,), 2, 0.5)
        np.testing.assert_array_equal(sample_prior(prior, 10, 3), sample_prior(prior, 10, 3))

    def test_sample_correlations(self):
        z = sample_prior(BlockPrior((2,), 2, 0.5), 100_000, 0)
        c = np.corrcoef(z, rowvar=False)
        assert abs(c[0, 1] - 0.5) < 0.01
        assert np.all(np.abs(c[:2, 2:]) < 0.01)
        z0 = sample_prior(BlockPrior((2,), 0, 0.0), 100_000, 1)
        assert abs(np.corrcoef(z0, rowvar=False)[0, 1]) < 0.01


class TestSupervisedTerms:
    def test_beta_zero_is_kl(self):
        mu, lv = np.array([[0.3, -0.2]]), np.array([[0.1, 0.4]])
        loss = supervised_layer_loss(mu, lv, mu, [1], zero_classifier(2, 3), 0.0).value
        assert loss == kl_diag_gaussian_to_standard(mu, lv).value

    def test_uniform_classifier(self):
        z = np.zeros((4, 2))
        loss = supervised_layer_loss(z, z, z, [0, 1, 2, 0], zero_classifier(2, 3), 10.0).value
        assert loss == pytest.approx(10 * LN3, rel=1e-12)

    def test_confident_classifier_vanishes(self):
        cls = [DenseParams(np.zeros((2, 3)), np.array([80.0, 0.0, 0.0]))]
        z = np.zeros((2, 2))
        assert supervised_layer_loss(z, z, z, [0, 0], cls, 10.0).value < 1e-30

    def test_erasure_values(self):
        h = np.random.default_rng(0).normal(size=(5, 4))
        proj = init_mlp(MlpSpec((4, 2)), 0)
        assert max_entropy_erasure(h, zero_classifier(2, 3), proj).value == pytest.approx(-LN3, rel=1e-12)
        confident = [DenseParams(np.zeros((2, 3)), np.array([80.0, 0.0, 0.0]))]
        assert max_entropy_erasure(h, confident, proj).value > -1e-30

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)), st.integers(0, 100))
    def test_erasure_range(self, h, seed):
        cls = init_mlp(MlpSpec((2, 5, 3)), seed)
        proj = init_mlp(MlpSpec((3, 2)), seed + 1)
        e = max_entropy_erasure(h, cls, proj).value
        assert -LN3 - 1e-12 <= e <= 1e-12

    def test_erasure_gradient_stops_at_classifier_and_projection(self):
        rng = np.random.default_rng(0)
        h = G.variable(rng.normal(size=(6, 3)))
        cls = [DenseParams(G.variable(l.weight), G.variable(l.bias)) for l in init_mlp(MlpSpec((2, 4, 3)), 1)]
        proj = [DenseParams(G.variable(l.weight), G.variable(l.bias)) for l in init_mlp(MlpSpec((3, 2)), 2)]
        e = max_entropy_erasure(h, cls, proj)
        leaves = [t for l in cls + proj for t in (l.weight, l.bias)]
        grads = G.backward(e, [h] + leaves)
        assert np.abs(grads[0]).sum() > 0
        for g in grads[1:]:
            assert np.all(g == 0.0)

    def test_probe_trains_projection_only(self):
        rng = np.random.default_rng(0)
        h = G.variable(rng.normal(size=(6, 3)))
        cls = [DenseParams(G.variable(l.weight), G.variable(l.bias)) for l in init_mlp(MlpSpec((2, 3)), 1)]
        proj = [DenseParams(G.variable(l.weight), G.variable(l.bias)) for l in init_mlp(MlpSpec((3, 2)), 2)]
        loss = probe_loss(h, [0, 1, 2, 0, 1, 2], cls, proj)
        gh, gcw, gcb, gpw, gpb = G.backward(loss, [h, cls[0].weight, cls[0].bias, proj[0].weight, proj[0].bias])
        assert np.all(gh == 0) and np.all(gcw == 0) and np.all(gcb == 0)
        assert np.abs(gpw).sum() > 0

    def test_total_arithmetic(self):
        w = LossWeights(beta=10.0, gamma=3.0)
        assert total_supervised_loss([2.0, 2.0, 2.0], [-0.5] * 3, w).value == pytest.approx(3 * (2.0 + 3 * -0.5))
        assert total_supervised_loss([1.0, 2.0], [5.0, 5.0], LossWeights(10.0, 0.0)).value == 3.0

    def test_total_at_minima(self):
        # classification bound at 0, erasure at -ln n, plus the reconstruction floor
        w = LossWeights(beta=10.0, gamma=3.0)
        total = total_supervised_loss([0.0], [-np.log(4)], w, recon=0.2).value
        assert total == pytest.approx(-3 * np.log(4) + 10 * 0.2)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-1.0)


class TestPermutation:
    def test_two_rows_repair(self):
        s, h = np.array([[1.0], [2.0]]), np.array([[10.0], [20.0]])
        seen = set()
        for seed in range(20):
            out = permute_joint(s, h, seed)
            seen.add(tuple(map(tuple, out)))
        assert ((1.0, 20.0), (2.0, 10.0)) in seen or ((2.0, 10.0), (1.0, 20.0)) in seen

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 10_000))
    def test_marginals_preserved(self, n, seed):
        rng = np.random.default_rng(seed)
        s, h = rng.normal(size=(n, 2)), rng.normal(size=(n, 3))
        out = permute_joint(s, h, seed)
        np.testing.assert_array_equal(np.sort(out[:, :2], axis=0), np.sort(s, axis=0))
        np.testing.assert_array_equal(np.sort(out[:, 2:], axis=0), np.sort(h, axis=0))

    def test_decorrelates(self):
        z = sample_prior(BlockPrior((2,), 0, 0.5), 10_000, 5)
        out = permute_joint(z[:, :1], z[:, 1:], 6)
        assert abs(np.corrcoef(out, rowvar=False)[0, 1]) <= 3 / np.sqrt(10_000)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            permute_joint(np.ones((1, 2)), np.ones((1, 2)), 0)


class TestTotalCorrelation:
    def test_half_probability_is_zero(self):
        assert tc_estimate(lambda z: np.full(len(z), 0.5), np.zeros((7, 2))).value == 0.0

    def test_constant_logit_one(self):
        d = 1 / (1 + np.exp(-1.0))
        assert tc_estimate(lambda z: np.full(len(z), d), np.zeros((5, 2))).value == pytest.approx(1.0, rel=1e-12)

    def test_rejects_non_probability(self):
        with pytest.raises(ValueError):
            tc_estimate(lambda z: np.full(len(z), 1.5), np.zeros((2, 2)))

    def test_optimal_discriminator_recovers_mutual_information(self):
        z = sample_prior(BlockPrior((2,), 0, 0.5), 100_000, 9)
        optimal = lambda b: 1 / (1 + np.exp(-gaussian_log_ratio(b, 0.5)))  # noqa: E731
        est = tc_estimate(optimal, z).value
        assert abs(est - MI_05) / MI_05 < 0.05


class TestAdversarialTerms:
    def test_uninformative_discriminator(self):
        disc = zero_classifier(4, 3)
        z = np.random.default_rng(0).normal(size=(8, 4))
        terms = discriminator_losses(disc, z, z, z)
        assert terms.disc_loss.value == pytest.approx(LN3, rel=1e-12)
        assert terms.gen_kl.value == 0.0 and terms.gen_tc.value == 0.0

    def test_analytic_discriminator_on_matched_posterior(self):
        rho = 0.5
        prior = BlockPrior((1,), 1, 0.0)
        posterior = BlockPrior((2,), 0, rho)

        def logits(z):
            z = z.value if isinstance(z, G.Tensor) else np.asarray(z)
            lp = posterior.log_density(z)
            return G.constant(np.stack([lp, lp, prior.log_density(z)], axis=1))

        z = sample_prior(posterior, 100_000, 2)
        perm = permute_joint(z[:, :1], z[:, 1:], 3)
        terms = discriminator_losses(logits, z, sample_prior(posterior, 100_000, 4), perm)
        assert terms.gen_kl.value == 0.0
        assert abs(terms.gen_tc.value - MI_05) / MI_05 < 0.05

    def test_gradients_are_routed(self):
        rng = np.random.default_rng(0)
        z = G.variable(rng.normal(size=(6, 3)))
        disc = [DenseParams(G.variable(l.weight), G.variable(l.bias)) for l in init_mlp(MlpSpec((3, 5, 3)), 0)]
        leaves = [t for l in disc for t in (l.weight, l.bias)]
        terms = discriminator_losses(disc, z, rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
        g = G.backward(terms.disc_loss, [z] + leaves)
        assert np.all(g[0] == 0) and any(np.abs(x).sum() > 0 for x in g[1:])
        for term in (terms.gen_kl, terms.gen_tc):
            g = G.backward(term, [z] + leaves)
            assert np.abs(g[0]).sum() > 0 and all(np.all(x == 0) for x in g[1:])


class TestReconstruction:
    def test_perfect(self):
        x = np.array([[0.0, 1.0, 1.0, 0.0]])
        assert reconstruction_loss(x, x).value < 1e-5

    def test_half(self):
        x = np.random.default_rng(0).integers(0, 2, size=(3, 16)).astype(float)
        assert reconstruction_loss(x, np.full_like(x, 0.5)).value == pytest.approx(16 * np.log(2), rel=1e-12)

    def test_single_pixel(self):
        assert reconstruction_loss([[1.0]], [[0.9]]).value == pytest.approx(0.10536051565782628, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(G.ShapeError):
            reconstruction_loss(np.ones((2, 3)), np.ones((2, 4)) * 0.5)


def test_total_unsupervised_arithmetic():
    w = LossWeights(beta=10.0, gamma=3.0)
    total = total_unsupervised_loss([0.02, 0.03], [0.004, 0.006], 0.2, w).value
    assert total == pytest.approx(0.05 + 0.03 + 2.0, abs=1e-12)
    assert total_unsupervised_loss([0.0], [0.7], 0.3, LossWeights(2.0, 0.0)).value == pytest.approx(0.6)
