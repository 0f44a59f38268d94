import numpy as np
import pytest

from gwae import autodiff as ad
from gwae import nets
from gwae.autodiff import Tape, Tensor, check_gradient
from gwae.errors import ContractError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# encoder / decoder


def test_fresh_encoder_head_gives_standard_posterior(rng):
    enc = nets.Encoder(data_dim=6, latent=3, rng=rng, width=16)
    mu, logvar = enc(rng.uniform(0.2, 0.8, size=(4, 6)))
    np.testing.assert_array_equal(mu.data, np.zeros((4, 3)))
    np.testing.assert_array_equal(np.exp(logvar.data), np.ones((4, 3)))


def test_encoder_variance_strictly_positive(rng):
    enc = nets.Encoder(6, 3, rng, width=16)
    # randomize the head so outputs are non-trivial
    enc.stack.layers[-1].w.data[:] = rng.standard_normal(enc.stack.layers[-1].w.shape)
    _, var = nets.encode(enc, rng.uniform(0, 1, size=(8, 6)))
    assert np.all(var.data > 0)


def test_encoder_gradient_matches_finite_differences(rng):
    enc = nets.Encoder(4, 2, rng, width=6)
    enc.stack.layers[-1].w.data[:] = 0.1 * rng.standard_normal((6, 4))
    x = rng.uniform(0.1, 0.9, size=(3, 4))
    first = enc.stack.layers[0]

    def f(w):
        saved = first.w
        first.w = w
        try:
            mu, _ = enc(x)
            return ad.mean(mu)
        finally:
            first.w = saved

    assert check_gradient(f, Tensor(first.w.data.copy())) < 1e-5


def test_decoder_fresh_head_outputs_half(rng):
    dec = nets.Decoder(data_dim=5, latent=2, rng=rng, width=8)
    out = dec(Tensor(rng.standard_normal((4, 2))))
    np.testing.assert_array_equal(out.data, np.full((4, 5), 0.5))


def test_decoder_bounds(rng):
    dec = nets.Decoder(5, 2, rng, width=8)
    dec.stack.layers[-1].w.data[:] = rng.standard_normal(dec.stack.layers[-1].w.shape)
    out = dec(Tensor(10.0 * rng.standard_normal((16, 2))))
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_decode_encode_end_to_end_gradient(rng):
    enc = nets.Encoder(4, 2, rng, width=6)
    dec = nets.Decoder(4, 2, rng, width=6)
    for layer in (enc.stack.layers[-1], dec.stack.layers[-1]):
        layer.w.data[:] = 0.1 * rng.standard_normal(layer.w.shape)
    x = rng.uniform(0.1, 0.9, size=(3, 4))
    eps = rng.standard_normal((3, 2))
    target = dec.stack.layers[0]

    def f(w):
        saved = target.w
        target.w = w
        try:
            mu, logvar = enc(x)
            z = nets.reparameterize(mu, logvar, eps)
            xhat = dec(z)
            entropy = ad.mean(logvar)
            return ad.add(ad.mean(ad.square(ad.subtract(xhat, Tensor(x)))), entropy)
        finally:
            target.w = saved

    assert check_gradient(f, Tensor(target.w.data.copy())) < 1e-5


def test_reparameterize_zero_noise_returns_mu():
    mu = Tensor(np.array([[1.0, -2.0]]))
    logvar = Tensor(np.array([[0.3, 0.7]]))
    z = nets.reparameterize(mu, logvar, np.zeros((1, 2)))
    np.testing.assert_array_equal(z.data, mu.data)


def test_reparameterize_floor_variance_collapses_to_mu():
    mu = Tensor(np.array([[1.0, -2.0]]))
    logvar = Tensor(np.full((1, 2), nets.LOGVAR_MIN))
    z = nets.reparameterize(mu, logvar, np.ones((1, 2)))
    np.testing.assert_allclose(z.data, mu.data, atol=1e-6)


def test_reparameterize_monte_carlo_statistics(rng):
    n = 100_000
    mu = Tensor(np.full((n, 1), 2.0))
    logvar = Tensor(np.full((n, 1), np.log(4.0)))
    z = nets.reparameterize(mu, logvar, rng.standard_normal((n, 1))).data
    assert abs(z.mean() - 2.0) < 0.02
    assert abs(z.var() - 4.0) < 0.1


# ---------------------------------------------------------------------------
# critic


def make_critic(rng, m=6, latent=3, width=12, feat=4, z_only=False):
    return nets.Critic(m, latent, rng, width=width, feat=feat, z_only=z_only)


def test_zeroed_stem_gives_constant_potential(rng):
    critic = make_critic(rng)
    for layer in critic.stem.layers:
        layer.w.data[:] = 0.0
        layer.b.data[:] = 0.7
    f, _ = critic(rng.standard_normal((5, 6)), rng.standard_normal((5, 3)))
    assert np.ptp(f.data) == 0.0


def test_swapping_z_leaves_x_features_bitwise_unchanged(rng):
    # same x rows with different z in one batch: h must match bitwise
    critic = make_critic(rng)
    x = rng.standard_normal((4, 6))
    z1, z2 = rng.standard_normal((2, 4, 3))
    f, h = critic(np.vstack([x, x]), np.vstack([z1, z2]))
    assert h.data[:4].tobytes() == h.data[4:].tobytes()
    assert np.any(f.data[:4] != f.data[4:])


def test_empirical_lipschitz_probe():
    rng = np.random.default_rng(3)
    critic = make_critic(rng, m=5, latent=2, width=16, feat=6)
    critic.converge_normalization(60)
    a_x, b_x = rng.standard_normal((2, 1000, 5))
    a_z, b_z = rng.standard_normal((2, 1000, 2))
    fa, _ = critic(a_x, a_z)
    fb, _ = critic(b_x, b_z)
    joint = np.sqrt(
        np.sum((a_x - b_x) ** 2, axis=1) + np.sum((a_z - b_z) ** 2, axis=1)
    )
    ratio = np.abs(fa.data - fb.data) / joint
    assert np.max(ratio) <= 1.05


def test_input_gradient_matches_tape_backward(rng):
    critic = make_critic(rng)
    for stack in critic._stacks():
        for layer in stack.layers:
            layer.sn_state = None  # freeze weights so repeated calls agree exactly
    x0 = rng.standard_normal((3, 6))
    z0 = rng.standard_normal((3, 3))
    _, gx, gz = critic.eval_with_input_grad(x0, z0)
    for row in range(3):
        with Tape() as tape:
            x = Tensor(x0, requires_grad=True)
            z = Tensor(z0, requires_grad=True)
            f, _ = critic(x, z)
            grads = tape.backward(f[row].reshape(()))
        np.testing.assert_allclose(gx.data[row], grads.of(x)[row], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(gz.data[row], grads.of(z)[row], rtol=1e-12, atol=1e-14)


def test_input_gradient_with_spectral_norm_converged(rng):
    critic = make_critic(rng)
    critic.converge_normalization(80)
    x0 = rng.standard_normal((2, 6))
    z0 = rng.standard_normal((2, 3))
    _, gx, gz = critic.eval_with_input_grad(x0, z0)
    with Tape() as tape:
        x = Tensor(x0, requires_grad=True)
        z = Tensor(z0, requires_grad=True)
        f, _ = critic(x, z)
        grads = tape.backward(f.sum())
    np.testing.assert_allclose(gx.data, grads.of(x), rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(gz.data, grads.of(z), rtol=1e-8, atol=1e-10)


def test_input_gradient_is_differentiable_wrt_critic_params(rng):
    critic = make_critic(rng, m=3, latent=2, width=5, feat=3)
    for stack in (critic.xbranch, critic.zbranch, critic.stem):
        for layer in stack.layers:
            layer.sn_state = None  # fixed weights make finite differences valid
    x = rng.standard_normal((4, 3))
    z = rng.standard_normal((4, 2))
    target = critic.stem.layers[0]

    def f(w):
        saved = target.w
        target.w = w
        try:
            _, gx, gz = critic.eval_with_input_grad(x, z)
            norms = ad.l2norm(ad.concat([gx, gz], axis=1), axis=1)
            return ad.mean(ad.square(ad.subtract(norms, Tensor(1.0))))
        finally:
            target.w = saved

    assert check_gradient(f, Tensor(target.w.data.copy()), step=1e-5) < 1e-4


def test_z_only_critic_ignores_x(rng):
    critic = make_critic(rng, z_only=True)
    z = rng.standard_normal((4, 3))
    f, _ = critic(
        np.vstack([rng.standard_normal((4, 6)), rng.standard_normal((4, 6))]),
        np.vstack([z, z]),
    )
    assert f.data[:4].tobytes() == f.data[4:].tobytes()
    _, gx, _ = critic.eval_with_input_grad(np.zeros((4, 6)), z)
    np.testing.assert_array_equal(gx.data, np.zeros((4, 6)))


# ---------------------------------------------------------------------------
# aggregated batch normalization


def test_aggregated_batchnorm_constant_mu():
    mu = Tensor(np.full((5, 2), 3.0))
    var = Tensor(np.full((5, 2), 0.25))
    mu_t, var_t = nets.aggregated_batchnorm(mu, var)
    np.testing.assert_allclose(mu_t.data, np.zeros((5, 2)), atol=1e-12)
    np.testing.assert_allclose(var_t.data, np.ones((5, 2)), atol=1e-12)


def test_aggregated_batchnorm_hand_computed_two_point():
    # mu = {-1, +1}: mean 0, unbiased variance 2; sigma^2 at the floor
    mu = Tensor(np.array([[-1.0], [1.0]]))
    var = Tensor(np.zeros((2, 1)))
    mu_t, _ = nets.aggregated_batchnorm(mu, var)
    np.testing.assert_allclose(
        mu_t.data, np.array([[-1.0], [1.0]]) / np.sqrt(2.0), atol=1e-12
    )


def test_aggregated_batchnorm_warns_when_variance_at_floor():
    mu = Tensor(np.full((3, 1), 2.0))
    var = Tensor(np.zeros((3, 1)))
    with pytest.warns(RuntimeWarning):
        mu_t, _ = nets.aggregated_batchnorm(mu, var)
    assert np.all(np.isfinite(mu_t.data))


def test_aggregated_batchnorm_renormalization_is_identity(rng):
    mu = Tensor(rng.standard_normal((64, 3)))
    var = Tensor(np.exp(rng.standard_normal((64, 3))))
    mu_t, var_t = nets.aggregated_batchnorm(mu, var)
    mean_est = mu_t.data.mean(axis=0)
    var_est = var_t.data.mean(axis=0) + mu_t.data.var(axis=0, ddof=1)
    np.testing.assert_allclose(mean_est, np.zeros(3), atol=1e-9)
    np.testing.assert_allclose(var_est, np.ones(3), atol=1e-9)


def test_aggregated_batchnorm_rejects_singleton():
    with pytest.raises(ContractError):
        nets.aggregated_batchnorm(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))


def test_aggregated_batchnorm_is_differentiable(rng):
    mu0 = rng.standard_normal((4, 2))
    var0 = np.exp(rng.standard_normal((4, 2)))

    def f(mu):
        mu_t, var_t = nets.aggregated_batchnorm(mu, Tensor(var0))
        return ad.mean(ad.square(mu_t)) + ad.mean(var_t)

    assert check_gradient(f, Tensor(mu0)) < 1e-5


# ---------------------------------------------------------------------------
# priors


def test_np_prior_batch_statistics(rng):
    prior = nets.NeuralPrior(3, rng, width=16)
    z = prior.sample(128, rng).data
    np.testing.assert_allclose(z.mean(axis=0), np.zeros(3), atol=1e-9)
    np.testing.assert_allclose(z.var(axis=0, ddof=1), np.ones(3), atol=1e-9)


def test_np_prior_rejects_singleton_batch(rng):
    prior = nets.NeuralPrior(3, rng, width=16)
    with pytest.raises(ContractError):
        prior.sample(1, rng)


def test_np_prior_running_mode_single_sample(rng):
    prior = nets.NeuralPrior(3, rng, width=16)
    for _ in range(5):
        prior.sample(64, rng)
    z = prior.sample(1, rng, mode="running")
    assert z.data.shape == (1, 3) and np.all(np.isfinite(z.data))


def test_fnp_perturbing_one_noise_coordinate_is_local(rng):
    latent = 4
    prior = nets.FactorizedNeuralPrior(latent, rng, width=32)
    eps = rng.standard_normal((2, latent))
    base = prior.transform(Tensor(eps)).data
    for j in range(latent):
        bumped = eps.copy()
        bumped[0, j] += 0.37
        out = prior.transform(Tensor(bumped)).data
        changed = np.nonzero(out[0] != base[0])[0]
        np.testing.assert_array_equal(changed, [j])


def test_fnp_jacobian_is_diagonal(rng):
    latent = 3
    prior = nets.FactorizedNeuralPrior(latent, rng, width=24)
    for trial in range(10):
        eps = rng.standard_normal((1, latent))
        h = 1e-5
        jac = np.zeros((latent, latent))
        for j in range(latent):
            up, dn = eps.copy(), eps.copy()
            up[0, j] += h
            dn[0, j] -= h
            jac[:, j] = (
                prior.transform(Tensor(up)).data[0]
                - prior.transform(Tensor(dn)).data[0]
            ) / (2 * h)
        off = jac - np.diag(np.diag(jac))
        assert np.max(np.abs(off)) < 1e-8


def test_gmp_single_standard_component(rng):
    prior = nets.GaussianMixturePrior(2, rng, components=1)
    prior.means.data[:] = 0.0
    prior.roots[0].data[:] = np.eye(2)
    z = prior.sample(10_000, rng).data
    assert np.all(np.abs(z.mean(axis=0)) < 0.05)


def test_gmp_mixture_mean_matches_analytic(rng):
    prior = nets.GaussianMixturePrior(3, rng, components=4)
    prior.w_raw.data[:] = rng.standard_normal(4)
    w = prior.weights()
    analytic = w @ prior.means.data
    z = prior.sample(100_000, rng).data
    assert np.max(np.abs(z.mean(axis=0) - analytic)) < 0.05


def test_gmp_weights_sum_to_one(rng):
    prior = nets.GaussianMixturePrior(2, rng, components=5)
    prior.w_raw.data[:] = rng.standard_normal(5) * 3
    assert abs(prior.weights().sum() - 1.0) < 1e-12


def test_gmp_component_frequencies_multinomial(rng):
    prior = nets.GaussianMixturePrior(2, rng, components=3)
    prior.w_raw.data[:] = np.array([0.0, 1.0, -0.5])
    w = prior.weights()
    n = 100_000
    draws = rng.choice(3, size=n, p=w)
    freqs = np.bincount(draws, minlength=3) / n
    bound = 3 * np.sqrt(w * (1 - w) / n)
    assert np.all(np.abs(freqs - w) <= bound)


def test_gmp_sampling_is_differentiable_wrt_means(rng):
    prior = nets.GaussianMixturePrior(2, rng, components=2)
    state = rng.bit_generator.state

    def f(means):
        saved = prior.means
        prior.means = means
        try:
            local = np.random.default_rng()
            local.bit_generator.state = state
            return ad.mean(ad.square(prior.sample(16, local)))
        finally:
            prior.means = saved

    assert check_gradient(f, Tensor(prior.means.data.copy())) < 1e-5


def test_outputs_finite_on_wide_inputs(rng):
    model = nets.Model("gwae-np", data_dim=4, latent=2, rng=rng,
                       net=nets.NetConfig(width=16, critic_width=16, critic_feat=4))
    x = rng.uniform(-10, 10, size=(8, 4))
    mu, logvar = model.encoder(x)
    z = nets.reparameterize(mu, logvar, rng.standard_normal((8, 2)))
    xhat = model.decoder(z)
    f, h = model.critic(x, z.data)
    for t in (mu, logvar, z, xhat, f, h):
        assert np.all(np.isfinite(t.data))


def test_model_parameter_sets_are_disjoint(rng):
    model = nets.Model("gwae-gmp", 4, 2, rng,
                       net=nets.NetConfig(width=8, critic_width=8, critic_feat=4))
    main = set(model.main_params())
    critic = set(model.critic_params())
    assert not main & critic
    assert model.scale_value() == pytest.approx(1.0)
