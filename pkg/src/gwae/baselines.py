"""ELBO-based baselines and the MMD-regularized autoencoder objective."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .errors import ContractError


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)), batch mean.

    0.5 * sum_i (sigma_i^2 + mu_i^2 - 1 - log sigma_i^2)
    """
    var = ad.exp(logvar)
    inner = ad.subtract(ad.subtract(ad.add(var, ad.square(mu)), Tensor(1.0)), logvar)
    return ad.mean(ad.multiply(ad.total(inner, axis=1), Tensor(0.5)))


def elbo_loss(encoder, decoder, x, eps: np.ndarray, beta: float = 1.0) -> Tensor:
    """Negated ELBO with unit-variance Gaussian likelihood, up to a constant.

    Reconstruction is 0.5 ||x - x_hat||^2 per sample; the KL term is
    closed form and weighted by beta (beta = 1 is the plain objective).
    """
    if beta < 0:
        raise ContractError("beta must be non-negative")
    xt = x if isinstance(x, Tensor) else Tensor(x)
    mu, logvar = encoder(xt)
    z = _reparam(mu, logvar, eps)
    x_hat = decoder(z)
    sq = ad.total(ad.square(ad.subtract(xt, x_hat)), axis=1)
    recon = ad.mean(ad.multiply(sq, Tensor(0.5)))
    return ad.add(recon, ad.multiply(kl_standard_normal(mu, logvar), Tensor(beta)))


def mmd_rbf(x: Tensor, y: Tensor, bandwidth: float) -> Tensor:
    """Unbiased MMD^2 estimate with the kernel exp(-||a-b||^2 / bandwidth^2).

    Within-set means exclude the diagonal; all reductions sort before
    summing so mmd_rbf(x, y) == mmd_rbf(y, x) bitwise.
    """
    if bandwidth <= 0:
        raise ContractError("bandwidth must be positive")
    xt, yt = _lift(x), _lift(y)
    n, m = xt.shape[0], yt.shape[0]
    if n < 2 or m < 2:
        raise ContractError("unbiased MMD needs at least 2 samples per set")
    gamma = 1.0 / (bandwidth * bandwidth)
    kxx = _within_mean(xt, gamma)
    kyy = _within_mean(yt, gamma)
    kxy = _cross_mean(xt, yt, gamma)
    return ad.subtract(ad.add(kxx, kyy), ad.multiply(kxy, Tensor(2.0)))


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    na, f = a.shape
    nb = b.shape[0]
    diff = ad.subtract(ad.reshape(a, (na, 1, f)), ad.reshape(b, (1, nb, f)))
    return ad.total(ad.square(diff), axis=2)


def _within_mean(t: Tensor, gamma: float) -> Tensor:
    n = t.shape[0]
    k = ad.exp(ad.multiply(_sq_dists(t, t), Tensor(-gamma)))
    masked = ad.multiply(k, Tensor(1.0 - np.eye(n)))
    return ad.divide(ad.total(masked, ordered=True), Tensor(float(n * (n - 1))))


def _cross_mean(a: Tensor, b: Tensor, gamma: float) -> Tensor:
    k = ad.exp(ad.multiply(_sq_dists(a, b), Tensor(-gamma)))
    return ad.divide(ad.total(k, ordered=True), Tensor(float(a.shape[0] * b.shape[0])))


def default_bandwidth(latent: int) -> float:
    """bandwidth^2 = 2 L unless the median heuristic is requested."""
    return math.sqrt(2.0 * latent)


def median_heuristic_bandwidth(z: np.ndarray) -> float:
    z = np.asarray(z)
    n = z.shape[0]
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2)
    vals = d2[~np.eye(n, dtype=bool)]
    med = float(np.median(vals))
    return math.sqrt(max(med, 1e-12))


def wae_mmd_loss(encoder, decoder, x, eps: np.ndarray, prior_z: Tensor,
                 lam: float, bandwidth: float):
    """Reconstruction plus lambda * MMD between encoded and prior samples.

    Returns (total, reconstruction, mmd) tensors.
    """
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    xt = x if isinstance(x, Tensor) else Tensor(x)
    mu, logvar = encoder(xt)
    z = _reparam(mu, logvar, eps)
    x_hat = decoder(z)
    recon = losses.loss_w(xt, x_hat)
    mmd = mmd_rbf(z, prior_z, bandwidth)
    return ad.add(recon, ad.multiply(mmd, Tensor(lam))), recon, mmd


def _reparam(mu, logvar, eps):
    sigma = ad.exp(ad.multiply(logvar, Tensor(0.5)))
    return ad.add(mu, ad.multiply(sigma, Tensor(eps)))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)
