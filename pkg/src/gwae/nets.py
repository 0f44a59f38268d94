"""Model components: Gaussian encoder, Dirac decoder, Lipschitz critic, priors.

All stacks are dense at desk scale.  The critic keeps the Y topology:
an x-side branch and a z-side branch whose outputs are concatenated,
scaled by 0.5, and fed to a stem; every critic layer passes through
spectral normalization on each forward.  LeakyReLU slope is 0.2 in the
critic and SiLU is used everywhere else.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import SpectralState, Tensor, spectral_normalize
from .errors import ContractError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 6.0
LOGIT_EPS = 1e-6
BN_VARIANCE_FLOOR = 1e-12


def _he_normal(rng, fan_in, fan_out, gain=2.0):
    return rng.standard_normal((fan_in, fan_out)) * math.sqrt(gain / fan_in)


class Dense:
    """One affine layer, optionally masked (grouped) or spectrally normalized."""

    def __init__(self, in_dim, out_dim, rng, *, init="silu", mask=None, spectral=False):
        if init == "zero":
            w = np.zeros((in_dim, out_dim))
        elif init == "leaky":
            w = _he_normal(rng, in_dim, out_dim, gain=2.0 / (1.0 + 0.2**2))
        else:
            w = _he_normal(rng, in_dim, out_dim)
        if mask is not None:
            w = w * mask
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.mask = None if mask is None else Tensor(np.asarray(mask, dtype=np.float64))
        self.sn_state = SpectralState(in_dim, out_dim, rng) if spectral else None

    def effective_weight(self, power_iters: int = 1) -> Tensor:
        w = self.w
        if self.mask is not None:
            w = ad.multiply(w, self.mask)
        if self.sn_state is not None:
            w = spectral_normalize(w, power_iters, self.sn_state)
        return w

    def params(self):
        return {"w": self.w, "b": self.b}


def _silu_deriv(pre: Tensor) -> Tensor:
    s = expit(pre.data)
    return Tensor(s * (1.0 + pre.data * (1.0 - s)))


def _leaky_deriv(pre: Tensor) -> Tensor:
    return Tensor(np.where(pre.data >= 0.0, 1.0, 0.2))


class Stack:
    """Dense stack with a fixed activation between (and optionally after) layers."""

    def __init__(self, dims, rng, *, act, act_last, init="silu", mask_groups=None,
                 spectral=False, zero_last=False):
        self.act = act
        self.act_last = act_last
        self.layers = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            mask = None
            if mask_groups is not None:
                mask = _block_mask(din, dout, mask_groups)
            layer_init = "zero" if (zero_last and last) else init
            self.layers.append(
                Dense(din, dout, rng, init=layer_init, mask=mask, spectral=spectral)
            )

    def forward(self, x: Tensor, power_iters: int = 1):
        """Returns (output, pre-activations, effective weights) for reuse."""
        pres, weights = [], []
        h = x
        for i, layer in enumerate(self.layers):
            w = layer.effective_weight(power_iters)
            weights.append(w)
            pre = ad.add(ad.matmul(h, w), layer.b)
            pres.append(pre)
            last = i == len(self.layers) - 1
            fn = self.act_last if last else self.act
            h = fn(pre) if fn is not None else pre
        return h, pres, weights

    def __call__(self, x: Tensor, power_iters: int = 1) -> Tensor:
        return self.forward(x, power_iters)[0]

    def input_gradient(self, g: Tensor, pres, weights) -> Tensor:
        """Pull a gradient w.r.t. the stack output back to its input.

        Activation derivatives enter as constants; for the piecewise
        linear LeakyReLU this matches exact double backpropagation
        almost everywhere, keeping the tape first-order.
        """
        for i in range(len(self.layers) - 1, -1, -1):
            last = i == len(self.layers) - 1
            fn = self.act_last if last else self.act
            if fn is ad.silu:
                g = ad.multiply(g, _silu_deriv(pres[i]))
            elif fn is _leaky:
                g = ad.multiply(g, _leaky_deriv(pres[i]))
            elif fn is not None:
                raise ContractError("input_gradient: unsupported activation")
            g = ad.matmul(g, ad.transpose(weights[i]))
        return g

    def params(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}/layer{i}/w"] = layer.w
            out[f"{prefix}/layer{i}/b"] = layer.b
        return out


def _leaky(x: Tensor) -> Tensor:
    return ad.leaky_relu(x, 0.2)


def _block_mask(din, dout, groups):
    if din % groups or dout % groups:
        raise ContractError(f"grouped layer dims {din}x{dout} not divisible by {groups}")
    bi, bo = din // groups, dout // groups
    mask = np.zeros((din, dout))
    for g in range(groups):
        mask[g * bi : (g + 1) * bi, g * bo : (g + 1) * bo] = 1.0
    return mask


# ---------------------------------------------------------------------------
# encoder / decoder


class Encoder:
    """Diagonal Gaussian encoder: x -> (mu, log sigma^2), SiLU hidden layers.

    Inputs in [0, 1] pass through a clamped inverse sigmoid before the
    first layer; log-variance outputs are clamped to keep sigma^2
    strictly positive and the entropy term finite.
    """

    def __init__(self, data_dim, latent, rng, width=256, depth=6):
        dims = [data_dim] + [width] * (depth - 1) + [2 * latent]
        self.latent = latent
        self.stack = Stack(dims, rng, act=ad.silu, act_last=None, zero_last=True)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        clamped = np.clip(data, LOGIT_EPS, 1.0 - LOGIT_EPS)
        h = Tensor(np.log(clamped / (1.0 - clamped)))
        out = self.stack(h)
        mu = out[:, : self.latent]
        logvar = ad.clip(out[:, self.latent :], LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def params(self):
        return self.stack.params("encoder")


class Decoder:
    """Deterministic decoder z -> (0,1)^M with a sigmoid output squash."""

    def __init__(self, data_dim, latent, rng, width=256, depth=6):
        dims = [latent] + [width] * (depth - 1) + [data_dim]
        self.stack = Stack(dims, rng, act=ad.silu, act_last=ad.sigmoid, zero_last=True)

    def __call__(self, z: Tensor) -> Tensor:
        return self.stack(z)

    def params(self):
        return self.stack.params("decoder")


def encode(encoder: Encoder, x) -> tuple[Tensor, Tensor]:
    """Spec-facing wrapper returning (mu, sigma^2)."""
    mu, logvar = encoder(x)
    return mu, ad.exp(logvar)


def reparameterize(mu: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    """z = mu + sigma * eps with sigma = exp(logvar / 2)."""
    sigma = ad.exp(ad.multiply(logvar, Tensor(0.5)))
    return ad.add(mu, ad.multiply(sigma, Tensor(eps)))


# ---------------------------------------------------------------------------
# critic


class Critic:
    """Y-shaped Kantorovich potential estimator.

    Every layer is spectrally normalized; branch outputs are
    concatenated and scaled by 0.5 before the stem.  ``z_only=True``
    drops the x branch (ablation variant); the stem then consumes the z
    features unscaled.
    """

    def __init__(self, data_dim, latent, rng, width=256, feat=64, z_only=False):
        self.z_only = z_only
        self.feat = feat
        kw = dict(act=_leaky, init="leaky", spectral=True)
        if not z_only:
            xdims = [data_dim] + [width] * 6 + [feat]
            self.xbranch = Stack(xdims, rng, act_last=None, **kw)
        self.zbranch = Stack([latent, width, width, feat], rng, act_last=_leaky, **kw)
        stem_in = feat if z_only else 2 * feat
        self.stem = Stack([stem_in, width, width, 1], rng, act_last=_leaky, **kw)

    def _forward(self, x, z, power_iters=1):
        ctx = {}
        zf, ctx["z_pres"], ctx["z_ws"] = self.zbranch.forward(_lift(z), power_iters)
        if self.z_only:
            stem_in = zf
            ctx["xf"] = Tensor(np.zeros((zf.shape[0], self.feat)))
        else:
            xf, ctx["x_pres"], ctx["x_ws"] = self.xbranch.forward(_lift(x), power_iters)
            ctx["xf"] = xf
            stem_in = ad.multiply(ad.concat([xf, zf], axis=1), Tensor(0.5))
        out, ctx["s_pres"], ctx["s_ws"] = self.stem.forward(stem_in, power_iters)
        ctx["f"] = ad.reshape(out, (out.shape[0],))
        return ctx

    def __call__(self, x, z, power_iters=1) -> tuple[Tensor, Tensor]:
        """Returns (potential per pair, x-branch features h)."""
        ctx = self._forward(x, z, power_iters)
        return ctx["f"], ctx["xf"]

    def eval_with_input_grad(self, x, z, power_iters=1):
        """Potential plus its exact gradient w.r.t. the (x, z) inputs.

        The gradient is assembled on the tape from the same effective
        weights as the forward pass, so the result stays differentiable
        w.r.t. the critic parameters (gradient-penalty training).
        """
        ctx = self._forward(x, z, power_iters)
        n = ctx["f"].shape[0]
        g = Tensor(np.ones((n, 1)))
        g = self.stem.input_gradient(g, ctx["s_pres"], ctx["s_ws"])
        if self.z_only:
            gz = self.zbranch.input_gradient(g, ctx["z_pres"], ctx["z_ws"])
            gx = Tensor(np.zeros((n, _lift(x).shape[1])))
        else:
            g = ad.multiply(g, Tensor(0.5))
            gxf = g[:, : self.feat]
            gzf = g[:, self.feat :]
            gx = self.xbranch.input_gradient(gxf, ctx["x_pres"], ctx["x_ws"])
            gz = self.zbranch.input_gradient(gzf, ctx["z_pres"], ctx["z_ws"])
        return ctx["f"], gx, gz

    def converge_normalization(self, iters=50):
        for stack in self._stacks():
            for layer in stack.layers:
                layer.effective_weight(power_iters=iters)

    def _stacks(self):
        return ([self.zbranch, self.stem] if self.z_only
                else [self.xbranch, self.zbranch, self.stem])

    def params(self):
        out = {}
        if not self.z_only:
            out.update(self.xbranch.params("critic/x"))
        out.update(self.zbranch.params("critic/z"))
        out.update(self.stem.params("critic/stem"))
        return out


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# aggregated-posterior batch normalization


def aggregated_batchnorm(mu: Tensor, var: Tensor, floor: float = BN_VARIANCE_FLOOR):
    """Normalize posterior parameters by aggregated-posterior statistics.

    The aggregated mean is the batch mean of mu; the aggregated variance
    follows the law of total variance: batch mean of sigma^2 plus the
    unbiased batch variance of mu.  Gradients flow through both
    statistics.
    """
    n = mu.shape[0]
    if n < 2:
        raise ContractError("aggregated_batchnorm needs a batch of at least 2")
    m = ad.mean(mu, axis=0)
    dev = ad.subtract(mu, m)
    v = ad.add(ad.mean(var, axis=0),
               ad.divide(ad.total(ad.square(dev), axis=0), Tensor(float(n - 1))))
    if np.any(v.data < floor):
        warnings.warn("aggregated variance clamped to floor", RuntimeWarning)
    v = ad.clip(v, lo=floor)
    mu_t = ad.divide(dev, ad.sqrt(v))
    var_t = ad.divide(var, v)
    return mu_t, var_t


# ---------------------------------------------------------------------------
# trainable priors


class StandardNormalPrior:
    """Fixed N(0, I) prior used by the ELBO and WAE baselines."""

    variant = "standard"

    def __init__(self, latent):
        self.latent = latent

    def sample(self, n, rng, mode="batch"):
        return Tensor(rng.standard_normal((n, self.latent)))

    def log_density(self, z):
        z = np.asarray(z)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.latent * math.log(2 * math.pi)

    def params(self):
        return {}


class _NormalizedNetPrior:
    """Shared machinery for NP/FNP: z = batchnorm(g(eps)), eps ~ N(0, I)."""

    def __init__(self, latent):
        self.latent = latent
        self.run_mean = np.zeros(latent)
        self.run_var = np.ones(latent)
        self.momentum = 0.99

    def transform(self, eps: Tensor) -> Tensor:
        raise NotImplementedError

    def sample(self, n, rng, mode="batch"):
        if mode == "batch" and n < 2:
            raise ContractError("batch-statistics prior sampling needs n >= 2")
        eps = Tensor(rng.standard_normal((n, self.latent)))
        raw = self.transform(eps)
        if mode == "batch":
            z, _ = aggregated_batchnorm(raw, Tensor(np.zeros_like(raw.data)))
            batch_mean = raw.data.mean(axis=0)
            batch_var = raw.data.var(axis=0, ddof=1) if n > 1 else np.ones(self.latent)
            m = self.momentum
            self.run_mean = m * self.run_mean + (1 - m) * batch_mean
            self.run_var = m * self.run_var + (1 - m) * batch_var
            return z
        denom = np.sqrt(np.maximum(self.run_var, BN_VARIANCE_FLOOR))
        return ad.divide(ad.subtract(raw, Tensor(self.run_mean)), Tensor(denom))


class NeuralPrior(_NormalizedNetPrior):
    """Unconstrained sampler network; need not be invertible."""

    variant = "np"

    def __init__(self, latent, rng, width=256, depth=4):
        super().__init__(latent)
        dims = [latent] + [width] * (depth - 1) + [latent]
        self.stack = Stack(dims, rng, act=ad.silu, act_last=None)

    def transform(self, eps: Tensor) -> Tensor:
        return self.stack(eps)

    def params(self):
        return self.stack.params("prior/np")


class FactorizedNeuralPrior(_NormalizedNetPrior):
    """Per-coordinate independent sampler networks (block-diagonal weights)."""

    variant = "fnp"

    def __init__(self, latent, rng, width=256, depth=4):
        super().__init__(latent)
        unit = max(4, width // latent)
        dims = [latent] + [latent * unit] * (depth - 1) + [latent]
        self.stack = Stack(dims, rng, act=ad.silu, act_last=None, mask_groups=latent)

    def transform(self, eps: Tensor) -> Tensor:
        return self.stack(eps)

    def params(self):
        return self.stack.params("prior/fnp")


class GaussianMixturePrior:
    """K-component mixture with trainable weights, means, root covariances.

    Sampling draws the component index from the softmax weights and
    returns m_k + M_k eps.  The categorical draw is not reparameterized:
    gradients reach only the means and roots of the selected components,
    and the raw weights receive no pathwise gradient.
    """

    variant = "gmp"

    def __init__(self, latent, rng, components=5):
        self.latent = latent
        self.components = components
        self.w_raw = Tensor(np.zeros(components), requires_grad=True)
        self.means = Tensor(rng.standard_normal((components, latent)), requires_grad=True)
        self.roots = [
            Tensor(0.5 * np.eye(latent) + 0.01 * rng.standard_normal((latent, latent)),
                   requires_grad=True)
            for _ in range(components)
        ]

    def weights(self) -> np.ndarray:
        e = np.exp(self.w_raw.data - np.max(self.w_raw.data))
        return e / e.sum()

    def sample(self, n, rng, mode="batch"):
        if n < 1:
            raise ContractError("sample count must be >= 1")
        w = self.weights()
        ks = rng.choice(self.components, size=n, p=w)
        eps = rng.standard_normal((n, self.latent))
        onehot = np.eye(self.components)[ks]
        z = ad.matmul(Tensor(onehot), self.means)
        eps_t = Tensor(eps)
        for k in range(self.components):
            mask = Tensor(onehot[:, k : k + 1])
            part = ad.multiply(ad.matmul(eps_t, ad.transpose(self.roots[k])), mask)
            z = ad.add(z, part)
        return z

    def log_density(self, z, jitter=1e-9):
        """Closed-form mixture log density (evaluation only, no tape)."""
        z = np.asarray(z)
        w = self.weights()
        logs = np.full((z.shape[0], self.components), -np.inf)
        for k in range(self.components):
            root = self.roots[k].data
            cov = root @ root.T + jitter * np.eye(self.latent)
            sign, logdet = np.linalg.slogdet(cov)
            diff = z - self.means.data[k]
            sol = np.linalg.solve(cov, diff.T).T
            quad = np.sum(diff * sol, axis=1)
            logs[:, k] = (
                math.log(max(w[k], 1e-300))
                - 0.5 * (quad + logdet + self.latent * math.log(2 * math.pi))
            )
        peak = logs.max(axis=1, keepdims=True)
        return (peak + np.log(np.exp(logs - peak).sum(axis=1, keepdims=True))).ravel()

    def params(self):
        out = {"prior/gmp/w_raw": self.w_raw, "prior/gmp/means": self.means}
        for k, root in enumerate(self.roots):
            out[f"prior/gmp/root{k}"] = root
        return out


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class NetConfig:
    width: int = 256
    critic_width: int = 256
    critic_feat: int = 64
    gmp_components: int = 5
    z_only_critic: bool = False
    power_iters: int = 1


class Model:
    """Bundle of the trainable pieces for one run."""

    def __init__(self, kind, data_dim, latent, rng, net: NetConfig | None = None):
        net = net or NetConfig()
        self.kind = kind
        self.data_dim = data_dim
        self.latent = latent
        self.net = net
        self.encoder = Encoder(data_dim, latent, rng, width=net.width)
        self.decoder = Decoder(data_dim, latent, rng, width=net.width)
        self.c_raw = Tensor(np.asarray(math.log(math.e - 1.0)), requires_grad=True)
        if kind == "gwae-np":
            self.prior = NeuralPrior(latent, rng, width=net.width)
        elif kind == "gwae-fnp":
            self.prior = FactorizedNeuralPrior(latent, rng, width=net.width)
        elif kind == "gwae-gmp":
            self.prior = GaussianMixturePrior(latent, rng, components=net.gmp_components)
        elif kind in ("vae", "beta-vae", "wae-mmd"):
            self.prior = StandardNormalPrior(latent)
        else:
            raise ContractError(f"unknown model kind: {kind}")
        if kind.startswith("gwae"):
            self.critic = Critic(data_dim, latent, rng, width=net.critic_width,
                                 feat=net.critic_feat, z_only=net.z_only_critic)
        else:
            self.critic = None

    def scale(self) -> Tensor:
        """Trainable scale constant C = softplus(c_raw) > 0."""
        return ad.softplus(self.c_raw)

    def scale_value(self) -> float:
        return float(np.logaddexp(0.0, self.c_raw.data))

    def main_params(self) -> dict:
        out = {}
        out.update(self.encoder.params())
        out.update(self.decoder.params())
        out.update(self.prior.params())
        out["scale/c_raw"] = self.c_raw
        return out

    def critic_params(self) -> dict:
        return self.critic.params() if self.critic is not None else {}

    def named_params(self) -> dict:
        out = dict(self.main_params())
        out.update(self.critic_params())
        return out
