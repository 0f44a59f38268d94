"""Loss terms of the distance-structure matching objective.

Total objective (minimized by the main model, with the critic
maximizing the dual term):

    L = L_gw + lambda_w * L_w + lambda_d * L_d - lambda_h * R_h

where L_gw is the generative-pair distance-distortion estimate with a
trainable scale C, L_w the reconstruction term, L_d the expected
critic-potential difference between inference and generative pairs, and
R_h the encoder entropy.  The critic objective subtracts a gradient
penalty weighted by lambda_gp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

INV_SQRT2 = 1.0 / math.sqrt(2.0)


def dist_rows(a: Tensor, b: Tensor) -> Tensor:
    """d(a_i, b_i) = ||a_i - b_i||_2 / sqrt(2), rowwise."""
    return ad.multiply(ad.l2norm(ad.subtract(a, b), axis=1), Tensor(INV_SQRT2))


def pairwise_distance(t: Tensor) -> Tensor:
    """All-pairs (B, B) matrix of ||t_i - t_j||_2 / sqrt(2)."""
    b, f = t.shape
    diff = ad.subtract(ad.reshape(t, (b, 1, f)), ad.reshape(t, (1, b, f)))
    return ad.multiply(ad.l2norm(diff, axis=2), Tensor(INV_SQRT2))


def dist_adversarial(a: Tensor, b: Tensor, ha: Tensor, hb: Tensor) -> Tensor:
    """d'(a,b) = sqrt(d(a,b)^2 + 0.5 ||h_a - h_b||^2) using critic features."""
    base = dist_rows(a, b)
    feat = ad.l2norm(ad.subtract(ha, hb), axis=1)
    return ad.sqrt(ad.add(ad.square(base), ad.multiply(ad.square(feat), Tensor(0.5))))


def loss_gw(x_gen: Tensor, z_gen: Tensor, scale: Tensor, rho: int) -> Tensor:
    """Mean |d_x(x_i,x_j) - C d_z(z_i,z_j)|^rho over the B(B-1) ordered pairs.

    Self-pairs are excluded (U-statistic).  The reduction sorts before
    summing so the value is bitwise invariant under batch permutation.
    """
    b = x_gen.shape[0]
    if b < 2:
        raise ContractError("distance-distortion estimate needs a batch of >= 2")
    if rho not in (1, 2):
        raise ContractError(f"rho must be 1 or 2, got {rho}")
    dx = pairwise_distance(x_gen)
    dz = pairwise_distance(z_gen)
    delta = ad.subtract(dx, ad.multiply(dz, scale))
    energy = ad.absolute(delta) if rho == 1 else ad.square(delta)
    mask = Tensor(1.0 - np.eye(b))
    total = ad.total(ad.multiply(energy, mask), ordered=True)
    return ad.divide(total, Tensor(float(b * (b - 1))))


def loss_w(x: Tensor, x_hat: Tensor) -> Tensor:
    """Reconstruction term: batch mean of d(x, x_hat)."""
    return ad.mean(dist_rows(x, x_hat))


def loss_w_adversarial(x: Tensor, x_hat: Tensor, h: Tensor, h_hat: Tensor) -> Tensor:
    return ad.mean(dist_adversarial(x, x_hat, h, h_hat))


def loss_d(critic, x_inf, z_inf, x_gen, z_gen, power_iters: int = 1) -> Tensor:
    """Expected potential difference: E_inf[f] - E_gen[f].

    Both batches go through one critic forward so spectral state
    advances once per evaluation.
    """
    n = _lift(x_inf).shape[0]
    f, _ = critic(
        ad.concat([_lift(x_inf), _lift(x_gen)], axis=0),
        ad.concat([_lift(z_inf), _lift(z_gen)], axis=0),
        power_iters=power_iters,
    )
    return ad.subtract(ad.mean(f[:n]), ad.mean(f[n:]))


def gradient_penalty(critic, x_inf, z_inf, x_gen, z_gen, eps: np.ndarray,
                     power_iters: int = 1) -> Tensor:
    """Mean squared deviation of the joint input-gradient norm from 1.

    Interpolants mix each inference pair with its generative partner
    using per-pair uniform eps; the pairs enter as constants so
    gradients reach the critic only.
    """
    xi = np.asarray(_lift(x_inf).data)
    zi = np.asarray(_lift(z_inf).data)
    xg = np.asarray(_lift(x_gen).data)
    zg = np.asarray(_lift(z_gen).data)
    if xi.shape != xg.shape or zi.shape != zg.shape:
        raise ContractError("gradient penalty needs paired batches of equal size")
    e = eps.reshape(-1, 1)
    x_mix = e * xi + (1.0 - e) * xg
    z_mix = e * zi + (1.0 - e) * zg
    _, gx, gz = critic.eval_with_input_grad(x_mix, z_mix, power_iters=power_iters)
    norms = ad.l2norm(ad.concat([gx, gz], axis=1), axis=1)
    return ad.mean(ad.square(ad.subtract(norms, Tensor(1.0))))


def entropy_reg(logvar: Tensor) -> Tensor:
    """Batch mean of the diagonal-Gaussian entropy sum_i 0.5 log(2 pi e s_i^2)."""
    per_sample = ad.multiply(ad.total(logvar, axis=1), Tensor(0.5))
    const = 0.5 * logvar.shape[1] * (math.log(2.0 * math.pi) + 1.0)
    return ad.add(ad.mean(per_sample), Tensor(const))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class LossWeights:
    """Multipliers and schedule constants for the combined objective."""

    lambda_w: float = 1.0
    lambda_d: float = 1.0
    lambda_h: float = 1.0
    lambda_gp: float = 10.0
    rho: int = 1
    xi: int = 2
    n_critic: int = 1

    def validate(self):
        for name in ("lambda_w", "lambda_d", "lambda_h", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.rho not in (1, 2):
            raise ContractError("rho must be 1 or 2")
        if self.n_critic < 0:
            raise ContractError("n_critic must be >= 0")


@dataclass
class LossReport:
    """Per-step record; ``total`` is recomputed from the parts so the
    combination identity holds exactly."""

    step: int
    epoch: int
    l_gw: float
    l_w: float
    l_d: float
    r_h: float
    gp: float
    total: float

    CSV_HEADER = "step,epoch,l_gw,l_w,l_d,r_h,gp,total"

    def csv_row(self) -> str:
        nums = (self.l_gw, self.l_w, self.l_d, self.r_h, self.gp, self.total)
        return ",".join([str(self.step), str(self.epoch)] +
                        [format(v, ".17g") for v in nums])

    def finite(self) -> bool:
        return all(
            math.isfinite(v)
            for v in (self.l_gw, self.l_w, self.l_d, self.r_h, self.gp, self.total)
        )


def combine(l_gw: float, l_w: float, l_d: float, r_h: float, w: LossWeights) -> float:
    return l_gw + w.lambda_w * l_w + w.lambda_d * l_d - w.lambda_h * r_h


def total_loss(l_gw: Tensor, l_w: Tensor, l_d: Tensor, r_h: Tensor,
               w: LossWeights) -> Tensor:
    """Tape-side combination mirroring :func:`combine` term by term."""
    out = ad.add(l_gw, ad.multiply(l_w, Tensor(w.lambda_w)))
    out = ad.add(out, ad.multiply(l_d, Tensor(w.lambda_d)))
    return ad.subtract(out, ad.multiply(r_h, Tensor(w.lambda_h)))
