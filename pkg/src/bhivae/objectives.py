"""Loss terms for supervised and unsupervised training, and the block prior."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import ndgrad as G
from .ndgrad import NumericalError, ShapeError, Tensor
from .nn import DenseParams, mlp_forward, predictive_entropy, softmax_cross_entropy

PROB_CLAMP = 1e-6

POSTERIOR, PRIOR, PERMUTED = 0, 1, 2


@dataclass(frozen=True)
class LossWeights:
    beta: float = 10.0
    gamma: float = 3.0

    def __post_init__(self):
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def equicorrelation(width: int, rho: float) -> np.ndarray:
    return np.full((width, width), rho) + (1.0 - rho) * np.eye(width)


@dataclass(frozen=True)
class BlockPrior:
    """N(0, Sigma) with Sigma block diagonal: each feature block has unit
    variances and correlation ``rho`` between its coordinates; the residual
    block is the identity."""

    feature_widths: tuple[int, ...]
    residual_width: int
    rho: tuple[float, ...]

    def __post_init__(self):
        rho = self.rho
        if np.isscalar(rho):
            rho = (float(rho),) * len(self.feature_widths)
        object.__setattr__(self, "rho", tuple(float(r) for r in rho))
        object.__setattr__(self, "feature_widths", tuple(int(w) for w in self.feature_widths))
        if len(self.rho) != len(self.feature_widths):
            raise ValueError("one correlation per feature block")
        if any(abs(r) >= 1 for r in self.rho):
            raise ValueError(f"|rho| must be < 1, got {self.rho}")
        for w, r in zip(self.feature_widths, self.rho):
            if w > 1 and r <= -1.0 / (w - 1):
                raise ValueError(f"rho={r} is not positive definite for a {w}-wide block")

    @classmethod
    def for_layer(cls, s_dim: int, carrier_dim: int, rho: float = 0.5) -> "BlockPrior":
        return cls((s_dim,), carrier_dim, (rho,))

    @classmethod
    def for_code(cls, layout, rho: float = 0.5) -> "BlockPrior":
        return cls(layout.s_dims, layout.c_dim, (rho,) * layout.num_layers)

    @property
    def dim(self) -> int:
        return sum(self.feature_widths) + self.residual_width

    @property
    def covariance(self) -> np.ndarray:
        cov = np.eye(self.dim)
        start = 0
        for w, r in zip(self.feature_widths, self.rho):
            cov[start : start + w, start : start + w] = equicorrelation(w, r)
            start += w
        return cov

    @property
    def cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.covariance)

    def log_density(self, z: np.ndarray) -> np.ndarray:
        cov = self.covariance
        _, logdet = np.linalg.slogdet(cov)
        quad = np.einsum("ni,ij,nj->n", z, np.linalg.inv(cov), z)
        return -0.5 * (quad + logdet + self.dim * np.log(2 * np.pi))


def kl_diag_gaussian_to_standard(mu, log_var) -> Tensor:
    """Batch mean of KL(N(mu, diag(exp(log_var))) || N(0, I))."""
    mu, log_var = G.as_tensor(mu), G.as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"mean {mu.shape} and log-variance {log_var.shape} differ")
    per_dim = G.add(G.add(G.square(mu), G.exp(log_var)), G.add(G.negate(log_var), -1.0))
    return G.reduce_mean(G.mul(G.reduce_sum(per_dim, axis=-1), 0.5))


def gaussian_kl(mean: np.ndarray, cov: np.ndarray, prior_cov: np.ndarray) -> float:
    """Closed-form KL(N(mean, cov) || N(0, prior_cov))."""
    d = len(mean)
    sign_p, logdet_p = np.linalg.slogdet(prior_cov)
    sign_q, logdet_q = np.linalg.slogdet(cov)
    if sign_p <= 0 or sign_q <= 0:
        raise NumericalError("covariance is not positive definite")
    inv = np.linalg.inv(prior_cov)
    return float(0.5 * (np.trace(inv @ cov) + mean @ inv @ mean - d + logdet_p - logdet_q))


def kl_standard_to_block_prior(prior: BlockPrior) -> float:
    """KL(N(0, I) || N(0, Sigma)) = (tr(Sigma^-1) - d + ln det Sigma) / 2."""
    cov = prior.covariance
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0 or not np.isfinite(logdet):
        raise NumericalError("block prior covariance is singular")
    return float(0.5 * (np.trace(np.linalg.inv(cov)) - prior.dim + logdet))


def sample_prior(prior: BlockPrior, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    eps = np.random.default_rng(seed).standard_normal((n, prior.dim))
    return eps @ prior.cholesky.T


def supervised_layer_loss(mu, log_var, s_sample, labels, classifier: Sequence[DenseParams], beta: float) -> Tensor:
    """Upper bound on I(h; s) - beta * I(s; y): KL to N(0, I) plus beta times the label cross-entropy."""
    kl = kl_diag_gaussian_to_standard(mu, log_var)
    ce = softmax_cross_entropy(mlp_forward(classifier, s_sample), labels)
    return G.add(kl, G.mul(ce, beta))


def _frozen(layers: Sequence[DenseParams]) -> list[DenseParams]:
    return [DenseParams(G.stop_gradient(l.weight), G.stop_gradient(l.bias)) for l in layers]


def max_entropy_erasure(h, classifier: Sequence[DenseParams], projection: Sequence[DenseParams]) -> Tensor:
    """Negative predictive entropy of the shared classifier applied to the
    projected carrier.  Minimizing it pushes the carrier's class prediction
    toward uniform.  Classifier and projection are frozen here; only the
    encoder producing ``h`` receives gradient."""
    logits = mlp_forward(_frozen(classifier), mlp_forward(_frozen(projection), h))
    return G.negate(predictive_entropy(logits))


def probe_loss(h, labels, classifier: Sequence[DenseParams], projection: Sequence[DenseParams]) -> Tensor:
    """Cross-entropy of the adversarial probe: the projection learns to read
    the label out of a detached carrier through the frozen shared classifier."""
    logits = mlp_forward(_frozen(classifier), mlp_forward(projection, G.stop_gradient(h)))
    return softmax_cross_entropy(logits, labels)


def total_supervised_loss(class_terms: Sequence, erasure_terms: Sequence, weights: LossWeights, recon=0.0) -> Tensor:
    total = G.as_tensor(0.0)
    for c, e in zip(class_terms, erasure_terms, strict=True):
        total = G.add(total, G.add(c, G.mul(e, weights.gamma)))
    return G.add(total, G.mul(recon, weights.beta))


def permute_joint(s_batch: np.ndarray, h_batch: np.ndarray, seed) -> np.ndarray:
    """Shuffle the rows of ``s`` and ``h`` independently and re-pair them,
    giving samples from the product of the two marginals."""
    s_batch, h_batch = np.asarray(s_batch), np.asarray(h_batch)
    n = s_batch.shape[0]
    if n < 2:
        raise ValueError("permutation needs at least two rows")
    if h_batch.shape[0] != n:
        raise ShapeError(f"row counts differ: {n} vs {h_batch.shape[0]}")
    rng = np.random.default_rng(seed)
    return np.concatenate([s_batch[rng.permutation(n)], h_batch[rng.permutation(n)]], axis=1)


def tc_estimate(discriminator: Callable, z_batch) -> Tensor:
    """Density-ratio estimate E[log D(z) / (1 - D(z))] for a probability-valued discriminator."""
    d = discriminator(z_batch)
    raw = d.value if isinstance(d, Tensor) else np.asarray(d)
    if np.any(raw < 0) or np.any(raw > 1):
        raise ValueError("discriminator output must be a probability")
    d = G.clip(G.as_tensor(d), PROB_CLAMP, 1 - PROB_CLAMP)
    return G.reduce_mean(G.add(G.log(d), G.negate(G.log(G.add(G.negate(d), 1.0)))))


class AdversarialTerms(NamedTuple):
    disc_loss: Tensor  # 3-way cross-entropy, trains the discriminator only
    gen_kl: Tensor  # estimate of KL(q(z) || prior), trains the encoder only
    gen_tc: Tensor  # estimate of KL(q(z) || q(s) q(h)), trains the encoder only


def discriminator_losses(discriminator, real_z, prior_samples, permuted_z) -> AdversarialTerms:
    """One discriminator scoring posterior (class 0), prior (1) and permuted (2) samples.

    ``discriminator`` is a list of dense layers producing 3 logits, or any
    callable mapping a batch to 3 logits (used as-is on both sides).
    """
    real_z = G.as_tensor(real_z)
    widths = {real_z.shape[-1], np.shape(prior_samples)[-1], np.shape(permuted_z)[-1]}
    if len(widths) != 1:
        raise ShapeError(f"posterior, prior and permuted widths differ: {widths}")
    if callable(discriminator):
        train_fn = frozen_fn = discriminator
    else:
        frozen = _frozen(discriminator)
        train_fn = lambda z: mlp_forward(discriminator, z)  # noqa: E731
        frozen_fn = lambda z: mlp_forward(frozen, z)  # noqa: E731
    batch = np.concatenate([real_z.value, np.asarray(prior_samples), np.asarray(permuted_z)])
    labels = np.repeat([POSTERIOR, PRIOR, PERMUTED], [real_z.shape[0], len(prior_samples), len(permuted_z)])
    disc_loss = softmax_cross_entropy(train_fn(batch), labels)

    logits = frozen_fn(real_z)
    post = G.slice_last(logits, POSTERIOR, POSTERIOR + 1)
    gen_kl = G.reduce_mean(G.add(post, G.negate(G.slice_last(logits, PRIOR, PRIOR + 1))))
    gen_tc = G.reduce_mean(G.add(post, G.negate(G.slice_last(logits, PERMUTED, PERMUTED + 1))))
    return AdversarialTerms(disc_loss, gen_kl, gen_tc)


def reconstruction_loss(x, x_hat) -> Tensor:
    """Per-image Bernoulli negative log-likelihood summed over pixels, averaged over the batch."""
    x = np.asarray(x.value if isinstance(x, Tensor) else x)
    x_hat = G.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"target {x.shape} and reconstruction {x_hat.shape} differ")
    p = G.clip(x_hat, PROB_CLAMP, 1 - PROB_CLAMP)
    ll = G.add(G.mul(G.log(p), x), G.mul(G.log(G.add(G.negate(p), 1.0)), 1.0 - x))
    return G.negate(G.reduce_mean(G.reduce_sum(ll, axis=-1)))


def total_unsupervised_loss(gen_kl_terms: Sequence, tc_terms: Sequence, recon, weights: LossWeights) -> Tensor:
    total = G.as_tensor(0.0)
    for kl, tc in zip(gen_kl_terms, tc_terms, strict=True):
        total = G.add(total, G.add(kl, G.mul(tc, weights.gamma)))
    return G.add(total, G.mul(recon, weights.beta))
