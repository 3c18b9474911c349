"""Criticizing language model: a convolutional text critic and its WGAN-GP objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .layers import BatchNorm, Conv1d, Linear, Module

MIN_LENGTH = 4


@dataclass
class ClmConfig:
    vocab_size: int = 16
    embed_dim: int = 128
    window1: int = 2
    stride1: int = 1
    window2: int = 3
    stride2: int = 1
    batchnorm: bool = True
    lambda_clm: float = 1e-4
    lambda_gp: float = 10.0

    def validate(self):
        if min(self.window1, self.window2, self.stride1, self.stride2) < 1:
            raise ContractError("conv windows and strides must be positive")
        if self.lambda_gp < 0 or self.lambda_clm < 0:
            raise ContractError("critic loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


class Critic(Module):
    """Projection -> conv -> conv -> masked temporal mean -> scalar.

    Batch normalization follows the projection and each convolution, relu
    follows each convolution.
    """

    def __init__(self, config: ClmConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        self.proj = Linear(c.vocab_size, c.embed_dim, rng)
        self.conv1 = Conv1d(c.embed_dim, c.embed_dim, c.window1, rng, c.stride1)
        self.conv2 = Conv1d(c.embed_dim, c.embed_dim, c.window2, rng, c.stride2)
        self.out = Linear(c.embed_dim, 1, rng)
        if c.batchnorm:
            self.bn0 = BatchNorm(c.embed_dim)
            self.bn1 = BatchNorm(c.embed_dim)
            self.bn2 = BatchNorm(c.embed_dim)

    def min_length(self) -> int:
        c = self.config
        return max(MIN_LENGTH, c.window2 * c.stride1 + c.window1 - 1)

    def _norm(self, name, h, lens):
        if not self.config.batchnorm:
            return h
        mask = np.arange(h.shape[1])[None, :] < lens[:, None]
        return getattr(self, name)(h, mask)

    def __call__(self, x, lengths=None) -> Tensor:
        """Scores (B,) for a (B, L, V) batch of distribution sequences."""
        x = ad.as_tensor(x)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        B, L, V = x.shape
        lens = np.full(B, L) if lengths is None else np.asarray(lengths)
        if np.any(lens < self.min_length()):
            raise ContractError(f"critic needs sequences of length >= {self.min_length()}")
        h = self._norm("bn0", self.proj(x), lens)
        lens = self.conv1.out_length(lens)
        h = ad.relu(self._norm("bn1", self.conv1(h), lens))
        lens = self.conv2.out_length(lens)
        h = ad.relu(self._norm("bn2", self.conv2(h), lens))
        valid = (np.arange(h.shape[1])[None, :] < lens[:, None]) / lens[:, None]
        pooled = ad.sum_(h * valid[..., None], axis=1)
        return ad.reshape(self.out(pooled), (B,))


def one_hot_batch(seqs, vocab_size: int) -> tuple:
    """Pad token sequences into a (B, L, V) one-hot batch plus valid lengths."""
    lens = np.array([len(s) for s in seqs])
    x = np.zeros((len(seqs), lens.max(), vocab_size))
    for b, s in enumerate(seqs):
        x[b, np.arange(len(s)), s] = 1.0
    return x, lens


def clm_score(critic: Critic, x, lengths=None) -> Tensor:
    """Quality score per sequence; token lists are encoded as one-hot rows."""
    if isinstance(x, (list, tuple)) and x and not isinstance(x[0], np.ndarray) \
            and np.ndim(x[0]) == 1:
        x, lengths = one_hot_batch(x, critic.config.vocab_size)
    return critic(x, lengths)


def critic_distance_loss(critic: Critic, real, real_lens, fake, fake_lens) -> Tensor:
    """mean CLM(fake) - mean CLM(real).

    Both batches go through the critic together so batch statistics are shared.
    """
    real, fake = ad.as_tensor(real), ad.as_tensor(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ContractError("critic_distance_loss: empty batch")
    L = max(real.shape[1], fake.shape[1])
    real = ad.pad_time(real, 0, L - real.shape[1])
    fake = ad.pad_time(fake, 0, L - fake.shape[1])
    scores = critic(ad.concatenate([real, fake], axis=0),
                    np.concatenate([np.asarray(real_lens), np.asarray(fake_lens)]))
    n_real = real.shape[0]
    return ad.mean(scores[n_real:]) - ad.mean(scores[:n_real])


def interpolate(real, fake, eps) -> Tensor:
    """Per-sample convex combination eps * real + (1 - eps) * fake."""
    real, fake = ad.as_tensor(real), ad.as_tensor(fake)
    if real.shape != fake.shape:
        raise ContractError(f"interpolate: shapes differ {real.shape} vs {fake.shape}")
    e = np.asarray(eps, dtype=np.float64).reshape((-1,) + (1,) * (real.ndim - 1))
    return real * e + fake * (1.0 - e)


def gradient_penalty(critic: Critic, real, fake, lengths, eps) -> Tensor:
    """mean over samples of (||d CLM(y_hat) / d y_hat|| - 1)^2.

    The critic runs in evaluation mode so each sample's input gradient depends
    on that sample alone.  The result stays differentiable in the critic
    parameters.
    """
    real, fake = ad.as_tensor(real).detach(), ad.as_tensor(fake).detach()
    y_hat = interpolate(real, fake, eps)
    y_hat = Tensor(y_hat.data, requires_grad=True)
    was_training = [m.training for m in critic.modules() if isinstance(m, BatchNorm)]
    critic.eval()
    try:
        scores = critic(y_hat, lengths)
        (grad,) = ad.gradient(ad.sum_(scores), [y_hat], create_graph=True)
    finally:
        for m, flag in zip([m for m in critic.modules() if isinstance(m, BatchNorm)],
                           was_training):
            m.training = flag
    norms = ad.norm(ad.reshape(grad, (grad.shape[0], -1)), axis=1)
    return ad.mean((norms - 1.0) ** 2)


def clm_total_loss(critic: Critic, real, real_lens, fake, fake_lens, eps,
                   lambda_clm: float, lambda_gp: float):
    """lambda_clm * L_D + lambda_gp * gp; returns (total, L_D, gp).

    ``real`` and ``fake`` must share their padded shape and valid lengths for
    the interpolation.  The penalty is evaluated first so it reads the running
    batch-norm statistics from before this call's update.
    """
    gp = gradient_penalty(critic, real, fake, fake_lens, eps)
    l_d = critic_distance_loss(critic, real, real_lens, fake, fake_lens)
    return lambda_clm * l_d + lambda_gp * gp, l_d, gp
