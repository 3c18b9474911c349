import numpy as np
import pytest

from advasr import autodiff as ad
from advasr.autodiff import Tensor, gradient
from advasr.clm import (ClmConfig, Critic, clm_score, clm_total_loss, critic_distance_loss,
                        gradient_penalty, interpolate, one_hot_batch)
from advasr.data import rng_for, sample_corpus, toy_grammar
from advasr.optim import Adam
from helpers import param_fd_error

SMALL = ClmConfig(vocab_size=5, embed_dim=6)


def _constant(critic, value=0.7):
    critic.out.weight.data[:] = 0.0
    critic.out.bias.data[:] = value
    return critic


def _dists(rng, B, L, V):
    return rng.dirichlet(np.ones(V), size=(B, L))


def test_constant_critic_scores_bias(rng):
    critic = _constant(Critic(SMALL, rng))
    s = critic(_dists(rng, 3, 6, 5)).data
    np.testing.assert_array_equal(s, 0.7)


def test_constant_critic_losses(rng):
    critic = _constant(Critic(SMALL, rng))
    real, fake = _dists(rng, 4, 5, 5), _dists(rng, 4, 5, 5)
    lens = np.full(4, 5)
    assert critic_distance_loss(critic, real, lens, fake, lens).item() == 0.0
    eps = rng.uniform(size=4)
    assert gradient_penalty(critic, real, fake, lens, eps).item() == 1.0
    total, _, _ = clm_total_loss(critic, real, lens, fake, lens, eps, 1e-4, 10.0)
    assert total.item() == 10.0
    total, _, _ = clm_total_loss(Critic(SMALL, rng), real, lens, fake, lens, eps, 0.0, 0.0)
    assert total.item() == 0.0


class _MeanCritic:
    """s = w . (temporal mean of the input)."""

    def __init__(self, w):
        self.w = w

    def __call__(self, x, lengths=None):
        pooled = ad.mean(ad.as_tensor(x), axis=1)
        return ad.reshape(ad.matmul(pooled, Tensor(self.w[:, None])), (-1,))

    def modules(self):
        return []

    def eval(self):
        return self


def test_unit_norm_linear_critic_has_zero_penalty(rng):
    L, V = 6, 5
    w = rng.normal(size=V)
    # d s / d x[t, v] = w[v] / L, so the input-gradient norm is ||w|| / sqrt(L)
    w *= np.sqrt(L) / np.linalg.norm(w)
    critic = _MeanCritic(w)
    real, fake = _dists(rng, 3, L, V), _dists(rng, 3, L, V)
    gp = gradient_penalty(critic, real, fake, np.full(3, L), rng.uniform(size=3))
    assert gp.item() == pytest.approx(0.0, abs=1e-12)


def test_critic_shift_gives_negative_gap(rng):
    c = 2.5
    critic = _MeanCritic(np.array([0.0, c, 0.0, 0.0, 0.0]))
    real, _ = one_hot_batch([[1] * 5, [1] * 5], 5)
    fake, _ = one_hot_batch([[2] * 5, [3] * 5, [4] * 5], 5)
    loss = critic_distance_loss(critic, real, np.full(2, 5), fake, np.full(3, 5)).item()
    assert loss == pytest.approx(-c, abs=1e-12)


def test_distance_loss_matches_loop_oracle(rng):
    critic = Critic(SMALL, rng).eval()
    for _ in range(10):
        real, fake = _dists(rng, 3, 7, 5), _dists(rng, 2, 5, 5)
        rl, fl = np.array([7, 5, 6]), np.array([5, 4])
        got = critic_distance_loss(critic, real, rl, fake, fl).item()
        s_real = [critic(real[i:i + 1, :rl[i]]).item() for i in range(3)]
        s_fake = [critic(fake[i:i + 1, :fl[i]]).item() for i in range(2)]
        assert abs(got - (sum(s_fake) / 2 - sum(s_real) / 3)) < 1e-12


def test_score_is_padding_invariant_and_order_sensitive(rng):
    critic = Critic(SMALL, rng).eval()
    x = _dists(rng, 1, 6, 5)
    padded = np.concatenate([x, _dists(rng, 1, 3, 5)], axis=1)
    assert abs(critic(x).item() - critic(padded, [6]).item()) < 1e-12
    seq = [1, 2, 3, 4, 1, 3]
    a = clm_score(critic, [seq]).item()
    b = clm_score(critic, [seq[::-1]]).item()
    assert a != b
    onehot, lens = one_hot_batch([seq], 5)
    assert clm_score(critic, onehot, lens).item() == a


def test_short_sequences_rejected(rng):
    with pytest.raises(ad.ContractError):
        Critic(SMALL, rng)(_dists(rng, 1, 3, 5))
    with pytest.raises(ad.ContractError):
        critic_distance_loss(Critic(SMALL, rng), np.zeros((0, 5, 5)), [], _dists(rng, 1, 5, 5), [5])


def test_interpolation(rng):
    real, fake = _dists(rng, 4, 5, 5), _dists(rng, 4, 5, 5)
    np.testing.assert_array_equal(interpolate(real, fake, np.ones(4)).data, real)
    np.testing.assert_array_equal(interpolate(real, fake, np.zeros(4)).data, fake)
    mix = interpolate(real, fake, rng.uniform(size=4)).data
    assert np.all(np.abs(mix.sum(-1) - 1) < 1e-12)
    with pytest.raises(ad.ContractError):
        interpolate(real, fake[:, :4], np.ones(4))


def test_penalty_nonnegative(rng):
    critic = Critic(SMALL, rng)
    for _ in range(20):
        real, fake = _dists(rng, 3, 5, 5), _dists(rng, 3, 5, 5)
        assert gradient_penalty(critic, real, fake, np.full(3, 5), rng.uniform(size=3)).item() >= 0


def test_penalty_restores_training_mode(rng):
    critic = Critic(SMALL, rng)
    critic.train()
    real, fake = _dists(rng, 3, 5, 5), _dists(rng, 3, 5, 5)
    gradient_penalty(critic, real, fake, np.full(3, 5), np.full(3, 0.5))
    assert critic.bn0.training and critic.bn2.training


@pytest.mark.parametrize("batchnorm", [True, False])
def test_total_loss_parameter_gradients(rng, batchnorm):
    critic = Critic(ClmConfig(vocab_size=3, embed_dim=3, batchnorm=batchnorm), rng)
    real, fake = _dists(rng, 3, 5, 3), _dists(rng, 3, 5, 3)
    lens, eps = np.array([5, 4, 5]), rng.uniform(size=3)
    if batchnorm:
        critic(real)
        critic.bn0.running_var[:] = rng.uniform(0.5, 1.5, size=3)

    def loss():
        saved = [(m.running_mean.copy(), m.running_var.copy())
                 for m in (getattr(critic, n, None) for n in ("bn0", "bn1", "bn2")) if m]
        total = clm_total_loss(critic, real, lens, fake, lens, eps, 0.3, 10.0)[0]
        for m, (mu, var) in zip([m for m in (getattr(critic, n, None)
                                             for n in ("bn0", "bn1", "bn2")) if m], saved):
            m.running_mean[:], m.running_var[:] = mu, var
        return total

    assert param_fd_error(critic, loss) < 1e-4


def test_total_loss_recomposition(rng):
    critic = Critic(SMALL, rng)
    real, fake = _dists(rng, 4, 6, 5), _dists(rng, 4, 6, 5)
    lens, eps = np.full(4, 6), rng.uniform(size=4)
    total, l_d, gp = clm_total_loss(critic, real, lens, fake, lens, eps, 0.25, 10.0)
    assert abs(total.item() - (0.25 * l_d.item() + 10.0 * gp.item())) < 1e-12


def _train_separable(seed, steps=50, lambda_clm=1.0):
    g = toy_grammar()
    V = len(g.symbols) + 3
    rng = rng_for(seed, "clm-test")
    critic = Critic(ClmConfig(vocab_size=V, embed_dim=16), rng)
    opt = Adam(critic.parameters(), lr=1e-3)
    corpus = [s for s in sample_corpus(g, 400, seed) if len(s) >= 6]
    losses = []
    for step in range(steps):
        idx = rng.choice(len(corpus), 16)
        real, _ = one_hot_batch([[3 + g.symbols.index(c) for c in corpus[i][:6]] for i in idx], V)
        fake = np.full((16, 6, V), 1.0 / V)
        lens = np.full(16, 6)
        total, _, _ = clm_total_loss(critic, real, lens, fake, lens, rng.uniform(size=16),
                                     lambda_clm, 10.0)
        opt.step([g.data for g in gradient(total, critic.parameters())])
        losses.append(total.item())
    critic.eval()
    s_real = critic(real).data.mean()
    s_fake = critic(fake).data.mean()
    return losses, s_real, s_fake


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_critic_learns_separable_problem(seed):
    losses, s_real, s_fake = _train_separable(seed)
    assert losses[-1] < losses[0]
    assert s_real > s_fake
