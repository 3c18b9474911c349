"""Character-level LSTM language model for shallow fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import EOS, SOS, rng_for
from .layers import Linear, LSTMCell, Module
from .optim import Adam


@dataclass
class LmConfig:
    vocab_size: int = 16
    embed_dim: int = 32
    hidden: int = 64
    lr: float = 1e-2
    batch_size: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LmState:
    h: Tensor
    c: Tensor


class RnnLm(Module):
    def __init__(self, config: LmConfig, rng: np.random.Generator):
        self.config = config
        self.embed = Linear(config.vocab_size, config.embed_dim, rng, bias=False)
        self.cell = LSTMCell(config.embed_dim, config.hidden, rng)
        self.output = Linear(config.hidden, config.vocab_size, rng)

    def initial_state(self, batch: int = 1) -> LmState:
        h, c = self.cell.initial_state(batch)
        return LmState(h, c)

    def step(self, state: LmState, tokens):
        """Batched step: tokens (B,) -> ((B, V) log-probs, new state)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        V = self.config.vocab_size
        if np.any(tokens < 0) or np.any(tokens >= V):
            raise ContractError("rnnlm: token outside vocabulary")
        x = np.zeros((len(tokens), V))
        x[np.arange(len(tokens)), tokens] = 1.0
        h, c = self.cell(self.embed(x), state.h, state.c)
        return ad.log_softmax(self.output(h), axis=-1), LmState(h, c)

    def sequence_nll(self, seqs) -> Tensor:
        """Per-sequence summed NLL of tokens followed by EOS, starting from SOS."""
        B = len(seqs)
        U = max(len(s) for s in seqs) + 1
        inputs = np.full((B, U), EOS, dtype=np.int64)
        targets = np.full((B, U), EOS, dtype=np.int64)
        for b, s in enumerate(seqs):
            inputs[b, 0] = SOS
            inputs[b, 1:len(s) + 1] = s
            targets[b, :len(s)] = s
        lens = np.array([len(s) + 1 for s in seqs])
        state = self.initial_state(B)
        picked = []
        for u in range(U):
            logp, state = self.step(state, inputs[:, u])
            picked.append(logp[np.arange(B), targets[:, u]])
        valid = (np.arange(U)[None, :] < lens[:, None]).astype(np.float64)
        return -ad.sum_(ad.stack(picked, axis=1) * valid, axis=1)


def lm_score_next(lm: RnnLm, state: LmState | None, token: int):
    """Log-probabilities over V for the token after ``token``; returns (logp, state)."""
    state = state or lm.initial_state(1)
    with ad.no_grad():
        logp, new = lm.step(state, [token])
    return logp.data[0], new


def perplexity(lm: RnnLm, corpus) -> float:
    """exp of mean per-token NLL, counting the end token of each sequence."""
    if not corpus:
        raise ContractError("perplexity: empty corpus")
    with ad.no_grad():
        total = 0.0
        for start in range(0, len(corpus), 256):
            total += float(np.sum(lm.sequence_nll(corpus[start:start + 256]).data))
    n_tokens = sum(len(s) + 1 for s in corpus)
    return float(np.exp(total / n_tokens))


def lm_train(corpus, config: LmConfig, epochs: int = 5, seed: int = 0,
             max_steps: int | None = None, lm: RnnLm | None = None):
    """Cross-entropy training; returns (model, per-epoch perplexity log).

    An epoch that raises the corpus perplexity is rolled back, the optimizer
    moments are reset and the learning rate is halved, so the logged
    perplexity never increases.
    """
    if not corpus:
        raise ContractError("lm_train: empty corpus")
    lm = lm or RnnLm(config, rng_for(seed, "lm-init"))
    opt = Adam(lm.parameters(), lr=config.lr)
    params = lm.parameters()
    best = perplexity(lm, corpus)
    log, steps = [], 0
    for epoch in range(epochs):
        snapshot = {k: v.copy() for k, v in lm.state_dict().items()}
        order = rng_for(seed, f"lm-shuffle:{epoch}").permutation(len(corpus))
        for start in range(0, len(corpus), config.batch_size):
            batch = [corpus[i] for i in order[start:start + config.batch_size]]
            nll = lm.sequence_nll(batch)
            loss = ad.sum_(nll) * (1.0 / sum(len(s) + 1 for s in batch))
            opt.step(ad.gradient(loss, params))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        ppl = perplexity(lm, corpus)
        if ppl > best:
            lm.load_state_dict(snapshot)
            opt = Adam(params, lr=opt.lr * 0.5)
        else:
            best = ppl
        log.append(best)
        if max_steps is not None and steps >= max_steps:
            break
    return lm, log
