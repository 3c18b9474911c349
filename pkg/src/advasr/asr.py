"""Attention encoder-decoder ASR model with an auxiliary CTC head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .ctc import ctc_loss_batch
from .data import EOS, SOS
from .layers import BiLSTM, Linear, LocationAttention, LSTMCell, Module


class InputTooShortError(ValueError):
    pass


@dataclass
class AsrConfig:
    feat_dim: int = 8
    downsample: int = 2
    enc_layers: int = 2
    enc_units: int = 32
    att_dim: int = 32
    att_filters: int = 8
    att_width: int = 5
    dec_units: int = 32
    vocab_size: int = 16
    lambda_s2s: float = 0.5
    lambda_clm: float = 1e-4

    def validate(self):
        if not 0.0 <= self.lambda_s2s <= 1.0:
            raise ContractError(f"lambda_s2s must lie in [0, 1], got {self.lambda_s2s}")
        if self.lambda_clm < 0:
            raise ContractError(f"lambda_clm must be nonnegative, got {self.lambda_clm}")
        if self.vocab_size < 2:
            raise ContractError("vocab_size must be at least 2")
        if min(self.feat_dim, self.downsample, self.enc_layers, self.enc_units,
               self.att_dim, self.dec_units) < 1:
            raise ContractError("model sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AsrOutput:
    log_att: Tensor          # (B, U+1, V) log of the attention distributions
    att: Tensor              # (B, U+1, V) attention decoder distributions
    log_ctc: Tensor          # (B, T_enc, V) CTC head log-probabilities
    dec_lens: np.ndarray
    enc_lens: np.ndarray
    targets: np.ndarray      # (B, U+1) next-token targets ending in EOS
    alignments: list = field(default_factory=list)


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    align: Tensor


def one_hot(tokens, size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.zeros(tokens.shape + (size,))
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return out


class AsrModel(Module):
    def __init__(self, config: AsrConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        enc_in = c.feat_dim * c.downsample
        layers = []
        for i in range(c.enc_layers):
            layers.append(BiLSTM(enc_in if i == 0 else 2 * c.enc_units, c.enc_units, rng))
        self.encoder = layers
        enc_dim = 2 * c.enc_units
        self.ctc_head = Linear(enc_dim, c.vocab_size, rng)
        self.attention = LocationAttention(enc_dim, c.dec_units, c.att_dim, rng,
                                           c.att_filters, c.att_width)
        self.decoder = LSTMCell(c.vocab_size + enc_dim, c.dec_units, rng)
        self.output = Linear(c.dec_units, c.vocab_size, rng)

    # -- encoder --------------------------------------------------------
    def encode(self, feats, lengths=None):
        """Stack every ``downsample`` frames, then run the BLSTM layers.

        Returns (H, enc_lens) with enc_lens = lengths // downsample.
        """
        feats = np.asarray(feats.data if isinstance(feats, Tensor) else feats, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        B, N, d = feats.shape
        k = self.config.downsample
        lengths = np.full(B, N) if lengths is None else np.asarray(lengths)
        if d != self.config.feat_dim:
            raise ContractError(f"feature dim {d} != configured {self.config.feat_dim}")
        if np.any(lengths < k):
            raise InputTooShortError(f"inputs need at least {k} frames")
        T = N // k
        x = Tensor(feats[:, :T * k].reshape(B, T, k * d))
        enc_lens = lengths // k
        for layer in self.encoder:
            x = layer(x, enc_lens)
        return x, enc_lens

    def ctc_log_probs(self, H) -> Tensor:
        return ad.log_softmax(self.ctc_head(H), axis=-1)

    # -- decoder --------------------------------------------------------
    def initial_state(self, enc_lens, T: int) -> DecoderState:
        B = len(enc_lens)
        mask = np.arange(T)[None, :] < np.asarray(enc_lens)[:, None]
        align = mask / mask.sum(axis=1, keepdims=True)
        h, c = self.decoder.initial_state(B)
        return DecoderState(h, c, Tensor(align))

    def decode_step(self, H, y_prev, state: DecoderState, mask=None, keys=None):
        """One decoder step: returns (log distribution over V, new state).

        ``y_prev`` is a (B, V) one-hot (or soft) vector of the previous token.
        """
        y_prev = ad.as_tensor(y_prev)
        if y_prev.shape[-1] != self.config.vocab_size:
            raise ContractError("decode_step: previous-token vector has wrong width")
        context, align = self.attention(H, state.h, state.align, mask, keys)
        h, c = self.decoder(ad.concatenate([y_prev, context], axis=-1), state.h, state.c)
        logp = ad.log_softmax(self.output(h), axis=-1)
        return logp, DecoderState(h, c, align)

    def forward_teacher_forced(self, feats, lengths, texts) -> AsrOutput:
        if any(len(t) == 0 for t in texts):
            raise ContractError("forward_teacher_forced: empty transcript")
        H, enc_lens = self.encode(feats, lengths)
        B, T, _ = H.shape
        V = self.config.vocab_size
        U = max(len(t) for t in texts)
        inputs = np.full((B, U + 1), EOS, dtype=np.int64)
        targets = np.full((B, U + 1), EOS, dtype=np.int64)
        for b, t in enumerate(texts):
            inputs[b, 0] = SOS
            inputs[b, 1:len(t) + 1] = t
            targets[b, :len(t)] = t
        dec_lens = np.array([len(t) + 1 for t in texts])
        mask = np.arange(T)[None, :] < enc_lens[:, None]
        keys = self.attention.precompute(H)
        state = self.initial_state(enc_lens, T)
        steps, aligns = [], []
        prev = one_hot(inputs, V)
        for u in range(U + 1):
            logp, state = self.decode_step(H, prev[:, u], state, mask, keys)
            steps.append(logp)
            aligns.append(state.align.data)
        log_att = ad.stack(steps, axis=1)
        return AsrOutput(log_att, ad.exp(log_att), self.ctc_log_probs(H), dec_lens, enc_lens,
                         targets, aligns)

    def forward_free_running(self, feats, lengths, n_steps) -> Tensor:
        """Distributions from feeding back the argmax token; (B, max(n_steps), V)."""
        H, enc_lens = self.encode(feats, lengths)
        B, T, _ = H.shape
        V = self.config.vocab_size
        mask = np.arange(T)[None, :] < enc_lens[:, None]
        keys = self.attention.precompute(H)
        state = self.initial_state(enc_lens, T)
        prev = one_hot(np.full(B, SOS), V)
        steps = []
        for _ in range(int(np.max(n_steps))):
            logp, state = self.decode_step(H, prev, state, mask, keys)
            steps.append(logp)
            prev = one_hot(np.argmax(logp.data, axis=-1), V)
        return ad.exp(ad.stack(steps, axis=1))


def seq2seq_loss(log_att, targets, lengths=None) -> Tensor:
    """Per-sample -sum_t log p_t[y_t] over valid steps.  log_att: (B, U, V)."""
    log_att = ad.as_tensor(log_att)
    if log_att.ndim == 2:
        log_att = ad.reshape(log_att, (1,) + log_att.shape)
        targets = np.asarray(targets)[None]
    targets = np.asarray(targets, dtype=np.int64)
    B, U, V = log_att.shape
    if targets.shape != (B, U):
        raise ContractError(f"seq2seq_loss: targets {targets.shape} vs outputs {(B, U)}")
    lengths = np.full(B, U) if lengths is None else np.asarray(lengths)
    picked = log_att[np.arange(B)[:, None], np.arange(U)[None, :], targets]
    valid = (np.arange(U)[None, :] < lengths[:, None]).astype(np.float64)
    return -ad.sum_(picked * valid, axis=1)


def asr_total_loss(l_s2s, l_ctc, clm_score, lambda_s2s: float, lambda_clm: float):
    """lambda_s2s * L_s2s + (1 - lambda_s2s) * L_ctc - lambda_clm * score."""
    return lambda_s2s * l_s2s + (1.0 - lambda_s2s) * l_ctc - lambda_clm * clm_score


def asr_losses(model: AsrModel, batch, out: AsrOutput | None = None):
    """Batch-mean seq2seq and CTC losses plus the forward output."""
    out = out or model.forward_teacher_forced(batch.feats, batch.feat_lens, batch.texts)
    l_s2s = ad.mean(seq2seq_loss(out.log_att, out.targets, out.dec_lens))
    l_ctc = ad.mean(ctc_loss_batch(out.log_ctc, batch.texts, out.enc_lens))
    return l_s2s, l_ctc, out
