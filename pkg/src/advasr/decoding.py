"""Greedy and beam-search decoding with optional shallow fusion and CTC rescoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .asr import AsrModel, DecoderState, one_hot
from .autodiff import ContractError, Tensor
from .ctc import ctc_loss_batch, InfeasibleAlignmentError
from .data import EOS, SOS
from .rnnlm import LmState, RnnLm


@dataclass
class Hypothesis:
    tokens: list
    att_score: float
    lm_score: float
    score: float
    finished: bool


def _prepare(asr: AsrModel, feats, length=None):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    n = feats.shape[1] if length is None else int(length)
    feats = feats[:, :n]
    H, enc_lens = asr.encode(feats, [n])
    return H, enc_lens


def greedy_decode(asr: AsrModel, feats, max_len: int | None = None, length=None) -> list:
    """Argmax token per step until EOS or ``max_len``; ties go to the lowest index."""
    with ad.no_grad():
        H, enc_lens = _prepare(asr, feats, length)
        T = H.shape[1]
        max_len = T + 2 if max_len is None else max_len
        V = asr.config.vocab_size
        keys = asr.attention.precompute(H)
        state = asr.initial_state(enc_lens, T)
        prev, out = SOS, []
        for _ in range(max_len):
            logp, state = asr.decode_step(H, one_hot([prev], V), state, None, keys)
            prev = int(np.argmax(logp.data[0]))
            if prev == EOS:
                break
            out.append(prev)
        return out


def greedy_decode_batch(asr: AsrModel, feats, lengths, max_len: int | None = None) -> list:
    """Batched greedy decoding of a padded feature batch."""
    with ad.no_grad():
        H, enc_lens = asr.encode(feats, lengths)
        B, T, _ = H.shape
        limits = enc_lens + 2 if max_len is None else np.full(B, max_len)
        V = asr.config.vocab_size
        mask = np.arange(T)[None, :] < enc_lens[:, None]
        keys = asr.attention.precompute(H)
        state = asr.initial_state(enc_lens, T)
        prev = np.full(B, SOS)
        outs = [[] for _ in range(B)]
        done = limits <= 0
        for _ in range(int(limits.max())):
            if done.all():
                break
            logp, state = asr.decode_step(H, one_hot(prev, V), state, mask, keys)
            prev = np.argmax(logp.data, axis=-1)
            for b in np.flatnonzero(~done):
                if prev[b] == EOS:
                    done[b] = True
                else:
                    outs[b].append(int(prev[b]))
                    done[b] = len(outs[b]) >= limits[b]
        return outs


def _select(state: DecoderState, rows) -> DecoderState:
    return DecoderState(Tensor(state.h.data[rows]), Tensor(state.c.data[rows]),
                        Tensor(state.align.data[rows]))


def beam_decode(asr: AsrModel, feats, beam: int = 20, lm: RnnLm | None = None,
                lm_weight: float = 0.0, ctc_weight: float = 0.0, max_len: int | None = None,
                length_penalty: float = 0.0, length=None) -> list:
    """Ranked hypotheses (best first).

    Each step keeps the ``beam`` best extensions of the live hypotheses by
    attention log-prob plus ``lm_weight`` times LM log-prob.  Extensions ending
    in EOS leave the beam as finished; hypotheses still live at ``max_len`` are
    finished as they stand.  With ``ctc_weight`` the final scores gain that
    multiple of the CTC log-likelihood.
    """
    if beam < 1:
        raise ContractError("beam_decode: beam must be at least 1")
    with ad.no_grad():
        H, enc_lens = _prepare(asr, feats, length)
        T = H.shape[1]
        max_len = T + 2 if max_len is None else max_len
        V = asr.config.vocab_size
        use_lm = lm is not None and lm_weight != 0.0

        live_tokens = [[]]
        att = np.zeros(1)
        lms = np.zeros(1)
        state = asr.initial_state(enc_lens, T)
        lm_state = lm.initial_state(1) if use_lm else None
        prev = np.array([SOS])
        finished: list = []
        for step in range(max_len):
            n = len(live_tokens)
            Hn = Tensor(np.repeat(H.data, n, axis=0))
            keys = asr.attention.precompute(Hn)
            logp, new_state = asr.decode_step(Hn, one_hot(prev, V), state, None, keys)
            cand_att = att[:, None] + logp.data
            if use_lm:
                lm_logp, new_lm = lm.step(lm_state, prev)
                cand_lm = lms[:, None] + lm_logp.data
            else:
                cand_lm = np.zeros_like(cand_att)
            total = cand_att + lm_weight * cand_lm
            flat = total.ravel()
            order = np.argsort(-flat, kind="stable")[:beam]
            keep_rows, keep_tok = [], []
            for idx in order:
                row, tok = divmod(int(idx), V)
                if tok == EOS:
                    finished.append(Hypothesis(live_tokens[row] + [EOS], cand_att[row, tok],
                                               cand_lm[row, tok], flat[idx], True))
                else:
                    keep_rows.append(row)
                    keep_tok.append(tok)
            if not keep_rows:
                break
            rows = np.array(keep_rows)
            live_tokens = [live_tokens[r] + [t] for r, t in zip(keep_rows, keep_tok)]
            att = cand_att[rows, keep_tok]
            lms = cand_lm[rows, keep_tok]
            state = _select(new_state, rows)
            if use_lm:
                lm_state = LmState(Tensor(new_lm.h.data[rows]), Tensor(new_lm.c.data[rows]))
            prev = np.array(keep_tok)
        else:
            for toks, a, l_ in zip(live_tokens, att, lms):
                finished.append(Hypothesis(toks, a, l_, a + lm_weight * l_, False))

        for hyp in finished:
            hyp.score = float(hyp.score) + length_penalty * len(_strip(hyp.tokens))
        if ctc_weight:
            log_ctc = asr.ctc_log_probs(H)
            for hyp in finished:
                hyp.score += ctc_weight * ctc_log_likelihood(log_ctc, _strip(hyp.tokens),
                                                             int(enc_lens[0]))
        finished.sort(key=lambda h: -h.score)
        return finished


def _strip(tokens) -> list:
    return [t for t in tokens if t != EOS]


def ctc_log_likelihood(log_ctc, tokens, enc_len: int) -> float:
    tokens = [t for t in tokens if t != 0]
    try:
        return -float(ctc_loss_batch(log_ctc, [tokens], [enc_len]).data[0])
    except InfeasibleAlignmentError:
        return -1e30


def best_tokens(hyps) -> list:
    return _strip(hyps[0].tokens)


def sequence_score(asr: AsrModel, feats, tokens, lm: RnnLm | None = None,
                   lm_weight: float = 0.0) -> float:
    """Fused score of a complete token sequence by explicit step-by-step scoring."""
    with ad.no_grad():
        H, enc_lens = _prepare(asr, feats)
        T = H.shape[1]
        V = asr.config.vocab_size
        keys = asr.attention.precompute(H)
        state = asr.initial_state(enc_lens, T)
        lm_state = lm.initial_state(1) if lm is not None else None
        prev, total = SOS, 0.0
        for tok in tokens:
            logp, state = asr.decode_step(H, one_hot([prev], V), state, None, keys)
            total += float(logp.data[0, tok])
            if lm is not None and lm_weight:
                lm_logp, lm_state = lm.step(lm_state, [prev])
                total += lm_weight * float(lm_logp.data[0, tok])
            prev = tok
        return total
