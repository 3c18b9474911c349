"""CTC loss via the blank-interleaved forward recursion in log space.

The blank symbol is vocabulary index 0.  Unreachable lattice cells hold the
sentinel ``NEG_INF`` (-1e30) instead of -inf so every intermediate stays
finite and differentiable.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, ContractError, Tensor

BLANK = 0


class InfeasibleAlignmentError(ValueError):
    pass


def expand_target(tokens, blank: int = BLANK) -> np.ndarray:
    """Interleave blanks: (blank, y1, blank, ..., yU, blank)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    ext = np.full(2 * len(tokens) + 1, blank, dtype=np.int64)
    ext[1::2] = tokens
    return ext


def min_frames(tokens) -> int:
    """Shortest input that can emit ``tokens``: one frame each plus a blank between repeats."""
    tokens = list(tokens)
    return len(tokens) + sum(a == b for a, b in zip(tokens, tokens[1:]))


def collapse(path, blank: int = BLANK) -> list:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != blank:
            out.append(int(tok))
        prev = tok
    return out


def ctc_loss_batch(log_probs, targets, input_lengths=None, blank: int = BLANK) -> Tensor:
    """Per-sample CTC negative log-likelihood.

    log_probs: (B, T, V) log-domain tensor; targets: list of token lists;
    input_lengths: valid frames per sample (defaults to T).  Returns (B,).
    """
    log_probs = ad.as_tensor(log_probs)
    B, T, V = log_probs.shape
    if not 0 <= blank < V:
        raise ContractError(f"ctc: blank index {blank} outside vocabulary of size {V}")
    input_lengths = np.full(B, T) if input_lengths is None else np.asarray(input_lengths)
    if len(targets) != B:
        raise ContractError("ctc: one target per batch element required")
    for b, tgt in enumerate(targets):
        if any(t == blank or not 0 <= t < V for t in tgt):
            raise ContractError("ctc: target contains blank or out-of-range token")
        if input_lengths[b] < min_frames(tgt):
            raise InfeasibleAlignmentError(
                f"ctc: {input_lengths[b]} frames cannot emit {len(tgt)} tokens "
                f"(needs {min_frames(tgt)})")

    S = 2 * max(len(t) for t in targets) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    skip_ok = np.zeros((B, S), dtype=bool)
    for b, tgt in enumerate(targets):
        e = expand_target(tgt, blank)
        ext[b, :len(e)] = e
        for s in range(3, len(e), 2):
            skip_ok[b, s] = e[s] != e[s - 2]
    skip_pen = np.where(skip_ok, 0.0, NEG_INF)

    emit = log_probs[np.arange(B)[:, None, None], np.arange(T)[None, :, None], ext[:, None, :]]
    init = np.full((B, S), NEG_INF)
    init[:, :2] = 0.0
    alpha = emit[:, 0, :] + init
    neg_col = Tensor(np.full((B, 1), NEG_INF))
    neg_col2 = Tensor(np.full((B, 2), NEG_INF))
    for t in range(1, T):
        stay = alpha
        step = ad.concatenate([neg_col, alpha[:, :-1]], axis=1)
        skip = ad.concatenate([neg_col2, alpha[:, :-2]], axis=1) + skip_pen if S > 2 else None
        parts = [stay, step] + ([skip] if skip is not None else [])
        new = ad.logsumexp(ad.stack(parts, axis=0), axis=0) + emit[:, t, :]
        active = (t < input_lengths)[:, None]
        alpha = new if active.all() else ad.where(np.broadcast_to(active, (B, S)), new, alpha)

    last = np.array([2 * len(t) for t in targets])
    prev = np.maximum(last - 1, 0)
    prev_pen = np.where(last > 0, 0.0, NEG_INF)
    rows = np.arange(B)
    ends = ad.stack([alpha[rows, last], alpha[rows, prev] + prev_pen], axis=1)
    return -ad.logsumexp(ends, axis=1)


def ctc_loss(log_probs, target, blank: int = BLANK) -> Tensor:
    """CTC loss for a single (T, V) log-probability table."""
    log_probs = ad.as_tensor(log_probs)
    T, V = log_probs.shape
    return ctc_loss_batch(ad.reshape(log_probs, (1, T, V)), [list(target)], blank=blank)[0]


def ctc_brute_force(log_probs, target, blank: int = BLANK) -> float:
    """Exhaustive path enumeration; +inf when no path collapses to ``target``."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    T, V = lp.shape
    if V ** T > 10 ** 6:
        raise ContractError("ctc_brute_force: instance too large to enumerate")
    target = [int(t) for t in target]
    scores = [sum(lp[t, k] for t, k in enumerate(path))
              for path in itertools.product(range(V), repeat=T)
              if collapse(path, blank) == target]
    if not scores:
        return math.inf
    m = max(scores)
    return -(m + math.log(sum(math.exp(s - m) for s in scores)))
