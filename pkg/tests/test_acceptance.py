"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 share one set of toy-task runs (three seeds), trained once per
session.  The whole file takes roughly half an hour on one CPU core.
"""

import time

import numpy as np
import pytest

from advasr import autodiff as ad
from advasr.asr import AsrConfig, AsrModel, asr_losses, asr_total_loss, seq2seq_loss
from advasr.autodiff import Tensor, finite_difference_check, gradient
from advasr.clm import (ClmConfig, Critic, clm_total_loss, critic_distance_loss,
                        gradient_penalty)
from advasr.ctc import ctc_brute_force, ctc_loss, min_frames
from advasr.data import SynthConfig, Utterance, batcher, make_split, pad_batch, toy_grammar
from advasr.decoding import beam_decode, best_tokens, greedy_decode, sequence_score
from advasr.experiments import ToyProtocol, mean_cer, run_seed
from advasr.layers import BatchNorm, BiLSTM, Conv1d, Linear, LocationAttention, LSTMCell
from advasr.metrics import relative_improvement
from advasr.rnnlm import LmConfig, RnnLm
from advasr.trainer import TrainConfig, Trainer, at_train, evaluate
from helpers import param_fd_error
from test_autodiff import CATALOG, SECOND_ORDER, _weighted

SEEDS = (0, 1, 2)
RESULTS = []


def verdict(number: int, name: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name} -- {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1. gradient correctness -----------------------------------------------

FIRST_ORDER_TOL, SECOND_ORDER_TOL = 1e-5, 1e-4


def _first_order_checks(rng):
    """(name, error) for every operator, layer and loss."""
    out = []
    for name in sorted(CATALOG):
        op, sample = CATALOG[name]
        fn = _weighted(op)
        out.append((f"op {name}", max(finite_difference_check(fn, sample(rng), 1e-4)
                                      for _ in range(5))))

    def weighted(module_fn, shape_rng=rng):
        cache = {}

        def fn(*args):
            y = module_fn(*args)
            if y.shape not in cache:
                cache[y.shape] = shape_rng.normal(size=y.shape)
            return ad.sum_(y * cache[y.shape])
        return fn

    lin = Linear(4, 3, rng)
    x = rng.normal(size=(2, 4))
    f = weighted(lin)
    out.append(("layer linear", max(finite_difference_check(lambda ts: f(ts[0]), [x]),
                                    param_fd_error(lin, lambda: f(x)))))
    conv = Conv1d(3, 2, 3, rng, stride=2)
    x = rng.normal(size=(2, 7, 3))
    f = weighted(conv)
    out.append(("layer conv1d", max(finite_difference_check(lambda ts: f(ts[0]), [x]),
                                    param_fd_error(conv, lambda: f(x)))))
    for training in (True, False):
        bn = BatchNorm(3)
        bn.gamma.data, bn.beta.data = rng.normal(size=3), rng.normal(size=3)
        bn.running_var[:] = rng.uniform(0.5, 1.5, size=3)
        bn.train() if training else bn.eval()
        x = rng.normal(size=(4, 2, 3))
        f = weighted(lambda v: _frozen_stats(bn, v))
        out.append((f"layer batchnorm ({'train' if training else 'eval'})",
                    max(finite_difference_check(lambda ts: f(ts[0]), [x]),
                        param_fd_error(bn, lambda: f(x)))))
    cell = LSTMCell(3, 4, rng)
    x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    wh, wc = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

    def lstm(ts):
        h, c = cell(*ts)
        return ad.sum_(h * wh) + ad.sum_(c * wc)
    out.append(("layer lstm", max(finite_difference_check(lstm, [x, h0, c0]),
                                  param_fd_error(cell, lambda: lstm([Tensor(x), Tensor(h0),
                                                                     Tensor(c0)])))))
    bil = BiLSTM(2, 3, rng)
    x = rng.normal(size=(2, 4, 2))
    f = weighted(lambda v: bil(v, [4, 3]))
    out.append(("layer bilstm", max(finite_difference_check(lambda ts: f(ts[0]), [x]),
                                    param_fd_error(bil, lambda: f(x)))))
    att = LocationAttention(4, 3, 5, rng, filters=2, width=3)
    H, q, a0 = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 3)), rng.dirichlet(np.ones(5), 2)
    wc, wa = rng.normal(size=(2, 4)), rng.normal(size=(2, 5))

    def attend(ts):
        c, a = att(*ts)
        return ad.sum_(c * wc) + ad.sum_(a * wa)
    out.append(("layer attention", max(finite_difference_check(attend, [H, q, a0]),
                                       param_fd_error(att, lambda: attend([Tensor(H), Tensor(q),
                                                                           Tensor(a0)])))))

    lp = rng.normal(size=(5, 4))
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    out.append(("loss ctc", finite_difference_check(lambda ts: ctc_loss(ts[0], [1, 2, 2]), [lp])))
    logits = rng.normal(size=(2, 4, 5))
    targets, lens = np.array([[1, 2, 3, 4], [2, 2, 0, 0]]), np.array([4, 2])
    out.append(("loss seq2seq", finite_difference_check(
        lambda ts: ad.sum_(seq2seq_loss(ad.log_softmax(ts[0]), targets, lens)), [logits])))

    tiny = AsrConfig(feat_dim=3, downsample=2, enc_layers=1, enc_units=5, att_dim=5,
                     att_filters=2, att_width=3, dec_units=5, vocab_size=4)
    model = AsrModel(tiny, rng)
    batch = pad_batch([Utterance(list(t), rng.normal(size=(4 * len(t) + 2, 3)))
                       for t in ([3, 3, 3], [3, 2, 3, 3])])
    critic = Critic(ClmConfig(vocab_size=4, embed_dim=3), rng)
    critic(rng.dirichlet(np.ones(4), size=(3, 5)))
    critic.eval()

    def l_asr():
        l_s2s, l_ctc, o = asr_losses(model, batch)
        return asr_total_loss(l_s2s, l_ctc, ad.mean(critic(o.att, o.dec_lens)), 0.5, 0.7)
    out.append(("loss L_ASR incl. critic score", param_fd_error(model, l_asr, per_param=10)))

    critic = Critic(ClmConfig(vocab_size=3, embed_dim=3, batchnorm=False), rng)
    real, fake = rng.dirichlet(np.ones(3), (3, 5)), rng.dirichlet(np.ones(3), (3, 5))
    lens = np.array([5, 4, 5])
    out.append(("loss L_D", max(
        param_fd_error(critic, lambda: critic_distance_loss(critic, real, lens, fake, lens)),
        finite_difference_check(lambda ts: critic_distance_loss(critic, real, lens, ts[0], lens),
                                [fake]))))

    lm = RnnLm(LmConfig(vocab_size=5, embed_dim=3, hidden=4), rng)
    seqs = [[3, 4, 3], [4]]
    out.append(("loss lm nll", param_fd_error(lm, lambda: ad.sum_(lm.sequence_nll(seqs)))))
    return out


def _frozen_stats(bn, x):
    """Batch norm whose running statistics are restored after the call."""
    saved = bn.running_mean.copy(), bn.running_var.copy()
    y = bn(x)
    bn.running_mean[:], bn.running_var[:] = saved
    return y


def _second_order_checks(rng):
    out = []
    for name in SECOND_ORDER:
        op, sample = CATALOG[name]
        inner = _weighted(op)

        def grad_norm_sq(ts):
            return sum(ad.sum_(g * g) for g in gradient(inner(ts), ts, create_graph=True))
        out.append((f"op {name} (grad of grad)",
                    max(finite_difference_check(grad_norm_sq, sample(rng), 1e-4)
                        for _ in range(3))))
    for bn_on in (False, True):
        critic = Critic(ClmConfig(vocab_size=3, embed_dim=3, batchnorm=bn_on), rng)
        if bn_on:
            critic(rng.dirichlet(np.ones(3), (3, 5)))
        real, fake = rng.dirichlet(np.ones(3), (3, 5)), rng.dirichlet(np.ones(3), (3, 5))
        lens, eps = np.array([5, 4, 5]), rng.uniform(size=3)
        bns = [m for m in critic.modules() if isinstance(m, BatchNorm)]

        def total():
            saved = [(m.running_mean.copy(), m.running_var.copy()) for m in bns]
            value = clm_total_loss(critic, real, lens, fake, lens, eps, 1e-4, 10.0)[0]
            for m, (mu, var) in zip(bns, saved):
                m.running_mean[:], m.running_var[:] = mu, var
            return value
        tag = "with" if bn_on else "without"
        out.append((f"L_CLM = l*L_D + gp, critic params ({tag} batch norm)",
                    param_fd_error(critic, total)))
        critic.eval()
        out.append((f"gp wrt generated input ({tag} batch norm)", finite_difference_check(
            lambda ts: gradient_penalty(critic, real, ts[0], lens, eps), [fake])))
    return out


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    first = _first_order_checks(rng)
    second = _second_order_checks(rng)
    seconds = time.perf_counter() - start
    bad = [f"{n}={e:.2e}" for n, e in first if not e < FIRST_ORDER_TOL]
    bad += [f"{n}={e:.2e}" for n, e in second if not e < SECOND_ORDER_TOL]
    worst1 = max(e for _, e in first)
    worst2 = max(e for _, e in second)
    ok = not bad and seconds < 120
    verdict(1, "gradient correctness", ok,
            f"{len(first)} first-order checks, max rel err {worst1:.1e} (< 1e-5); "
            f"{len(second)} second-order checks, max {worst2:.1e} (< 1e-4); {seconds:.0f}s (< 120s)"
            + (f"; failing: {', '.join(bad)}" if bad else ""))


# -- 2. CTC oracle -------------------------------------------------------------

def test_criterion_02_ctc_matches_path_enumeration():
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    worst, n = 0.0, 0
    while n < 250:
        T, V = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        target = [int(t) for t in rng.integers(1, V, size=int(rng.integers(0, 4)))]
        if min_frames(target) > T:
            continue
        x = rng.normal(size=(T, V)) * 2
        lp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
        worst = max(worst, abs(ctc_loss(lp, target).item() - ctc_brute_force(lp, target)))
        n += 1
    seconds = time.perf_counter() - start
    verdict(2, "CTC equals exhaustive path enumeration", worst < 1e-9 and seconds < 60,
            f"{n} instances (T<=5, V<=4), max |diff| {worst:.1e} (< 1e-9); {seconds:.1f}s (< 60s)")


# -- 3. WGAN-GP sanity ------------------------------------------------------------

def _critic_gap(seed: int) -> tuple:
    """Real-minus-fake mean score after 200 critic steps against an untrained generator."""
    p = ToyProtocol()
    ds = make_split(toy_grammar(), SynthConfig(), 200, 0, 0, 0, seed=seed)
    cfg = TrainConfig(mode="at", seed=seed, lambda_clm=p.lambda_clm,
                      asr=AsrConfig(vocab_size=len(ds.vocab)),
                      clm=ClmConfig(vocab_size=len(ds.vocab), embed_dim=p.clm_embed))
    trainer = Trainer(cfg, ds)
    batches = list(batcher(ds.paired, cfg.batch_size, seed, 0))
    for i in range(200):
        trainer.train_step_clm(batches[i % len(batches)])
    trainer.clm.eval()
    real_scores, fake_scores = [], []
    with ad.no_grad():
        for batch in batches:
            fake, lens = trainer.fake_batch(batch)
            real, _ = trainer.real_batch(lens)
            fake_scores.extend(trainer.clm(fake, lens).data.tolist())
            real_scores.extend(trainer.clm(real, lens).data.tolist())
    return float(np.mean(real_scores) - np.mean(fake_scores))


def test_criterion_03_wgan_gp_sanity():
    start = time.perf_counter()
    cfg = ClmConfig()
    critic = Critic(cfg, np.random.default_rng(0))
    critic.out.weight.data[:] = 0.0
    critic.out.bias.data[:] = 0.7
    rng = np.random.default_rng(1)
    real = np.eye(16)[rng.integers(3, 16, size=(4, 6))]
    fake = rng.dirichlet(np.ones(16), size=(4, 6))
    lens = np.full(4, 6)
    total = clm_total_loss(critic, real, lens, fake, lens, rng.uniform(size=4),
                           cfg.lambda_clm, cfg.lambda_gp)[0].item()
    gaps = [_critic_gap(seed) for seed in SEEDS]
    seconds = time.perf_counter() - start
    ok = total == 10.0 and all(g > 0 for g in gaps) and seconds < 180
    verdict(3, "WGAN-GP sanity", ok,
            f"constant critic L_CLM = {total!r} (== 10); real-fake gap after 200 steps "
            f"{', '.join(f'{g:.3f}' for g in gaps)} (all > 0); {seconds:.0f}s (< 180s)")


# -- 4. baseline reduction ---------------------------------------------------------

def test_criterion_04_zero_weight_reduces_to_baseline():
    ds = make_split(toy_grammar(), SynthConfig(), 64, 64, 0, 0, seed=0)
    cfg = TrainConfig(mode="at", lambda_clm=0.0, seed=0, batch_size=16, clm_ratio=2,
                      clm=ClmConfig(embed_dim=32))
    with_clm = Trainer(cfg, ds)
    without = Trainer(cfg, ds, with_clm=False)
    batches = list(batcher(ds.paired, 16, 0, 0))
    identical = True
    for step in range(10):
        batch = batches[step % len(batches)]
        for trainer in (with_clm, without):
            trainer.train_step_asr(batch)
            if trainer.clm is not None and trainer.step % cfg.clm_ratio == 0:
                trainer.train_step_clm(batch)
        a, b = with_clm.asr.state_dict(), without.asr.state_dict()
        identical &= all(a[k].tobytes() == b[k].tobytes() for k in a)
    n_clm = sum(r["kind"] == "clm" for r in with_clm.log)
    verdict(4, "lambda_CLM = 0 matches critic-free build", identical and n_clm == 5,
            f"ASR parameters bit-identical after each of 10 steps: {identical}; "
            f"critic updates taken alongside: {n_clm}")


# -- 5-7. toy-task reproductions -----------------------------------------------------

@pytest.fixture(scope="session")
def toy_runs():
    protocol = ToyProtocol()
    return protocol, [run_seed(protocol, seed) for seed in SEEDS]


def _fmt(x):
    return f"{x:.2f}"


def test_criterion_05_at_beats_baseline_without_text(toy_runs):
    p, results = toy_runs
    base, at = mean_cer(results, "baseline", p.beam), mean_cer(results, "at", p.beam)
    per_seed = "; ".join(f"seed {r.seed}: {_fmt(r.cer('baseline', p.beam))} vs "
                         f"{_fmt(r.cer('at', p.beam))}" for r in results)
    seconds = sum(r.seconds["baseline"] + r.seconds["at"] for r in results)
    verdict(5, "+AT < baseline, no unpaired text", at < base and seconds < 20 * 60,
            f"mean test CER at beam {p.beam}: baseline {_fmt(base)}, +AT {_fmt(at)} "
            f"({per_seed}); {seconds / 60:.1f} min (< 20)")


def test_criterion_06_text_gains_accumulate(toy_runs):
    p, results = toy_runs
    base = mean_cer(results, "baseline", p.beam)
    at = mean_cer(results, "at_text", p.beam)
    both = mean_cer(results, "both", p.beam)
    lm_only = mean_cer(results, "baseline+lm", p.beam)
    seconds = sum(r.seconds["baseline"] + r.seconds["at_text"] + r.seconds["lm"]
                  + r.seconds["both"] for r in results)
    ok = base > at >= both and seconds < 40 * 60
    verdict(6, "baseline > +AT >= +Both with 5000 unpaired texts", ok,
            f"mean test CER at beam {p.beam}: baseline {_fmt(base)}, +AT {_fmt(at)}, "
            f"+Both {_fmt(both)} (+LM alone {_fmt(lm_only)}); {seconds / 60:.1f} min (< 40)")


def test_criterion_07_gain_at_every_beam(toy_runs):
    p, results = toy_runs
    gains = {b: mean_cer(results, "baseline", b) - mean_cer(results, "at_text", b)
             for b in p.sweep_beams}
    verdict(7, "+AT gain positive at beams 1, 2, 4, 8", all(g > 0 for g in gains.values()),
            "baseline minus +AT mean test CER: "
            + ", ".join(f"beam {b}: {g:+.2f}" for b, g in gains.items()))


# -- 8. metrics fidelity --------------------------------------------------------------

def test_criterion_08_relative_improvement_matches_table():
    cases = [((21.7, 20.1), 7.4), ((21.7, 20.3), 6.5), ((21.7, 18.8), 13.4)]
    got = [relative_improvement(*args) for args, _ in cases]
    ok = all(g == want for g, (_, want) in zip(got, cases))
    verdict(8, "relative improvement reproduces published deltas", ok,
            ", ".join(f"{a} -> {g}% (want {w}%)" for (a, w), g in zip(cases, got)))


# -- 9. decoding oracle ----------------------------------------------------------------

def _exhaustive(model, feats, max_len, lm=None, lm_weight=0.0):
    import itertools
    V = model.config.vocab_size
    emit = [t for t in range(V) if t != 2]
    best = (-np.inf, None)
    for n in range(max_len + 1):
        for body in itertools.product(emit, repeat=n):
            seq = list(body) + ([2] if n < max_len else [])
            score = sequence_score(model, feats, seq, lm, lm_weight)
            if score > best[0]:
                best = (score, seq)
    return best


def test_criterion_09_decoding_oracle():
    tiny = AsrConfig(feat_dim=3, downsample=2, enc_layers=1, enc_units=4, att_dim=4,
                     att_filters=2, att_width=3, dec_units=4, vocab_size=4)
    rng = np.random.default_rng(9)
    exhaustive_ok, n_exh = True, 0
    for seed in range(8):
        model = AsrModel(tiny, np.random.default_rng(seed))
        for p in model.parameters():
            p.data = p.data * float(rng.uniform(2, 15))
        lm = None
        if seed % 2:
            lm = RnnLm(LmConfig(vocab_size=4, embed_dim=3, hidden=4), rng)
        feats = rng.normal(size=(6, 3))
        score, seq = _exhaustive(model, feats, 3, lm, 0.5 if lm else 0.0)
        top = beam_decode(model, feats, beam=4 ** 3, lm=lm, lm_weight=0.5 if lm else 0.0,
                          max_len=3)[0]
        exhaustive_ok &= top.tokens == seq and abs(top.score - score) < 1e-10
        n_exh += 1
    greedy_ok, n_greedy = True, 0
    for seed in range(60):
        model = AsrModel(tiny, np.random.default_rng(100 + seed))
        for p in model.parameters():
            p.data = p.data * float(rng.uniform(1, 20))
        feats = rng.normal(size=(int(rng.integers(2, 14)), 3))
        greedy_ok &= best_tokens(beam_decode(model, feats, beam=1)) == greedy_decode(model, feats)
        n_greedy += 1
    verdict(9, "decoding oracle", exhaustive_ok and greedy_ok,
            f"beam 64 = exhaustive search on {n_exh} instances (V=4, length<=3, half with LM): "
            f"{exhaustive_ok}; beam 1 = greedy on {n_greedy} models: {greedy_ok}")


# -- 10. determinism ------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    ds = make_split(toy_grammar(), SynthConfig(), 48, 48, 12, 12, seed=5)
    small = AsrConfig(enc_layers=1, enc_units=16, att_dim=16, dec_units=16)
    outputs = []
    for run in range(2):
        texts = []
        for mode in ("baseline", "at"):
            cfg = TrainConfig(mode=mode, epochs=2, seed=5, batch_size=16, asr=small,
                              clm=ClmConfig(embed_dim=16))
            asr, _, log = at_train(ds, cfg, tmp_path / f"{mode}{run}")
            lm = RnnLm(LmConfig(vocab_size=16), np.random.default_rng(5))
            rep = evaluate(asr, ds.test, ds.vocab, beam=4, lm=lm, lm_weight=0.3)
            texts.append((log.to_jsonl(), rep.to_text()))
        outputs.append(texts)
    same = outputs[0] == outputs[1]
    verdict(10, "same root seed reproduces logs and reports", same,
            f"MetricLog and EvalReport bit-identical across repeated baseline and AT runs: {same}")
