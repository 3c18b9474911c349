"""Baseline and adversarial training loops.

In adversarial mode every ``clm_ratio``-th ASR update is followed by one
critic update on the same paired batch.  Each side's parameters stay fixed
while the other side is updated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .asr import AsrConfig, AsrModel, asr_losses, asr_total_loss
from .autodiff import ContractError
from .checkpoint import save_model
from .clm import ClmConfig, Critic, gradient_penalty, one_hot_batch
from .data import EOS, DataError, Dataset, batcher, derive_seed, rng_for
from .decoding import beam_decode, best_tokens, greedy_decode_batch
from .metrics import EvalReport, error_rate
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "baseline"            # baseline | at
    lambda_s2s: float = 0.5
    lambda_clm: float = 1e-4
    lambda_gp: float = 10.0
    clm_ratio: int = 5
    lr: float = 1e-3
    clm_lr: float = 1e-3
    clip_norm: float = 5.0
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    fake_mode: str = "teacher"        # teacher | free
    real_includes_paired: bool = True
    asr: AsrConfig = field(default_factory=AsrConfig)
    clm: ClmConfig = field(default_factory=ClmConfig)

    def validate(self):
        if self.mode not in ("baseline", "at"):
            raise ContractError(f"mode must be 'baseline' or 'at', got {self.mode!r}")
        if self.fake_mode not in ("teacher", "free"):
            raise ContractError(f"fake_mode must be 'teacher' or 'free', got {self.fake_mode!r}")
        if self.clm_ratio < 1:
            raise ContractError("clm_ratio must be at least 1")
        if not 0.0 <= self.lambda_s2s <= 1.0:
            raise ContractError(f"lambda_s2s must lie in [0, 1], got {self.lambda_s2s}")
        if self.lambda_clm < 0 or self.lambda_gp < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0 or self.clm_lr <= 0:
            raise ContractError("batch_size, epochs and learning rates must be positive")
        self.asr.validate()
        self.clm.validate()

    def synced(self) -> "TrainConfig":
        """Copy with the loss weights pushed down into the model configs."""
        asr = AsrConfig(**{**asdict(self.asr), "lambda_s2s": self.lambda_s2s,
                           "lambda_clm": self.lambda_clm})
        clm = ClmConfig(**{**asdict(self.clm), "lambda_clm": self.lambda_clm,
                           "lambda_gp": self.lambda_gp, "vocab_size": asr.vocab_size})
        return TrainConfig(**{**self.__dict__, "asr": asr, "clm": clm})

    def to_dict(self) -> dict:
        return asdict(self)


class MetricLog(list):
    """Append-only list of per-step records."""

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self)

    def write(self, path):
        Path(path).write_text(self.to_jsonl())


class RealTextPool:
    """Real text indexed by length for pairing with fake sequences."""

    def __init__(self, texts):
        if not texts:
            raise DataError("real-text pool is empty")
        self.texts = [list(t) for t in texts]
        self.by_length: dict = {}
        for t in self.texts:
            self.by_length.setdefault(len(t), []).append(t)
        self.lengths = np.array(sorted(self.by_length))

    def draw(self, length: int, rng: np.random.Generator) -> list:
        """Uniform draw among texts of exactly ``length``; else crop a longer one."""
        bucket = self.by_length.get(length)
        if bucket:
            return bucket[rng.integers(len(bucket))]
        longer = [t for L in self.lengths[self.lengths > length] for t in self.by_length[L]]
        if not longer:
            raise DataError(f"no real text of length >= {length}")
        return longer[rng.integers(len(longer))][:length]


def _checksum_params(model) -> str:
    return model.checksum() if model is not None else ""


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Dataset, with_clm: bool | None = None):
        config.validate()
        self.config = config.synced()
        c = self.config
        self.dataset = dataset
        if c.asr.vocab_size != len(dataset.vocab):
            raise ContractError(f"model vocab {c.asr.vocab_size} != data vocab {len(dataset.vocab)}")
        if not dataset.paired:
            raise DataError("paired set is empty")
        self.asr = AsrModel(c.asr, rng_for(c.seed, "asr-init"))
        self.asr_opt = Adam(self.asr.parameters(), lr=c.lr, clip_norm=c.clip_norm)
        with_clm = (c.mode == "at") if with_clm is None else with_clm
        self.clm = None
        if with_clm:
            self.clm = Critic(c.clm, rng_for(c.seed, "clm-init"))
            self.clm_opt = Adam(self.clm.parameters(), lr=c.clm_lr, clip_norm=c.clip_norm)
            texts = [u.text for u in dataset.unpaired]
            if c.real_includes_paired or not texts:
                texts = texts + [u.text for u in dataset.paired]
            self.pool = RealTextPool(texts)
            self.real_rng = rng_for(c.seed, "real-text")
            self.eps_rng = rng_for(c.seed, "epsilon")
        self.step = 0
        self.log = MetricLog()
        self.check_frozen = False

    # -- steps ----------------------------------------------------------
    def train_step_asr(self, batch) -> dict:
        c = self.config
        clm_sum = _checksum_params(self.clm) if self.check_frozen else None
        l_s2s, l_ctc, out = asr_losses(self.asr, batch)
        if self.clm is not None:
            self.clm.eval()
            score = ad.mean(self.clm(out.att, out.dec_lens))
        else:
            score = ad.Tensor(0.0)
        loss = asr_total_loss(l_s2s, l_ctc, score, c.lambda_s2s, c.lambda_clm)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite ASR loss at step {self.step + 1}")
        grads = ad.gradient(loss, self.asr.parameters())
        gnorm = self.asr_opt.step(grads)
        self.step += 1
        if clm_sum is not None and clm_sum != _checksum_params(self.clm):
            raise AssertionError("critic parameters changed during an ASR step")
        rec = {"step": self.step, "kind": "asr", "l_s2s": l_s2s.item(), "l_ctc": l_ctc.item(),
               "clm_fake": score.item(), "loss": loss.item(), "grad_norm": gnorm}
        self.log.append(rec)
        return rec

    def fake_batch(self, batch):
        """Detached ASR distributions for the critic, with their valid lengths."""
        with ad.no_grad():
            if self.config.fake_mode == "teacher":
                out = self.asr.forward_teacher_forced(batch.feats, batch.feat_lens, batch.texts)
                return out.att.data, out.dec_lens
            lens = np.array([len(t) + 1 for t in batch.texts])
            return self.asr.forward_free_running(batch.feats, batch.feat_lens, lens).data, lens

    def real_batch(self, fake_lens):
        seqs = [self.pool.draw(int(n) - 1, self.real_rng) + [EOS] for n in fake_lens]
        x, lens = one_hot_batch(seqs, self.config.asr.vocab_size)
        return x, lens

    def train_step_clm(self, batch) -> dict:
        if self.clm is None:
            raise ContractError("train_step_clm needs a critic")
        c = self.config
        asr_sum = _checksum_params(self.asr) if self.check_frozen else None
        fake, lens = self.fake_batch(batch)
        real, real_lens = self.real_batch(lens)
        assert np.array_equal(real_lens, lens)
        eps = self.eps_rng.uniform(size=len(lens))
        self.clm.train()
        gp = gradient_penalty(self.clm, real, fake, lens, eps)
        scores = self.clm(ad.concatenate([real, fake], axis=0), np.concatenate([lens, lens]))
        n = len(lens)
        s_real, s_fake = ad.mean(scores[:n]), ad.mean(scores[n:])
        l_d = s_fake - s_real
        loss = c.lambda_clm * l_d + c.lambda_gp * gp
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite critic loss at step {self.step}")
        grads = ad.gradient(loss, self.clm.parameters())
        self.clm_opt.step(grads)
        if asr_sum is not None and asr_sum != _checksum_params(self.asr):
            raise AssertionError("ASR parameters changed during a critic step")
        rec = {"step": self.step, "kind": "clm", "l_d": l_d.item(), "gp": gp.item(),
               "l_clm": loss.item(), "score_real": s_real.item(), "score_fake": s_fake.item(),
               "lambda_clm": c.lambda_clm, "lambda_gp": c.lambda_gp}
        self.log.append(rec)
        return rec

    # -- loops ----------------------------------------------------------
    def run_epoch(self, epoch: int):
        c = self.config
        for batch in batcher(self.dataset.paired, c.batch_size, derive_seed(c.seed, "data"),
                             epoch):
            self.train_step_asr(batch)
            if c.mode == "at" and self.clm is not None and self.step % c.clm_ratio == 0:
                self.train_step_clm(batch)

    def validate_dev(self, epoch: int) -> dict:
        utts = self.dataset.dev
        if not utts:
            return {}
        hyps = decode_split(self.asr, utts, beam=1)
        vocab = self.dataset.vocab
        refs = [vocab.decode(u.text) for u in utts]
        hyps = [vocab.decode(h) for h in hyps]
        rec = {"step": self.step, "kind": "dev", "epoch": epoch,
               "cer": error_rate(refs, hyps, "character"), "wer": error_rate(refs, hyps, "word")}
        self.log.append(rec)
        return rec

    def fit(self, run_dir=None, validate: bool = True, ckpt_dir=None):
        """Train for the configured epochs, checkpointing every epoch.

        Checkpoints go to ``ckpt_dir`` if given, else ``run_dir/checkpoints``.
        """
        c = self.config
        if ckpt_dir is None and run_dir is not None:
            ckpt_dir = Path(run_dir) / "checkpoints"
        if ckpt_dir is not None:
            ckpt_dir = Path(ckpt_dir)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        for epoch in range(c.epochs):
            self.run_epoch(epoch)
            if validate:
                rec = self.validate_dev(epoch)
                log.info("epoch %d step %d dev CER %.2f", epoch, self.step, rec.get("cer", -1))
            if ckpt_dir is not None:
                save_model(ckpt_dir / f"asr_epoch{epoch:03d}.ckpt", self.asr, "asr")
                if self.clm is not None:
                    save_model(ckpt_dir / f"clm_epoch{epoch:03d}.ckpt", self.clm, "clm")
        return self


def at_train(dataset: Dataset, config: TrainConfig, run_dir=None, validate: bool = True):
    """Train from scratch in the configured mode; returns (asr, clm, MetricLog)."""
    trainer = Trainer(config, dataset).fit(run_dir, validate)
    return trainer.asr, trainer.clm, trainer.log


def decode_split(asr, utts, beam: int = 1, lm=None, lm_weight: float = 0.0,
                 ctc_weight: float = 0.0, length_penalty: float = 0.0,
                 batch_size: int = 64) -> list:
    """Token hypotheses for each utterance; beam 1 without fusion decodes in batches."""
    if beam == 1 and not (lm is not None and lm_weight) and not ctc_weight:
        hyps = []
        for start in range(0, len(utts), batch_size):
            chunk = utts[start:start + batch_size]
            lens = np.array([u.feats.shape[0] for u in chunk])
            feats = np.zeros((len(chunk), lens.max(), chunk[0].feats.shape[1]))
            for i, u in enumerate(chunk):
                feats[i, :lens[i]] = u.feats
            hyps.extend(greedy_decode_batch(asr, feats, lens))
        return hyps
    return [best_tokens(beam_decode(asr, u.feats, beam, lm, lm_weight, ctc_weight,
                                    length_penalty=length_penalty))
            for u in utts]


def evaluate(asr, utts, vocab, beam: int = 1, lm=None, lm_weight: float = 0.0,
             ctc_weight: float = 0.0, meta=None, length_penalty: float = 0.0) -> EvalReport:
    hyps = decode_split(asr, utts, beam, lm, lm_weight, ctc_weight, length_penalty)
    meta = {"beam": beam, "lm_weight": lm_weight if lm is not None else 0.0,
            "ctc_weight": ctc_weight, "length_penalty": length_penalty, **(meta or {})}
    return EvalReport.build([vocab.decode(u.text) for u in utts],
                            [vocab.decode(h) for h in hyps], meta)
