"""INI run configuration with environment overrides.

Sections and keys mirror the dataclasses they fill:

    [data]    toy grammar, synthesis and split sizes (or ``bundle`` = path)
    [asr]     AsrConfig fields except loss weights, vocab_size and feat_dim
    [clm]     ClmConfig fields except loss weights and vocab_size
    [train]   TrainConfig scalar fields (loss weights live here)
    [lm]      LmConfig fields plus ``epochs``
    [decode]  beam, lm_weight, ctc_weight, length_penalty

Any key can be overridden from the environment as ``ADVASR_<SECTION>_<KEY>``
(for example ``ADVASR_TRAIN_EPOCHS=5``).  The command-line flags have their
own variables: ``ADVASR_CONFIG``, ``ADVASR_RUN_DIR``, ``ADVASR_SEED``,
``ADVASR_MODE``, ``ADVASR_BEAM`` and ``ADVASR_LM_WEIGHT``.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace

from .asr import AsrConfig
from .autodiff import ContractError
from .clm import ClmConfig
from .data import DataError, GrammarSpec, SynthConfig, toy_grammar
from .rnnlm import LmConfig
from .trainer import TrainConfig

ENV_PREFIX = "ADVASR_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    grammar_seed: int = 7
    n_letters: int = 12
    min_length: int = 4
    max_length: int = 14
    dim: int = 8
    frames_per_symbol: int = 3
    noise: float = 0.3
    prototype_seed: int = 11
    n_paired: int = 500
    n_unpaired: int = 5000
    n_dev: int = 200
    n_test: int = 200
    bundle: str = ""

    def grammar(self) -> GrammarSpec:
        return toy_grammar(self.grammar_seed, self.n_letters, (self.min_length, self.max_length))

    def synth(self) -> SynthConfig:
        return SynthConfig(self.dim, self.frames_per_symbol, self.noise, self.prototype_seed)


@dataclass
class LmSection:
    embed_dim: int = 32
    hidden: int = 64
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 5

    def lm_config(self, vocab_size: int) -> LmConfig:
        return LmConfig(vocab_size, self.embed_dim, self.hidden, self.lr, self.batch_size)


@dataclass
class DecodeConfig:
    beam: int = 20
    lm_weight: float = 0.3
    ctc_weight: float = 0.0
    length_penalty: float = 0.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    asr: AsrConfig = field(default_factory=AsrConfig)
    clm: ClmConfig = field(default_factory=ClmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lm: LmSection = field(default_factory=LmSection)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def train_config(self, vocab_size: int | None = None, feat_dim: int | None = None) -> TrainConfig:
        """TrainConfig with the model sections attached and weights synced."""
        vocab_size = vocab_size or self.asr.vocab_size
        asr = replace(self.asr, vocab_size=vocab_size, feat_dim=feat_dim or self.data.dim)
        clm = replace(self.clm, vocab_size=vocab_size)
        return replace(self.train, asr=asr, clm=clm).synced()

    def validate(self):
        d = self.data
        try:
            if min(d.n_paired, d.n_unpaired, d.n_dev, d.n_test) < 0:
                raise ConfigError("data: split sizes must be nonnegative")
            if not d.bundle:
                d.grammar().validate()
            d.synth().validate()
            self.train_config().validate()
        except (ContractError, DataError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.decode.beam < 1:
            raise ConfigError("decode: beam must be at least 1")
        if self.lm.epochs < 0 or self.lm.lr <= 0 or self.lm.batch_size < 1:
            raise ConfigError("lm: epochs, lr and batch_size must be positive")
        return self


# sections, in file order; loss weights are owned by [train], and vocabulary
# size and feature dimension always come from the data
SECTIONS = ("data", "asr", "clm", "train", "lm", "decode")
_SKIP = {"asr": {"lambda_s2s", "lambda_clm", "vocab_size", "feat_dim"},
         "clm": {"lambda_clm", "lambda_gp", "vocab_size"},
         "train": {"asr", "clm"}}


def _section_fields(cfg: RunConfig, section: str):
    obj = getattr(cfg, section)
    return [f for f in fields(obj) if f.name not in _SKIP.get(section, set())]


def _convert(section: str, key: str, raw: str, current):
    text = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(current).__name__}") from None
    return text


def _apply(cfg: RunConfig, section: str, key: str, raw: str):
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    names = {f.name for f in _section_fields(cfg, section)}
    if key not in names:
        raise ConfigError(f"[{section}] unknown key {key!r}")
    obj = getattr(cfg, section)
    setattr(obj, key, _convert(section, key, raw, getattr(obj, key)))


def load_config(path=None, env=None) -> RunConfig:
    """Defaults, then the INI file (if any), then ``ADVASR_<SECTION>_<KEY>`` variables."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    env = os.environ if env is None else env
    for section in SECTIONS:
        for f in _section_fields(cfg, section):
            var = f"{ENV_PREFIX}{section.upper()}_{f.name.upper()}"
            if var in env:
                _apply(cfg, section, f.name, env[var])
    return cfg


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: str(getattr(obj, f.name)) for f in _section_fields(cfg, section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
