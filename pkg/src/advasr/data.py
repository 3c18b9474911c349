"""Synthetic paired speech/text data, unpaired text, vocabulary and batching."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BLANK, SOS, EOS = 0, 1, 2
RESERVED = ("<blank>", "<s>", "</s>")
FEATURE_MAGIC = b"ADVFEAT\0"
FEATURE_VERSION = 1


class DataError(ValueError):
    pass


def derive_seed(root: int, label: str) -> int:
    """Stable per-component seed from a root seed and a label."""
    digest = hashlib.sha256(f"{int(root)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))


class Vocab:
    """Symbol table with reserved indices 0=blank, 1=start, 2=end."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols) or any(s in RESERVED for s in symbols):
            raise DataError("vocab symbols must be unique and not reserved")
        self.symbols = list(RESERVED) + symbols
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.symbols == other.symbols

    @property
    def user_symbols(self) -> list:
        return self.symbols[len(RESERVED):]

    def encode(self, text: str) -> list:
        try:
            return [self.index[ch] for ch in text]
        except KeyError as err:
            raise DataError(f"unknown symbol {err.args[0]!r}") from None

    def decode(self, tokens) -> str:
        return "".join(self.symbols[t] for t in tokens if t >= len(RESERVED))


@dataclass
class GrammarSpec:
    """First-order chain.

    ``transitions`` has one row for the start state followed by one row per
    symbol; columns are the symbols followed by an end column.  Samples whose
    length falls outside ``length_bounds`` are rejected and redrawn.
    """

    symbols: list
    transitions: np.ndarray
    length_bounds: tuple = (4, 14)

    def validate(self):
        n = len(self.symbols)
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.shape != (n + 1, n + 1):
            raise DataError(f"transition table must be {(n + 1, n + 1)}, got {t.shape}")
        if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-12):
            raise DataError("transition rows must be nonnegative and sum to 1")
        lo, hi = self.length_bounds
        if not 1 <= lo <= hi:
            raise DataError("length bounds must satisfy 1 <= min <= max")

    def to_json(self) -> str:
        return json.dumps({"symbols": list(self.symbols),
                           "transitions": np.asarray(self.transitions).tolist(),
                           "length_bounds": list(self.length_bounds)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GrammarSpec":
        raw = json.loads(text)
        g = cls(raw["symbols"], np.array(raw["transitions"]), tuple(raw["length_bounds"]))
        g.validate()
        return g


def toy_grammar(seed: int = 7, n_letters: int = 12, length_bounds=(4, 14)) -> GrammarSpec:
    """A word-like chain over ``n_letters`` letters plus space.

    Each letter strongly prefers two or three successors, words end with a
    space or the end of the utterance, and no symbol follows itself.
    """
    rng = np.random.default_rng(seed)
    letters = [chr(ord("a") + i) for i in range(n_letters)]
    symbols = letters + [" "]
    n = len(symbols)
    space, end = n - 1, n
    table = np.zeros((n + 1, n + 1))
    initial = rng.choice(n_letters, size=max(3, n_letters // 3), replace=False)
    table[0, initial] = rng.dirichlet(np.full(len(initial), 2.0))
    for i in range(n_letters):
        succ = rng.choice([j for j in range(n_letters) if j != i], size=rng.integers(2, 4),
                          replace=False)
        row = np.zeros(n + 1)
        row[succ] = rng.dirichlet(np.full(len(succ), 1.5)) * 0.72
        row[space] = 0.2
        row[end] = 0.08
        table[i + 1] = row
    table[space + 1, initial] = rng.dirichlet(np.full(len(initial), 2.0))
    g = GrammarSpec(symbols, table, tuple(length_bounds))
    g.validate()
    return g


def _sample_one(cum: np.ndarray, rng: np.random.Generator, lo: int, hi: int,
                max_attempts: int = 100_000) -> list:
    n = cum.shape[1] - 1
    for _ in range(max_attempts):
        seq, state = [], 0
        while True:
            nxt = int(np.searchsorted(cum[state], rng.random(), side="right"))
            nxt = min(nxt, n)
            if nxt == n:
                break
            seq.append(nxt)
            state = nxt + 1
            if len(seq) > hi:
                break
        if lo <= len(seq) <= hi:
            return seq
    raise DataError(f"grammar did not produce a length in [{lo}, {hi}] "
                    f"after {max_attempts} attempts")


def sample_corpus(grammar: GrammarSpec, n: int, seed: int) -> list:
    """``n`` strings drawn from the chain, deterministic per seed."""
    grammar.validate()
    if n < 1:
        raise DataError("sample_corpus: n must be at least 1")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(grammar.transitions, axis=1)
    lo, hi = grammar.length_bounds
    return ["".join(grammar.symbols[i] for i in _sample_one(cum, rng, lo, hi))
            for _ in range(n)]


@dataclass
class SynthConfig:
    dim: int = 8
    frames_per_symbol: int = 3
    noise: float = 0.3
    prototype_seed: int = 11

    def validate(self):
        if self.dim < 1 or self.frames_per_symbol < 1 or self.noise < 0:
            raise DataError("synth config requires dim >= 1, frames >= 1, noise >= 0")


def prototypes(vocab_size: int, config: SynthConfig) -> np.ndarray:
    return np.random.default_rng(config.prototype_seed).normal(size=(vocab_size, config.dim))


def synth_features(tokens, config: SynthConfig, vocab_size: int,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Each token's prototype repeated ``frames_per_symbol`` times plus Gaussian noise."""
    config.validate()
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise DataError("synth_features: empty text")
    if np.any(tokens < len(RESERVED)) or np.any(tokens >= vocab_size):
        raise DataError("synth_features: unknown symbol")
    feats = np.repeat(prototypes(vocab_size, config)[tokens], config.frames_per_symbol, axis=0)
    if config.noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        feats = feats + rng.normal(scale=config.noise, size=feats.shape)
    return feats


def nearest_prototype_decode(feats: np.ndarray, config: SynthConfig, vocab_size: int) -> list:
    """Oracle recogniser: average each frame block and pick the closest prototype."""
    protos = prototypes(vocab_size, config)[len(RESERVED):]
    r = config.frames_per_symbol
    blocks = feats.reshape(-1, r, feats.shape[1]).mean(axis=1)
    d = ((blocks[:, None, :] - protos[None]) ** 2).sum(-1)
    return list(np.argmin(d, axis=1) + len(RESERVED))


@dataclass
class Utterance:
    text: list
    feats: np.ndarray | None = None


@dataclass
class Dataset:
    vocab: Vocab
    paired: list
    unpaired: list
    dev: list
    test: list
    synth: SynthConfig = field(default_factory=SynthConfig)
    grammar: GrammarSpec | None = None

    def split(self, name: str) -> list:
        return {"paired": self.paired, "unpaired": self.unpaired,
                "dev": self.dev, "test": self.test}[name]


def make_split(grammar: GrammarSpec, synth: SynthConfig, n_paired: int, n_unpaired: int,
               n_dev: int, n_test: int, seed: int) -> Dataset:
    """Disjoint test/dev/paired/unpaired sets drawn in that order from one text stream.

    Drawing unpaired text last keeps the scored and paired sets independent of
    ``n_unpaired``.
    """
    grammar.validate()
    synth.validate()
    if min(n_paired, n_unpaired, n_dev, n_test) < 0:
        raise DataError("split sizes must be nonnegative")
    vocab = Vocab(grammar.symbols)
    rng = rng_for(seed, "text")
    cum = np.cumsum(grammar.transitions, axis=1)
    lo, hi = grammar.length_bounds
    seen: set = set()
    splits = {}
    for name, n in (("test", n_test), ("dev", n_dev), ("paired", n_paired),
                    ("unpaired", n_unpaired)):
        items, attempts = [], 0
        while len(items) < n:
            attempts += 1
            if attempts > 1000 * (n + 1):
                raise DataError(f"grammar cannot supply {n} distinct utterances for {name}")
            seq = tuple(i + len(RESERVED) for i in _sample_one(cum, rng, lo, hi))
            if seq in seen:
                continue
            seen.add(seq)
            items.append(list(seq))
        splits[name] = items

    out = {}
    for name in ("paired", "dev", "test"):
        noise_rng = rng_for(seed, f"noise:{name}")
        out[name] = [Utterance(t, synth_features(t, synth, len(vocab), noise_rng))
                     for t in splits[name]]
    out["unpaired"] = [Utterance(t) for t in splits["unpaired"]]
    return Dataset(vocab, out["paired"], out["unpaired"], out["dev"], out["test"], synth,
                   grammar)


@dataclass
class Batch:
    feats: np.ndarray
    feat_lens: np.ndarray
    texts: list
    indices: np.ndarray

    def __len__(self):
        return len(self.texts)


def pad_batch(utts, indices=None) -> Batch:
    lens = np.array([u.feats.shape[0] for u in utts])
    d = utts[0].feats.shape[1]
    feats = np.zeros((len(utts), lens.max(), d))
    for i, u in enumerate(utts):
        feats[i, :lens[i]] = u.feats
    idx = np.arange(len(utts)) if indices is None else np.asarray(indices)
    return Batch(feats, lens, [list(u.text) for u in utts], idx)


def batcher(utts, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True):
    """Padded batches covering every utterance once, in an order fixed by (seed, epoch)."""
    if batch_size < 1:
        raise DataError("batch size must be at least 1")
    order = (rng_for(seed, f"shuffle:{epoch}").permutation(len(utts)) if shuffle
             else np.arange(len(utts)))
    for start in range(0, len(utts), batch_size):
        idx = order[start:start + batch_size]
        yield pad_batch([utts[i] for i in idx], idx)


def pad_tokens(seqs, value: int = 0) -> tuple:
    lens = np.array([len(s) for s in seqs])
    out = np.full((len(seqs), max(lens.max(), 1)), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lens


# -- bundle I/O -------------------------------------------------------------
def write_features(path, utts, dim: int):
    """Header: magic, version (u32), dim (u32), count (u32), then one u32 frame
    count per utterance, then all frames as little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, dim, len(utts)))
        fh.write(struct.pack(f"<{len(utts)}I", *[u.feats.shape[0] for u in utts]))
        for u in utts:
            fh.write(np.ascontiguousarray(u.feats, dtype="<f8").tobytes())


def read_features(path) -> list:
    with open(path, "rb") as fh:
        if fh.read(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
            raise DataError(f"{path}: not a feature file")
        version, dim, count = struct.unpack("<III", fh.read(12))
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        frames = struct.unpack(f"<{count}I", fh.read(4 * count))
        return [np.frombuffer(fh.read(8 * n * dim), dtype="<f8").reshape(n, dim).astype(np.float64)
                for n in frames]


def read_text_file(path, vocab: Vocab) -> list:
    """One utterance per line, UTF-8."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [vocab.encode(line) for line in lines if line]


def save_bundle(ds: Dataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"symbols": ds.vocab.user_symbols, "synth": vars(ds.synth)}
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    if ds.grammar is not None:
        (d / "grammar.json").write_text(ds.grammar.to_json())
    for name in ("paired", "unpaired", "dev", "test"):
        utts = ds.split(name)
        (d / f"{name}.txt").write_text(
            "".join(ds.vocab.decode(u.text) + "\n" for u in utts), encoding="utf-8")
        if name != "unpaired":
            write_features(d / f"{name}.feats", utts, ds.synth.dim)


def load_bundle(directory) -> Dataset:
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise DataError(f"{d}: not a dataset bundle")
    meta = json.loads((d / "meta.json").read_text())
    vocab = Vocab(meta["symbols"])
    synth = SynthConfig(**meta["synth"])
    grammar = (GrammarSpec.from_json((d / "grammar.json").read_text())
               if (d / "grammar.json").exists() else None)
    parts = {}
    for name in ("paired", "unpaired", "dev", "test"):
        texts = read_text_file(d / f"{name}.txt", vocab)
        if name == "unpaired":
            parts[name] = [Utterance(t) for t in texts]
            continue
        feats = read_features(d / f"{name}.feats")
        if len(feats) != len(texts):
            raise DataError(f"{name}: {len(texts)} texts but {len(feats)} feature entries")
        parts[name] = [Utterance(t, f) for t, f in zip(texts, feats)]
    return Dataset(vocab, parts["paired"], parts["unpaired"], parts["dev"], parts["test"],
                   synth, grammar)
