"""Command-line entry points.

    advasr gen-data   write a dataset bundle
    advasr train      baseline or adversarial ASR training
    advasr train-lm   RNN-LM training on all available text
    advasr decode     hypotheses for one split
    advasr eval       dev and test reports
    advasr report     Method / Dev / Test / WER delta table over run directories
    advasr sweep      per-beam error table for one checkpoint

Every command snapshots its configuration into the run directory and only
ever adds new timestamped files there.  Without ``--config``, the commands
that use a trained model (train-lm, decode, eval, sweep) start from the
run's latest training snapshot.  Exit status: 0 on success, 2 for a
configuration error, 3 for a data or checkpoint error, 4 for a numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .asr import InputTooShortError
from .autodiff import ContractError, NumericDomainError
from .checkpoint import CheckpointError, load_model, save_model
from .config import ENV_PREFIX, ConfigError, RunConfig, load_config, to_ini
from .ctc import InfeasibleAlignmentError
from .data import DataError, load_bundle, make_split, save_bundle
from .metrics import EvalReport, relative_improvement
from .rnnlm import lm_train
from .trainer import Trainer, decode_split, evaluate

log = logging.getLogger("advasr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- run directory helpers -------------------------------------------------

def _stamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")


def new_path(run_dir: Path, prefix: str, suffix: str = "") -> Path:
    """A fresh timestamped path inside ``run_dir``; never an existing one."""
    stamp = _stamp()
    path = run_dir / f"{prefix}-{stamp}{suffix}"
    n = 1
    while path.exists():
        path = run_dir / f"{prefix}-{stamp}.{n}{suffix}"
        n += 1
    return path


def latest(run_dir: Path, prefix: str, suffix: str = "") -> Path | None:
    found = sorted(run_dir.glob(f"{prefix}-*{suffix}"))
    return found[-1] if found else None


def _snapshot(cfg: RunConfig, run_dir: Path, command: str):
    path = new_path(run_dir, "config", ".ini")
    path.write_text(f"; advasr {command}\n" + to_ini(cfg), encoding="utf-8")
    return path


# -- shared setup ----------------------------------------------------------

def _env(name: str):
    return os.environ.get(ENV_PREFIX + name)


def train_snapshot(run_dir: Path) -> Path | None:
    """The newest config snapshot written by ``train`` in ``run_dir``."""
    for path in sorted(run_dir.glob("config-*.ini"), reverse=True):
        with open(path, encoding="utf-8") as fh:
            if fh.readline().strip() == "; advasr train":
                return path
    return None


def build_config(args) -> RunConfig:
    """Defaults < config file < environment < flags.

    Commands that consume a trained model start from the run's training
    snapshot when no config file is given, so they see the same data.
    """
    path = args.config
    if path is None and args.command in INHERITS_TRAIN_CONFIG:
        path = train_snapshot(Path(args.run_dir))
    cfg = load_config(path)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.train.mode = args.mode
    if args.beam is not None:
        cfg.decode.beam = args.beam
    if args.lm_weight is not None:
        cfg.decode.lm_weight = args.lm_weight
    return cfg.validate()


def build_dataset(cfg: RunConfig):
    """The bundle named in [data], else the toy split for the root seed."""
    d = cfg.data
    if d.bundle:
        return load_bundle(d.bundle)
    return make_split(d.grammar(), d.synth(), d.n_paired, d.n_unpaired, d.n_dev, d.n_test,
                      seed=cfg.train.seed)


def _asr_path(args, run_dir: Path) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else latest(run_dir, "asr", ".ckpt")
    if path is None:
        raise CheckpointError(f"{run_dir}: no ASR checkpoint; run 'train' first or pass --checkpoint")
    return path


def _load_lm(args, run_dir: Path, cfg: RunConfig):
    """The LM to fuse, or None when fusion is off or no LM has been trained."""
    if cfg.decode.lm_weight == 0:
        return None
    path = Path(args.lm) if args.lm else latest(run_dir, "lm", ".ckpt")
    if path is None:
        log.warning("no LM checkpoint in %s; decoding without fusion", run_dir)
        return None
    return load_model(path)


def _decode_kwargs(cfg: RunConfig, lm) -> dict:
    return dict(beam=cfg.decode.beam, lm=lm, lm_weight=cfg.decode.lm_weight if lm else 0.0,
                ctc_weight=cfg.decode.ctc_weight, length_penalty=cfg.decode.length_penalty)


# -- commands --------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, run_dir: Path) -> int:
    ds = build_dataset(cfg)
    out = new_path(run_dir, "data")
    save_bundle(ds, out)
    print(out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    ds = build_dataset(cfg)
    tc = cfg.train_config(len(ds.vocab), ds.synth.dim)
    stamp_path = new_path(run_dir, "metrics", ".jsonl")
    stamp = stamp_path.name[len("metrics-"):-len(".jsonl")]
    trainer = Trainer(tc, ds)
    trainer.fit(validate=not args.no_validate, ckpt_dir=run_dir / f"checkpoints-{stamp}")
    trainer.log.write(stamp_path)
    save_model(run_dir / f"asr-{stamp}.ckpt", trainer.asr, "asr")
    if trainer.clm is not None:
        save_model(run_dir / f"clm-{stamp}.ckpt", trainer.clm, "clm")
    dev = [r for r in trainer.log if r["kind"] == "dev"]
    if dev:
        print(f"{tc.mode}: dev CER {dev[-1]['cer']:.2f} WER {dev[-1]['wer']:.2f}")
    print(run_dir / f"asr-{stamp}.ckpt")
    return EXIT_OK


def cmd_train_lm(args, cfg: RunConfig, run_dir: Path) -> int:
    ds = build_dataset(cfg)
    corpus = [u.text for u in ds.unpaired] + [u.text for u in ds.paired]
    if not corpus:
        raise DataError("no text to train the LM on")
    lm, ppl = lm_train(corpus, cfg.lm.lm_config(len(ds.vocab)), cfg.lm.epochs, cfg.train.seed)
    path = new_path(run_dir, "lm", ".ckpt")
    save_model(path, lm, "lm")
    metrics = path.with_name(path.name.replace("lm-", "lm-metrics-", 1)).with_suffix(".jsonl")
    metrics.write_text("".join(json.dumps({"kind": "lm", "epoch": i, "perplexity": p}) + "\n"
                               for i, p in enumerate(ppl)))
    print(f"LM perplexity {ppl[-1]:.3f}" if ppl else "LM trained for 0 epochs")
    print(path)
    return EXIT_OK


def cmd_decode(args, cfg: RunConfig, run_dir: Path) -> int:
    ds = build_dataset(cfg)
    asr = load_model(_asr_path(args, run_dir))
    lm = _load_lm(args, run_dir, cfg)
    hyps = decode_split(asr, ds.split(args.split), **_decode_kwargs(cfg, lm))
    out = new_path(run_dir, f"hyps-{args.split}", ".txt")
    out.write_text("".join(ds.vocab.decode(h) + "\n" for h in hyps), encoding="utf-8")
    print(out)
    return EXIT_OK


def _meta(cfg: RunConfig, split: str) -> dict:
    return {"mode": cfg.train.mode, "split": split, "seed": cfg.train.seed}


def cmd_eval(args, cfg: RunConfig, run_dir: Path) -> int:
    ds = build_dataset(cfg)
    asr = load_model(_asr_path(args, run_dir))
    lm = _load_lm(args, run_dir, cfg)
    stamp = _stamp()
    for split in ("dev", "test"):
        rep = evaluate(asr, ds.split(split), ds.vocab, **_decode_kwargs(cfg, lm),
                       meta=_meta(cfg, split))
        if args.baseline:
            base = latest(Path(args.baseline), f"report-{split}", ".txt")
            if base is None:
                raise DataError(f"{args.baseline}: no {split} report to compare against")
            rep.compare("baseline", EvalReport.read(base))
        out = run_dir / f"report-{split}-{stamp}.txt"
        rep.write(out)
        print(f"{split}: CER {rep.cer:.2f} WER {rep.wer:.2f}  ({out})")
    return EXIT_OK


def report_table(run_dirs, metric: str = "wer") -> str:
    """Markdown table from the latest dev/test reports; the first run is the baseline."""
    rows = []
    for rd in run_dirs:
        reports = {}
        for split in ("dev", "test"):
            path = latest(Path(rd), f"report-{split}", ".txt")
            if path is None:
                raise DataError(f"{rd}: no {split} report; run 'eval' first")
            reports[split] = EvalReport.read(path)
        rows.append((Path(rd).name, reports))
    key = metric.lower()
    base_test = getattr(rows[0][1]["test"], key)
    label = metric.upper()
    lines = [f"| Method | Dev {label} | Test {label} | {label} Δ (%) |", "|---|---|---|---|"]
    for i, (name, reps) in enumerate(rows):
        dev, test = getattr(reps["dev"], key), getattr(reps["test"], key)
        delta = "-" if i == 0 else f"{relative_improvement(base_test, test):.1f}"
        lines.append(f"| {name} | {dev:.2f} | {test:.2f} | {delta} |")
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg: RunConfig, run_dir: Path) -> int:
    table = report_table(args.runs, args.metric)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def sweep_table(asr, utts, vocab, beams, lm=None, lm_weight: float = 0.0,
                ctc_weight: float = 0.0, length_penalty: float = 0.0) -> str:
    lines = ["beam\tCER\tWER"]
    for beam in beams:
        rep = evaluate(asr, utts, vocab, beam, lm, lm_weight if lm else 0.0, ctc_weight,
                       length_penalty=length_penalty)
        lines.append(f"{beam}\t{rep.cer:.4f}\t{rep.wer:.4f}")
    return "\n".join(lines) + "\n"


def _beam_list(text: str) -> list:
    try:
        beams = [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise ConfigError(f"--beams: expected comma-separated integers, got {text!r}") from None
    if not beams or min(beams) < 1 or beams != sorted(set(beams)):
        raise ConfigError("--beams: need strictly increasing positive integers")
    return beams


def cmd_sweep(args, cfg: RunConfig, run_dir: Path) -> int:
    beams = _beam_list(args.beams)
    ds = build_dataset(cfg)
    asr = load_model(_asr_path(args, run_dir))
    lm = _load_lm(args, run_dir, cfg)
    table = sweep_table(asr, ds.split(args.split), ds.vocab, beams, lm, cfg.decode.lm_weight,
                        cfg.decode.ctc_weight, cfg.decode.length_penalty)
    out = new_path(run_dir, "sweep", ".tsv")
    out.write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


INHERITS_TRAIN_CONFIG = ("train-lm", "decode", "eval", "sweep")

COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "train-lm": cmd_train_lm,
            "decode": cmd_decode, "eval": cmd_eval, "report": cmd_report, "sweep": cmd_sweep}


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("CONFIG"), help="INI config file")
    common.add_argument("--run-dir", default=_env("RUN_DIR") or "runs/default",
                        help="directory for snapshots, logs and outputs")
    common.add_argument("--seed", type=int, default=_env("SEED"), help="root seed")
    common.add_argument("--beam", type=int, default=_env("BEAM"), help="beam size")
    common.add_argument("--lm-weight", type=float, default=_env("LM_WEIGHT"),
                        help="shallow-fusion LM weight")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="advasr", description="Adversarial training for attention/CTC speech recognition.",
        epilog=f"Flags can also be set through {ENV_PREFIX}CONFIG, {ENV_PREFIX}RUN_DIR, "
               f"{ENV_PREFIX}SEED, {ENV_PREFIX}MODE, {ENV_PREFIX}BEAM and {ENV_PREFIX}LM_WEIGHT; "
               f"config keys through {ENV_PREFIX}<SECTION>_<KEY>.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument("--checkpoint", help="ASR checkpoint (default: latest in run dir)")
    model_args.add_argument("--lm", help="LM checkpoint (default: latest in run dir)")

    add("gen-data", "write a dataset bundle")
    p = add("train", "train an ASR model")
    p.add_argument("--mode", choices=("baseline", "at"), default=_env("MODE"))
    p.add_argument("--no-validate", action="store_true", help="skip per-epoch dev decoding")
    add("train-lm", "train the RNN language model")
    p = sub.add_parser("decode", parents=[common, model_args], help="decode one split")
    p.add_argument("--split", choices=("paired", "dev", "test"), default="test")
    p = sub.add_parser("eval", parents=[common, model_args], help="write dev and test reports")
    p.add_argument("--baseline", help="run directory whose latest reports give WER deltas")
    p = add("report", "relative-improvement table over run directories")
    p.add_argument("runs", nargs="+", help="run directories; the first is the baseline")
    p.add_argument("--metric", choices=("wer", "cer"), default="wer")
    p.add_argument("--out", help="also write the table here")
    p = sub.add_parser("sweep", parents=[common, model_args], help="beam-size sweep")
    p.add_argument("--beams", default="1,2,4,8")
    p.add_argument("--split", choices=("dev", "test"), default="test")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        run_dir = Path(args.run_dir)
        if args.command != "report":
            run_dir.mkdir(parents=True, exist_ok=True)
            _snapshot(cfg, run_dir, args.command)
        return COMMANDS[args.command](args, cfg, run_dir)
    except (ConfigError, ContractError) as exc:
        print(f"advasr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, InputTooShortError, InfeasibleAlignmentError,
            OSError) as exc:
        print(f"advasr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, NumericDomainError) as exc:
        print(f"advasr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
