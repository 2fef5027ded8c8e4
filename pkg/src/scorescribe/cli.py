"""Command-line surface: train, evaluate, transcribe, selfcheck.

Configuration is a flat ``key = value`` text file plus ``--set key=value``
overrides; unknown keys are rejected. Outputs land under ``--out-dir``
with fixed names (best.ckpt, last.ckpt, losses.tsv, losses.png, vocab.txt,
split.txt, report.json, report.txt, report.png).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 self-check failure.
"""

from __future__ import annotations

import functools
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import click

from . import figures, verify
from .ctc import CtcError, greedy_decode
from .data import (
    CONDITIONS,
    ENCODINGS,
    DataError,
    Sample,
    SplitSpec,
    build_vocab,
    discover_corpus,
    load_image,
    save_split,
    split_ids,
    synth_generate,
    synth_vocab,
)
from .model import ArchConfig, TranscriptionModel
from .training import (
    CheckpointError,
    NumericError,
    TrainSettings,
    checkpoint_load,
    evaluate_model,
    restore_model,
    train,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_SELFCHECK = 5


class ConfigError(Exception):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    """Documented defaults for every key; see README for semantics."""

    dataset_root: str = ""
    encoding: str = "semantic"
    condition: str = "clean"
    seed: int = 7
    lr: float = 1e-3
    max_epochs: int = 50
    batch_size: int = 16
    block_channels: str = "32,64,128,256"
    lstm_hidden: int = 256
    lstm_layers: int = 2
    rcl_steps: int = 2
    input_height: int = 128
    clip_norm: float = 5.0
    synth: bool = False
    synth_count: int = 32
    synth_classes: int = 8
    synth_max_label: int = 6
    target_ser: float = -1.0
    target_er: float = -1.0
    min_epochs: int = 10

    def channels(self) -> tuple[int, ...]:
        try:
            channels = tuple(int(c) for c in self.block_channels.split(",") if c.strip())
        except ValueError as exc:
            raise ConfigError(f"block_channels: {self.block_channels!r} is not a comma-separated int list") from exc
        if not channels or any(c < 1 for c in channels):
            raise ConfigError(f"block_channels must be positive ints, got {self.block_channels!r}")
        return channels

    def arch(self, num_classes: int) -> ArchConfig:
        try:
            return ArchConfig(
                num_classes=num_classes,
                input_height=self.input_height,
                block_channels=self.channels(),
                rcl_steps=self.rcl_steps,
                lstm_hidden=self.lstm_hidden,
                lstm_layers=self.lstm_layers,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def settings(self) -> TrainSettings:
        return TrainSettings(
            lr=self.lr,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            clip_norm=self.clip_norm if self.clip_norm > 0 else None,
            seed=self.seed,
            target_ser=self.target_ser if self.target_ser >= 0 else None,
            target_er=self.target_er if self.target_er >= 0 else None,
            min_epochs=self.min_epochs,
        )


def _coerce(key: str, raw: str, default):
    kind = type(default)
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from exc
    return raw


def load_run_config(path=None, overrides=(), **flag_overrides) -> RunConfig:
    """Config file, then --set overrides, then explicit flag overrides."""
    cfg = RunConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}

    def apply(key: str, raw: str, origin: str):
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        setattr(cfg, key, _coerce(key, raw, known[key]))

    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{p}:{ln}: expected key=value, got {line!r}")
            key, raw = stripped.split("=", 1)
            apply(key, raw, f"{p}:{ln}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key, raw, "--set")
    for key, value in flag_overrides.items():
        if value is not None:
            apply(key, str(value), "flag")

    if cfg.encoding not in ENCODINGS:
        raise ConfigError(f"encoding must be one of {ENCODINGS}, got {cfg.encoding!r}")
    if cfg.condition not in CONDITIONS:
        raise ConfigError(f"condition must be one of {CONDITIONS}, got {cfg.condition!r}")
    for key in ("max_epochs", "batch_size", "lstm_hidden", "lstm_layers", "min_epochs",
                "synth_count", "synth_classes", "synth_max_label", "rcl_steps"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    cfg.channels()
    return cfg


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(str(exc), EXIT_CONFIG)
        except (DataError, CtcError, CheckpointError, FileNotFoundError) as exc:
            _fail(str(exc), EXIT_DATA)
        except NumericError as exc:
            _fail(str(exc), EXIT_NUMERIC)

    return wrapper


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


# ---------------------------------------------------------------------------
# data assembly


def _synth_corpus(cfg: RunConfig):
    vocab = synth_vocab(cfg.synth_classes)
    samples = synth_generate(cfg.seed, cfg.synth_count, cfg.synth_classes, cfg.synth_max_label)
    return samples, vocab


def _dataset_samples(incipits, ids, condition: str, encoding: str, height: int) -> list[Sample]:
    by_id = {i.id: i for i in incipits}
    out = []
    for sample_id in ids:
        inc = by_id[sample_id]
        out.append(
            Sample(
                id=sample_id,
                image=load_image(inc.image_path(condition), height),
                tokens=inc.tokens(encoding),
            )
        )
    return out


def _discover(cfg: RunConfig):
    if not cfg.dataset_root:
        raise ConfigError("dataset_root is required unless synth=true")
    incipits, warnings = discover_corpus(cfg.dataset_root)
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    if not incipits:
        raise DataError(f"no usable incipits under {cfg.dataset_root}")
    return incipits


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """End-to-end monophonic staff transcription toolkit."""


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None, help="flat key=value config file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="override one config key")
@click.option("--out-dir", default="out", show_default=True)
@click.option("--synth", is_flag=True, help="train on the built-in synthetic glyph corpus")
@click.option("--seed", type=int, default=None)
@click.option("--dataset", "dataset_root", type=click.Path(), default=None)
@click.option("--encoding", type=click.Choice(ENCODINGS), default=None)
@click.option("--condition", type=click.Choice(CONDITIONS), default=None)
@click.option("--resume", "resume_path", type=click.Path(), default=None, help="continue from last.ckpt")
@_handled
def cmd_train(config_path, overrides, out_dir, synth, seed, dataset_root, encoding, condition, resume_path):
    """Train a model; writes best.ckpt, last.ckpt, losses.tsv/png, vocab.txt, split.txt."""
    cfg = load_run_config(
        config_path,
        overrides,
        synth=True if synth else None,
        seed=seed,
        dataset_root=dataset_root,
        encoding=encoding,
        condition=condition,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.synth:
        samples, vocab = _synth_corpus(cfg)
        train_samples = val_samples = samples
        split = SplitSpec(train=[s.id for s in samples], validation=[], test=[], seed=cfg.seed)
        tags = {"mode": "synth", "seed": cfg.seed}
    else:
        incipits = _discover(cfg)
        split = split_ids([i.id for i in incipits], cfg.seed)
        train_ids = set(split.train)
        vocab = build_vocab(i.tokens(cfg.encoding) for i in incipits if i.id in train_ids)
        train_samples = _dataset_samples(incipits, split.train, cfg.condition, cfg.encoding, cfg.input_height)
        val_samples = _dataset_samples(incipits, split.validation, cfg.condition, cfg.encoding, cfg.input_height)
        if not val_samples:  # tiny corpora: validate on the training set
            val_samples = train_samples
        tags = {
            "mode": "dataset",
            "train_condition": cfg.condition,
            "encoding": cfg.encoding,
            "seed": cfg.seed,
        }

    vocab.save(out / "vocab.txt")
    save_split(split, out / "split.txt")

    resume_ckpt = None
    if resume_path is not None:
        resume_ckpt = checkpoint_load(resume_path)
        if resume_ckpt.vocab != vocab:
            raise DataError("resume checkpoint vocabulary does not match the corpus vocabulary")
        model = restore_model(resume_ckpt)
    else:
        model = TranscriptionModel(cfg.arch(vocab.num_classes), cfg.seed)

    result = train(
        model,
        train_samples,
        val_samples,
        vocab,
        cfg.settings(),
        out_dir=out,
        resume=resume_ckpt,
        tags=tags,
    )
    if result.records:
        figures.render_loss_curve(result.records, out / "losses.png")
    click.echo(
        f"epochs: {len(result.records)}  best epoch: {result.best_epoch}  "
        f"best val SER/ER: {result.best_ser:.2f}/{result.best_er:.1f}  seed: {cfg.seed}"
    )
    click.echo(f"outputs under {out}")


@main.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out-dir", default="out", show_default=True)
@click.option("--condition", type=click.Choice(CONDITIONS), default=None, help="evaluation condition")
@click.option("--encoding", type=click.Choice(ENCODINGS), default=None)
@click.option("--synth", is_flag=True, help="evaluate on the built-in synthetic glyph corpus")
@click.option("--dataset", "dataset_root", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@_handled
def cmd_evaluate(checkpoint_path, config_path, overrides, out_dir, condition, encoding, synth, dataset_root, seed):
    """Score the test split; writes report.json/txt/png and prints the SER/ER cell."""
    cfg = load_run_config(
        config_path,
        overrides,
        synth=True if synth else None,
        dataset_root=dataset_root,
        condition=condition,
        encoding=encoding,
        seed=seed,
    )
    ckpt = checkpoint_load(checkpoint_path)
    model = restore_model(ckpt)
    vocab = ckpt.vocab

    if cfg.synth:
        if cfg.condition == "distorted":
            raise DataError("the synthetic corpus has no distorted images")
        samples, synth_v = _synth_corpus(cfg)
        if synth_v != vocab:
            raise DataError("checkpoint vocabulary does not match the synthetic corpus")
        tags = {"mode": "synth"}
    else:
        trained_encoding = ckpt.tags.get("encoding")
        if trained_encoding is not None and trained_encoding != cfg.encoding:
            raise DataError(
                f"checkpoint was trained on {trained_encoding!r} encoding, requested {cfg.encoding!r}"
            )
        incipits = _discover(cfg)
        split = split_ids([i.id for i in incipits], cfg.seed)
        samples = _dataset_samples(incipits, split.test, cfg.condition, cfg.encoding, ckpt.arch.input_height)
        known = set(vocab.tokens)
        for s in samples:
            for t in s.tokens:
                if t not in known:
                    raise DataError(f"token {t!r} (sample {s.id}) absent from checkpoint vocabulary")
        tags = {
            "mode": "dataset",
            "train_condition": ckpt.tags.get("train_condition", "?"),
            "eval_condition": cfg.condition,
            "encoding": cfg.encoding,
        }
    tags["seed"] = cfg.seed
    tags["checkpoint"] = str(checkpoint_path)

    report = evaluate_model(model, samples, vocab, tags=tags)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    figures.render_report(report, out / "report.png")
    click.echo(report.cell)


@main.command("transcribe")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.argument("image_path", type=click.Path())
@_handled
def cmd_transcribe(checkpoint_path, image_path):
    """Greedy-decode one image to a tab-separated token line on stdout."""
    ckpt = checkpoint_load(checkpoint_path)
    model = restore_model(ckpt)
    image = load_image(image_path, ckpt.arch.input_height)
    try:
        lattice = model.lattice(image, "eval")
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    tokens = ckpt.vocab.decode(greedy_decode(lattice.log_probs, ckpt.vocab.blank_id))
    click.echo("\t".join(tokens))


@main.command("selfcheck")
@click.option("--ctc-instances", type=int, default=200, show_default=True)
@_handled
def cmd_selfcheck(ctc_instances):
    """Run the 64-bit gradient suite and CTC oracle equivalence checks."""
    results = verify.run_all(ctc_instances=ctc_instances)
    failed = 0
    for r in results:
        click.echo(r.line())
        failed += 0 if r.passed else 1
    if failed:
        _fail(f"{failed} of {len(results)} checks failed", EXIT_SELFCHECK)
    click.echo(f"all {len(results)} checks passed")


if __name__ == "__main__":
    main()
