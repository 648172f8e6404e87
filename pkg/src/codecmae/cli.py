"""Command-line entry point.

Verbs: ``synth-data``, ``train-tokenizer``, ``pretrain``, ``selftrain``,
``extract``, ``probe``. Exit codes: 2 configuration, 3 format/shape,
4 numeric. ``CODECMAE_THREADS`` sets the torch thread count.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import container
from .audio_io import AudioBuffer, load_wav, synth_dataset, write_wav
from .config import RunConfig
from .errors import CodecMAEError, ConfigError, FormatError
from .frontend import melspectrogram
from .model import extract_audio_embeddings
from .probe import (
    global_score,
    linear_probe_grid,
    make_report,
    pool_mean,
    reports_to_json,
    reports_to_table,
    train_probe,
)
from .rvq import books_from_tensors, books_to_tensors, compute_gamma, rvq_encode, train_codebooks
from .trainer import load_checkpoint, pretrain, save_checkpoint, selftrain_stage

log = logging.getLogger("codecmae")


def read_corpus(directory: Path, sample_rate: int) -> tuple[list[AudioBuffer], list[int | None], list[str]]:
    """Load every WAV listed in ``labels.csv`` (or every ``*.wav`` when there is none)."""
    if not directory.is_dir():
        raise ConfigError(f"corpus directory {directory} does not exist")
    listing = directory / "labels.csv"
    if listing.exists():
        with open(listing, newline="") as fh:
            rows = [(r["file"], int(r["label"])) for r in csv.DictReader(fh)]
    else:
        rows = [(p.name, None) for p in sorted(directory.glob("*.wav"))]
    if not rows:
        raise ConfigError(f"corpus directory {directory} has no audio")
    clips = [load_wav(directory / name, sample_rate) for name, _ in rows]
    return clips, [label for _, label in rows], [name for name, _ in rows]


def cmd_synth_data(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = synth_dataset(cfg.synth_spec(), np.random.default_rng([cfg.seed, 7]))
    with open(out / "labels.csv", "w", newline="") as fh:
        fh.write("file,label\n")
        for i, (audio, label) in enumerate(items):
            name = f"clip_{i:05d}.wav"
            write_wav(out / name, audio)
            fh.write(f"{name},{label}\n")
    print(f"wrote {len(items)} clips to {out}")


def _corpus(cfg: RunConfig, args):
    directory = cfg.require_path("corpus_dir", getattr(args, "corpus", None))
    return read_corpus(directory, cfg.section("audio")["sample_rate"])


def cmd_train_tokenizer(cfg: RunConfig, args) -> None:
    clips, _, _ = _corpus(cfg, args)
    rvq_cfg = cfg.section("rvq")
    n_mels = cfg.section("frontend")["n_mels"]
    rng = np.random.default_rng([cfg.seed, 1])
    feats = [melspectrogram(c, n_mels) for c in clips]
    books = train_codebooks(feats, rvq_cfg["n_books"], rvq_cfg["size"], rng, max_frames=rvq_cfg["max_frames"])
    pick = rng.choice(len(feats), size=min(rvq_cfg["gamma_sample"], len(feats)), replace=False)
    gamma = compute_gamma(books, [feats[i] for i in np.sort(pick)])
    tensors, meta = books_to_tensors(books, gamma)
    container.save(args.out, tensors, meta)
    energy = np.mean([rvq_encode(feats[i], books)[1] for i in np.sort(pick)], axis=0)
    for q, (e, g) in enumerate(zip(energy, gamma.gamma)):
        print(f"stage {q}: residual energy {e:.6f} gamma {g:.6f}")


def _load_tokenizer(path):
    tensors, meta = container.load(path)
    if meta.get("kind") != "rvq":
        raise FormatError(f"{path} is not a tokenizer container")
    return books_from_tensors(tensors, meta)


def _metrics_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".metrics.csv")


def cmd_pretrain(cfg: RunConfig, args) -> None:
    clips, _, _ = _corpus(cfg, args)
    books, gamma = _load_tokenizer(cfg.require_path("tokenizer", args.tokenizer))
    ckpt = pretrain(clips, books, cfg.model_config(), cfg.loss_config(gamma), cfg.train_config(),
                    cfg.mask_config(), metrics_path=_metrics_path(args.out))
    save_checkpoint(args.out, ckpt)
    print(f"stage 1: {ckpt.step} steps, final loss {ckpt.history[-1][1]:.4f}")


def cmd_selftrain(cfg: RunConfig, args) -> None:
    clips, _, _ = _corpus(cfg, args)
    stage1 = load_checkpoint(cfg.require_path("checkpoint", args.checkpoint))
    source = load_checkpoint(args.source).model if args.source else None
    st = cfg.section("selftrain")
    ckpt, kmeans = selftrain_stage(stage1, clips, st["k"], cfg.train_config(), cfg.loss_config(), cfg.mask_config(),
                                   sample_size=st["sample_size"], source=source, metrics_path=_metrics_path(args.out))
    save_checkpoint(args.out, ckpt)
    out = Path(args.out)
    container.save(out.with_name(out.name + ".kmeans.ntc"), {"centroids": kmeans.centroids}, {"kind": "kmeans", "k": kmeans.k})
    print(f"stage 2: {ckpt.step} steps, final loss {ckpt.history[-1][1]:.4f}")


def _embed_clips(cfg: RunConfig, model, clips) -> list[np.ndarray]:
    chunk_s = cfg.section("audio")["chunk_s"]
    return [extract_audio_embeddings(c, model, chunk_s).data.astype(np.float32) for c in clips]


def cmd_extract(cfg: RunConfig, args) -> None:
    model = load_checkpoint(cfg.require_path("checkpoint", args.checkpoint)).model.eval()
    src = Path(args.input)
    sr = cfg.section("audio")["sample_rate"]
    if src.is_dir():
        clips, _, names = read_corpus(src, sr)
    elif src.is_file():
        clips, names = [load_wav(src, sr)], [src.name]
    else:
        raise ConfigError(f"input {src} does not exist")
    embs = _embed_clips(cfg, model, clips)
    tensors = {f"emb.{Path(n).stem}": e for n, e in zip(names, embs)}
    container.save(args.out, tensors, {"kind": "embeddings", "frame_rate": sr / 320, "dim": model.cfg.dim})
    for n, e in zip(names, embs):
        print(f"{n}: {e.shape[0]} frames x {e.shape[1]}")


def split_indices(n: int, val_fraction: float, test_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    n_val = max(1, int(round(val_fraction * n)))
    return order[n_test + n_val:], order[n_test:n_test + n_val], order[:n_test]


def cmd_probe(cfg: RunConfig, args) -> None:
    pcfg = cfg.section("probe")
    task = pcfg["task"]
    norm = pcfg["norm_stats"].get(task)
    if norm is None:
        raise ConfigError(f"probe.norm_stats has no entry for task {task!r}")
    if pcfg["data_dir"] is None:
        raise ConfigError("probe.data_dir is not set")
    data_dir = cfg.resolve(pcfg["data_dir"])
    model = load_checkpoint(cfg.require_path("checkpoint", args.checkpoint)).model.eval()
    clips, labels, _ = read_corpus(data_dir, cfg.section("audio")["sample_rate"])
    if any(lab is None for lab in labels):
        raise ConfigError(f"probe data {data_dir} needs a labels.csv")
    x = np.stack([pool_mean(e) for e in _embed_clips(cfg, model, clips)])
    y = np.asarray(labels)
    rng = np.random.default_rng([cfg.seed, 5])
    tr, va, te = split_indices(len(y), pcfg["val_fraction"], pcfg["test_fraction"], rng)
    grid = linear_probe_grid() if pcfg["linear"] else pcfg["grid"]
    probe = train_probe(x[tr], y[tr], x[va], y[va], grid=grid, seed=cfg.seed, n_classes=int(y.max()) + 1)
    if pcfg["metric"] == "accuracy":
        outcomes, fn = (probe.predict(x[te]) == y[te]).astype(np.float64), np.mean
    else:
        raise ConfigError(f"probe.metric {pcfg['metric']!r} is not supported for single-label data")
    report = make_report(task, outcomes, fn, pcfg["metric"], rng, norm, probe.params, pcfg["bootstrap_iters"])
    g = global_score({task: report.metric}, pcfg["norm_stats"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(reports_to_json([report], g))
    table = reports_to_table([report], g)
    out.with_suffix(".txt").write_text(table)
    print(table, end="")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": cmd_pretrain,
    "selftrain": cmd_selftrain,
    "extract": cmd_extract,
    "probe": cmd_probe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codecmae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run config")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", required=True, help="output file (directory for synth-data)")
        if name in ("train-tokenizer", "pretrain", "selftrain"):
            p.add_argument("--corpus", help="corpus directory (overrides paths.corpus_dir)")
        if name == "pretrain":
            p.add_argument("--tokenizer", help="tokenizer container (overrides paths.tokenizer)")
        if name in ("selftrain", "extract", "probe"):
            p.add_argument("--checkpoint", help="model checkpoint (overrides paths.checkpoint)")
        if name == "selftrain":
            p.add_argument("--source", help="checkpoint whose embeddings define the clusters")
        if name == "extract":
            p.add_argument("--input", required=True, help="WAV file or directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("CODECMAE_LOG", "WARNING"), format="%(name)s: %(message)s")
    threads = os.environ.get("CODECMAE_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        cfg = RunConfig.load(args.config, args.set, args.seed)
        COMMANDS[args.command](cfg, args)
    except CodecMAEError as exc:
        print(f"codecmae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
