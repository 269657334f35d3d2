"""Command-line interface: train, caption, eval, heatmap, ablate, bench.

Configuration comes from a key=value file (one pair per line, # starts
a comment) plus the --seed and --out overrides; unknown keys are
rejected before any compute.  All outputs land under the --out
directory.  Exit codes: 0 success, 1 usage or config error, 2 data
error, 3 checkpoint integrity error.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import flops
from .autograd import Tensor
from .checkpoint import load_checkpoint, model_from_checkpoint, save_model
from .data import CaptionDataset, load_dataset, make_synthetic, read_netpbm, write_netpbm
from .encoder import (
    EncoderConfig,
    KernelShape,
    channel_group_attention,
    global_attention,
    heatmap,
    heatmap_to_gray,
    spatial_window_attention,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    IntegrityError,
    ShapeError,
    VocabError,
)
from .metrics import ScoredCorpus, format_reports, score_report
from .model import ModelConfig, build_model, encode_image, set_channel_stats
from .textdec import DecoderConfig, Vocabulary
from .train import (
    TrainConfig,
    caption_records,
    fit,
    generate,
    run_ablation,
    sequence_text,
    steps_per_epoch,
    training_pairs,
)

BENCH_PATCHES = (64, 128, 256, 512)


@dataclass
class RunConfig:
    """Every tunable of a run, flat so a key=value file covers it all."""

    # dataset: either synthetic=N or images=DIR with captions=FILE
    images: str = ""
    captions: str = ""
    synthetic: int = 0
    ratios: tuple = (0.8, 0.1, 0.1)
    min_freq: int = 1
    # vision encoder
    image_size: int = 16
    patch_size: int = 4
    image_channels: int = 3
    dim: int = 16
    heads: int = 2
    window_patches: int = 4
    groups: int = 4
    depth: int = 1
    mode: str = "dual"
    window_layout: str = "1d"
    pos_encoding: str = "sinusoidal"
    ffn_expansion: int = 4
    # text decoder and fusion
    dec_dim: int = 16
    dec_heads: int = 2
    dec_depth: int = 1
    dec_ffn_expansion: int = 4
    joint_dim: int = 8
    # optimization
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    contrastive_weight: float = 0.5
    batch_size: int = 8
    epochs: int = 1
    # generation and evaluation
    max_len: int = 16
    beam_width: int = 1
    eval_split: str = "val"
    # run plumbing
    vocab: str = ""
    seed: int = 0
    out: str = "out"


_CASTS = {int: int, float: float, str: str, tuple: lambda raw: tuple(float(p) for p in raw.split(","))}


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def run_config(args) -> RunConfig:
    """The RunConfig for parsed CLI args: file values, then flag overrides."""
    rc = RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    if args.config:
        for key, value in parse_config_file(args.config).items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            caster = _CASTS[type(getattr(rc, key))]
            try:
                setattr(rc, key, caster(value))
            except ValueError as e:
                raise ConfigError(f"config key {key!r}: {e}") from e
    if args.seed is not None:
        rc.seed = args.seed
    if args.out is not None:
        rc.out = args.out
    return rc


def encoder_config(rc: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        image_size=rc.image_size, patch_size=rc.patch_size, image_channels=rc.image_channels,
        dim=rc.dim, heads=rc.heads, window_patches=rc.window_patches, groups=rc.groups,
        depth=rc.depth, mode=rc.mode, window_layout=rc.window_layout,
        pos_encoding=rc.pos_encoding, ffn_expansion=rc.ffn_expansion,
    )


def model_config(rc: RunConfig, vocab_size: int) -> ModelConfig:
    enc = encoder_config(rc)
    dec = DecoderConfig(
        vocab_size=vocab_size, dim=rc.dec_dim, heads=rc.dec_heads, depth=rc.dec_depth,
        context_width=enc.feature_width, ffn_expansion=rc.dec_ffn_expansion,
    )
    return ModelConfig(encoder=enc, decoder=dec, joint_dim=rc.joint_dim)


def train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=rc.lr, beta1=rc.beta1, beta2=rc.beta2, eps=rc.eps,
        contrastive_weight=rc.contrastive_weight, batch_size=rc.batch_size,
    )


def load_run_dataset(rc: RunConfig) -> CaptionDataset:
    if rc.synthetic > 0:
        return make_synthetic(rc.synthetic, grid=rc.image_size, seed=rc.seed)
    if rc.images and rc.captions:
        return load_dataset(rc.images, rc.captions, rc.ratios)
    raise ConfigError("dataset unset: give synthetic=N, or images=DIR and captions=FILE")


def out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_vocab(rc: RunConfig, checkpoint_path) -> Vocabulary:
    path = Path(rc.vocab) if rc.vocab else Path(checkpoint_path).parent / "vocab.txt"
    if not path.exists():
        raise DataError(f"vocabulary file {path} not found (set the vocab= config key)")
    return Vocabulary.load(path)


def load_image(path, cfg: EncoderConfig) -> Tensor:
    pixels, maxval = read_netpbm(path)
    arr = pixels.astype(np.float64) / maxval
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape != (cfg.image_size, cfg.image_size, cfg.image_channels):
        raise DataError(
            f"image {path} is {arr.shape}, model expects "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.image_channels})"
        )
    return Tensor(arr)


def cmd_train(args) -> int:
    rc = run_config(args)
    tcfg = train_config(rc)
    if rc.epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {rc.epochs}")
    out = out_dir(rc)
    ds = load_run_dataset(rc)
    captions = [c for _, c in ds.caption_pairs("train")]
    if not captions:
        raise DataError("training split has no captions")
    vocab = Vocabulary.from_corpus(captions, min_freq=rc.min_freq)
    vocab.save(out / "vocab.txt")
    model = build_model(model_config(rc, len(vocab)), vocab, seed=rc.seed)
    set_channel_stats(model, ds.mean, ds.std)
    pairs = training_pairs(ds, vocab)
    extra = {"seed": rc.seed}
    save_model(out / "epoch-0000.ckpt", model, None, extra=extra)
    log_path = out / "loss.tsv"
    fresh_log = not log_path.exists() or log_path.stat().st_size == 0
    state = None
    with open(log_path, "a") as log:
        if fresh_log:
            log.write("step\tce\tcontrastive\ttotal\n")

        def on_step(h):
            log.write(f"{h.step}\t{h.ce!r}\t{h.contrastive!r}\t{h.total!r}\n")

        per_epoch = steps_per_epoch(len(pairs), tcfg.batch_size)
        for epoch in range(1, rc.epochs + 1):
            state, _ = fit(model, pairs, tcfg, steps=per_epoch, state=state, on_step=on_step)
            save_model(out / f"epoch-{epoch:04d}.ckpt", model, state, extra=extra)
    steps = state.step if state is not None else 0
    print(f"trained {rc.epochs} epochs ({steps} steps) over {len(pairs)} pairs; outputs in {out}")
    return 0


def cmd_caption(args) -> int:
    rc = run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    vocab = load_vocab(rc, args.checkpoint)
    model = model_from_checkpoint(ckpt, vocab)
    image = load_image(args.image, model.cfg.encoder)
    seq = generate(model, image, max_len=rc.max_len, beam_width=rc.beam_width)
    print(sequence_text(vocab, seq))
    return 0


def cmd_eval(args) -> int:
    rc = run_config(args)
    out = out_dir(rc)
    ds = load_run_dataset(rc)
    ckpt = load_checkpoint(args.checkpoint)
    vocab = load_vocab(rc, args.checkpoint)
    model = model_from_checkpoint(ckpt, vocab)
    records = ds.split_records(rc.eval_split)
    if not records:
        raise DataError(f"split {rc.eval_split!r} is empty")
    generated = caption_records(model, records, max_len=rc.max_len, beam_width=rc.beam_width)
    with open(out / "candidates.tsv", "w") as f:
        for name, (hypothesis, _) in generated.items():
            f.write(f"{name}\t{hypothesis}\n")
    report = score_report(ScoredCorpus.from_texts(generated))
    table = format_reports({rc.eval_split: report})
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_heatmap(args) -> int:
    rc = run_config(args)
    out = out_dir(rc)
    ckpt = load_checkpoint(args.checkpoint)
    vocab = load_vocab(rc, args.checkpoint)
    model = model_from_checkpoint(ckpt, vocab)
    image = load_image(args.image, model.cfg.encoder)
    enc_out = encode_image(model, image)
    stem = Path(args.image).stem
    for block in range(model.cfg.encoder.depth):
        gray = heatmap_to_gray(heatmap(enc_out, block=block))
        path = out / f"{stem}-heatmap-block{block}.pgm"
        write_netpbm(path, gray)
        print(path)
    return 0


def cmd_ablate(args) -> int:
    rc = run_config(args)
    out = out_dir(rc)
    ds = load_run_dataset(rc)
    captions = [c for _, c in ds.caption_pairs("train")]
    if not captions:
        raise DataError("training split has no captions")
    vocab = Vocabulary.from_corpus(captions, min_freq=rc.min_freq)
    steps = rc.epochs * steps_per_epoch(len(ds.caption_pairs("train")), rc.batch_size)
    if steps < 1:
        raise ConfigError("ablate needs epochs >= 1")
    reports = run_ablation(
        ds, vocab, model_config(rc, len(vocab)), train_config(rc), steps,
        seed=rc.seed, eval_split=rc.eval_split, max_len=rc.max_len,
    )
    table = format_reports(reports)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def bench_rows(rc: RunConfig) -> list[dict]:
    """FLOPs and wall time for each attention kernel at each patch count."""
    rows = []
    c = rc.dim
    rng = np.random.default_rng(rc.seed)
    for p in BENCH_PATCHES:
        shape = KernelShape(patches=p, dim=c, window_patches=rc.window_patches, groups=rc.groups)
        x = Tensor(rng.standard_normal((p, c)))
        heads = [
            tuple(Tensor(rng.standard_normal((c // rc.heads, c // rc.heads))) for _ in range(3))
            for _ in range(rc.heads)
        ]
        spatial = [Tensor(rng.standard_normal((c, c))) for _ in range(3)]
        groups = [
            tuple(Tensor(rng.standard_normal((shape.group_dim, shape.group_dim))) for _ in range(3))
            for _ in range(rc.groups)
        ]
        row = {"patches": p}
        for kernel, run in (
            ("global", lambda: global_attention(x, heads)),
            ("windowed", lambda: spatial_window_attention(x, *spatial, shape)),
            ("channel", lambda: channel_group_attention(x, groups, shape)),
        ):
            with flops.count_flops() as counter:
                start = time.perf_counter()
                run()
                elapsed = time.perf_counter() - start
            row[f"{kernel}_flops"] = counter.total
            row[f"{kernel}_ms"] = elapsed * 1e3
        rows.append(row)
    return rows


def fit_r2(x: np.ndarray, y: np.ndarray, degree: int) -> float:
    coeffs = np.polyfit(x, y, degree)
    residual = y - np.polyval(coeffs, x)
    total = y - y.mean()
    return 1.0 - (residual @ residual) / (total @ total)


def format_bench(rows: list[dict]) -> str:
    kernels = ("global", "windowed", "channel")
    header = ["patches"]
    for kernel in kernels:
        header += [f"{kernel}_flops", f"{kernel}_ms"]
    lines = ["\t".join(header)]
    for row in rows:
        cells = [str(row["patches"])]
        for kernel in kernels:
            cells += [str(row[f"{kernel}_flops"]), f"{row[f'{kernel}_ms']:.3f}"]
        lines.append("\t".join(cells))
    p = np.array([row["patches"] for row in rows], dtype=float)
    for kernel in kernels:
        y = np.array([row[f"{kernel}_flops"] for row in rows], dtype=float)
        lines.append(
            f"{kernel}: linear fit R^2 = {fit_r2(p, y, 1):.6f}, "
            f"quadratic fit R^2 = {fit_r2(p, y, 2):.6f}"
        )
    return "\n".join(lines)


def cmd_bench(args) -> int:
    rc = run_config(args)
    out = out_dir(rc)
    table = format_bench(bench_rows(rc))
    (out / "bench.txt").write_text(table + "\n")
    print(table)
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory (default: out)")

    parser = _Parser(prog="dualcap", description="Train and run a dual-attention image captioner.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a model, write checkpoints and a loss log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", parents=[common], help="caption one image with a trained model")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", parents=[common], help="score generated captions on a dataset split")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", parents=[common], help="write per-block attention heatmaps as PGM")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("ablate", parents=[common], help="train and score all attention/contrastive variants")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", parents=[common], help="FLOP/time scaling of the attention kernels")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return 3
    except (DataError, VocabError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
