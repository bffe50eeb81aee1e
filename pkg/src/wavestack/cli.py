"""Command-line entry point: feature extraction, training, synthesis,
evaluation, and resampling utilities.

Exit codes: 0 success, 1 user error (bad arguments, files, config),
2 runtime failure (divergence, I/O mid-run).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .audio import AudioBuffer, load_mel_file, load_wav, log_mel, save_mel_file, save_wav
from .errors import ConfigError, DivergenceError, FormatError, StateError
from .metrics import evaluate_pair_dir
from .pipeline import (
    StageRates,
    build_stages,
    load_checkpoint,
    rtf,
    synthesize,
    train_all,
)
from .report import (
    render_loss_figure,
    render_metrics_figure,
    write_loss_csv,
    write_metrics_csv,
)
from .resample import downsample, upsample

log = logging.getLogger("wavestack")


def _rate_adjust(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    if buf.sample_rate == target_rate:
        return buf
    if buf.sample_rate % target_rate == 0:
        return downsample(buf, target_rate)
    if target_rate % buf.sample_rate == 0:
        return upsample(buf, target_rate)
    raise ConfigError(f"{buf.sample_rate} Hz is not an integer ratio of {target_rate} Hz")


def _discover_wavs(directory: Path) -> list:
    return sorted(p for p in Path(directory).rglob("*.wav") if p.is_file())


def cmd_features(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set)
    feat = cfgmod.feature_config(cfg)
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    wavs = _discover_wavs(in_dir)
    if not wavs:
        log.error("no .wav files under %s", in_dir)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, out_dir / "features.config.json")
    failures = 0
    for path in wavs:
        try:
            buf = _rate_adjust(load_wav(path), feat.sample_rate)
            mel = log_mel(buf, feat)
        except Exception as exc:
            log.warning("skipping %s: %s", path, exc)
            failures += 1
            continue
        save_mel_file(mel, out_dir / (path.stem + ".mel"))
        log.info("%s -> %d frames", path.name, mel.n_frames)
    return 1 if failures == len(wavs) else 0


def _load_training_set(data_dir: Path, rate: int, min_samples: int) -> list:
    dataset = []
    for path in _discover_wavs(data_dir):
        try:
            buf = _rate_adjust(load_wav(path), rate)
        except Exception as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        if len(buf) < min_samples:
            log.warning("skipping %s: %d samples < segment length %d", path, len(buf), min_samples)
            continue
        dataset.append(buf)
    return dataset


def cmd_train(args) -> int:
    overrides = list(args.set)
    if args.max_steps is not None:
        overrides.append(f"train.max_steps={args.max_steps}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = cfgmod.load_config(args.config, overrides)
    if args.stages is not None:
        if not 1 <= args.stages <= len(cfg["rates"]):
            log.error("--stages must be in 1..%d", len(cfg["rates"]))
            return 1
        cfg["rates"] = cfg["rates"][: args.stages]
    data_dir = args.data_dir or cfg["paths"]["data_dir"]
    out_dir = args.out_dir or cfg["paths"]["out_dir"]
    if not data_dir or not out_dir:
        log.error("data_dir and out_dir must be given (flags or paths.* config keys)")
        return 1
    cfg["paths"] = {"data_dir": str(data_dir), "out_dir": str(out_dir)}

    feat = cfgmod.feature_config(cfg)
    rates = cfgmod.stage_rates(cfg)
    tcfg = cfgmod.train_config(cfg)
    dataset = _load_training_set(Path(data_dir), rates[0], tcfg.segment_length)
    if not dataset:
        log.error("no usable training audio under %s", data_dir)
        return 1
    stages = build_stages(
        rates,
        cfgmod.net_config(cfg),
        cfgmod.train_betas(cfg),
        cfgmod.infer_betas(cfg),
        feat,
        tcfg.seed,
        dtype=cfgmod.train_dtype(cfg),
    )
    checkpoint = train_all(
        stages,
        dataset,
        tcfg,
        feat,
        out_dir=out_dir,
        resume=args.resume,
        config_snapshot=cfg,
        log=log.info,
    )
    write_loss_csv(checkpoint.loss_history, Path(out_dir) / "loss.csv")
    render_loss_figure(checkpoint.loss_history, Path(out_dir) / "loss.png")
    log.info("trained %d stages for %d steps", len(stages), checkpoint.step)
    return 0


def cmd_synth(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.config_snapshot is None:
        log.error("checkpoint %s has no config.snapshot", args.checkpoint)
        return 1
    cfg = checkpoint.config_snapshot
    feat = cfgmod.feature_config(cfg)
    rates = StageRates(tuple(cfg["rates"]))
    in_path = Path(args.input)
    if in_path.suffix == ".mel":
        mel = load_mel_file(in_path)
    else:
        buf = _rate_adjust(load_wav(in_path), feat.sample_rate)
        mel = log_mel(buf, feat)
    rng = np.random.default_rng(args.seed)
    started = time.perf_counter()
    out = synthesize(mel, checkpoint.stages, rates, rng, use_antialias=not args.no_antialias)
    wall = time.perf_counter() - started
    save_wav(out, args.output)
    cfgmod.dump_config(cfg, Path(args.output).with_suffix(".config.json"))
    print(f"wrote {args.output}: {out.duration:.2f} s, RTF {rtf(out.duration, wall):.3f}")
    return 0


def _format_table(averages: dict) -> str:
    rows = []
    for metric in ("pmae", "vde", "mr_stft", "mcd"):
        value = averages.get(metric)
        rows.append(f"  {metric:<8} {'n/a' if value is None else f'{value:.4f}'}")
    return "\n".join(rows)


def cmd_eval(args) -> int:
    report = evaluate_pair_dir(args.ref_dir, args.gen_dir)
    out_json = Path(args.out_json)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(report.to_json() + "\n")
    write_metrics_csv(report, out_json.with_suffix(".csv"))
    render_metrics_figure(report, out_json.with_suffix(".png"))
    print(f"averages over {len(report.files)} file(s):")
    print(_format_table(report.averages))
    if report.excluded:
        print(f"excluded {len(report.excluded)} (file, metric) pairs; see report")
    return 0


def cmd_resample(args) -> int:
    buf = load_wav(args.input)
    out = _rate_adjust(buf, args.rate)
    save_wav(out, args.output)
    print(f"wrote {args.output} at {args.rate} Hz ({len(out)} samples)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavestack",
        description="Multi-rate cascaded diffusion vocoder: features, training, "
        "synthesis, evaluation, resampling.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract mel feature files from a directory of WAVs")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("train", help="train all stages on a directory of WAVs")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--stages", type=int, default=None, help="train only the first N rates")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synth", help="synthesize a WAV from a .mel file or via copy-synthesis")
    p.add_argument("input", help=".mel feature file or .wav for copy-synthesis")
    p.add_argument("checkpoint", help="checkpoint directory written by train")
    p.add_argument("output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-antialias", action="store_true", help="skip the conditioning filter")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="objective metrics between matching WAV directories")
    p.add_argument("ref_dir")
    p.add_argument("gen_dir")
    p.add_argument("out_json")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("resample", help="integer-factor resampling of one WAV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--rate", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_resample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, NotADirectoryError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except (StateError, DivergenceError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
