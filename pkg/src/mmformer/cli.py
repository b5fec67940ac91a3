"""Command-line entry point: ``mmformer {synth,train,eval,ablate,gradcheck,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    VARIANT_LABELS,
    VARIANTS,
    ConfigError,
    RunConfig,
    config_hash,
    format_config,
    load_config,
    save_config,
)
from .data import DatasetSplit, VolumeFormatError, load_sample, make_dataset, save_sample
from .evaluation import (
    aggregate_by_missing_count,
    evaluate_subsets,
    format_ablation,
    format_missing_summary,
    format_report,
    parse_report_csv,
    run_ablation,
)
from .modality import ModalityMask

log = logging.getLogger("mmformer")

MANIFEST = "manifest.txt"
CHECKPOINT = "model.ckpt"
REPORT_SUFFIX = {"csv": "csv", "markdown": "md"}


class CliError(Exception):
    pass


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    model, train, data = cfg.model, cfg.train, cfg.data
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "extent", None) is not None:
        model = dataclasses.replace(model, extent=args.extent)
        data = dataclasses.replace(data, extent=args.extent)
    if getattr(args, "epochs", None) is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    if getattr(args, "variant", None):
        model = model.with_variant(args.variant)
    if model.extent != data.extent:
        raise ConfigError(f"model extent {model.extent} differs from data extent {data.extent}")
    return RunConfig(model, train, data)


def _log_run(name: str, cfg: RunConfig) -> None:
    log.info("%s: seed %d, variant %s, model config %s", name, cfg.train.seed, cfg.model.variant_name(), config_hash(cfg.model))
    log.info("%s: %s", name, "; ".join(format_config(cfg).splitlines()))


def _dataset(args, cfg: RunConfig) -> DatasetSplit:
    if getattr(args, "data", None):
        return _read_dataset(Path(args.data))
    return make_dataset(args.samples, cfg.train.seed, cfg.data)


def _write_dataset(out: Path, split: DatasetSplit) -> None:
    lines = []
    for part, samples in (("train", split.train), ("val", split.val)):
        for i, s in enumerate(samples):
            name = f"{part}{i:03d}"
            save_sample(out, name, s)
            lines.append(f"{part} {name} {s.seed}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_dataset(root: Path) -> DatasetSplit:
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise CliError(f"{manifest} not found (create it with `mmformer synth`)")
    train, val = [], []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        part, name, seed = line.split()
        s = load_sample(root, name)
        s.seed = int(seed)
        (train if part == "train" else val).append(s)
    return DatasetSplit(train, val)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _run_config(args)
    _log_run("synth", cfg)
    out = _out_dir(args)
    split = make_dataset(args.samples, cfg.train.seed, cfg.data)
    _write_dataset(out, split)
    save_config(cfg, out / "run.cfg")
    print(f"wrote {len(split.train)} train and {len(split.val)} val samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import train_loop

    cfg = _run_config(args)
    _log_run("train", cfg)
    out = _out_dir(args)
    split = _dataset(args, cfg)
    save_config(cfg, out / "run.cfg")
    result = train_loop(split.train, cfg.model, cfg.train, checkpoint_path=out / CHECKPOINT)
    (out / "history.csv").write_text(
        "epoch,loss\n" + "".join(f"{i + 1},{v:.6f}\n" for i, v in enumerate(result.history)), encoding="utf-8"
    )
    print(f"trained {result.epochs_done} epochs, final loss {result.history[-1]:.5f}; checkpoint {out / CHECKPOINT}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT
    if not ckpt_path.is_file():
        raise CliError(f"checkpoint {ckpt_path} not found")
    ckpt = load_checkpoint(ckpt_path)
    cfg = _run_config(args)
    cfg = RunConfig(ckpt.model_config, cfg.train, dataclasses.replace(cfg.data, extent=ckpt.model_config.extent))
    _log_run("eval", cfg)
    split = _dataset(args, cfg)
    masks = [ModalityMask.parse(args.mask)] if args.mask else None
    table = evaluate_subsets(ckpt.params, split.val or split.train, ckpt.model_config, masks)
    text = format_report(table, args.format)
    (out / f"report.{REPORT_SUFFIX[args.format]}").write_text(text, encoding="utf-8")
    if table.is_complete():
        summary = format_missing_summary(aggregate_by_missing_count(table))
        (out / "missing_count.md").write_text(summary, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    _log_run("ablate", cfg)
    out = _out_dir(args)
    split = _dataset(args, cfg)
    tables = run_ablation(split.train, split.val or split.train, cfg.model, cfg.train)
    for variant, label in VARIANT_LABELS.items():
        (out / f"report_{variant}.{REPORT_SUFFIX[args.format]}").write_text(format_report(tables[label], args.format), encoding="utf-8")
    text = format_ablation(tables)
    (out / "ablation.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import NETWORK_PROBES, network_loss_check, run_op_suite

    seed = args.seed or 0
    log.info("gradcheck: seed %d", seed)
    ok = True
    for name, (err, passed) in run_op_suite(tol=args.tol, seed=seed).items():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<26} rel err {err:.2e}")
    if not args.ops_only:
        for name in NETWORK_PROBES:
            err = network_loss_check(name, seed=seed)
            passed = err < args.network_tol
            ok &= passed
            print(f"{'PASS' if passed else 'FAIL'}  network:{name:<18} rel err {err:.2e}")
    print("all gradients agree" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_report(args) -> int:
    text = Path(args.input).read_text(encoding="utf-8")
    table = parse_report_csv(text)
    rendered = format_report(table, args.format)
    if table.is_complete():
        rendered += "\n" + format_missing_summary(aggregate_by_missing_count(table))
    if args.out:
        out = _out_dir(args)
        (out / f"report.{REPORT_SUFFIX[args.format]}").write_text(rendered, encoding="utf-8")
    print(rendered, end="")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmformer", description="Incomplete multimodal segmentation on synthetic phantoms.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, data=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="seed for data, initialization and training")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--extent", type=int, help="cubic volume extent")
        if data:
            p.add_argument("--data", help="directory written by `synth` (default: synthesize in memory)")
            p.add_argument("--samples", type=int, default=10, help="phantoms to synthesize when --data is absent")

    p = sub.add_parser("synth", help="write synthetic phantoms as volume files")
    common(p, data=False)
    p.add_argument("--samples", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write a checkpoint")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over modality subsets")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/model.ckpt)")
    p.add_argument("--mask", help="comma-separated available modalities, e.g. FLAIR,T2")
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the four ablation variants")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--network-tol", type=float, default=1e-2)
    p.add_argument("--ops-only", action="store_true", help="skip the whole-network checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="re-render a CSV report")
    p.add_argument("input", help="CSV report written by `eval --format csv`")
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.add_argument("--out", help="also write the rendered report here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, VolumeFormatError, FileNotFoundError, ValueError) as exc:
        print(f"mmformer {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
