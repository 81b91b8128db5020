"""Command-line entry point: ``mixskd <command> [--config F] [--override k=v ...] [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 a check or metric failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import TrainConfig, dump_text, load_config, to_json
from .data import Dataset, export_dataset, gen_synthetic, load_cifar_binary
from .diagnostics import run_gradcheck
from .errors import EvaluationError, FormatError, InvalidConfigError
from .evaluator import (DEFAULT_EPSILONS, DEFAULT_GRID, fgsm_attack, logprob_histogram, miss_rate_curve,
                        misclassified_mask, top1_accuracy, write_attack_report, write_csv,
                        write_histogram_report, write_json, write_missrate_report)
from .network import InferenceNet, build_from_config, load_network, prune_for_inference, save_network
from .trainer import fit

log = logging.getLogger("mixskd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override; repeatable")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (created if absent)")
    common.add_argument("--seed", type=int, help="overrides the config seed")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", type=Path, required=True)
    ckpt.add_argument("--split", choices=("train", "test"), default="test")

    p = argparse.ArgumentParser(prog="mixskd", description="Mixup self-distillation toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a network")
    sub.add_parser("eval", parents=[common, ckpt], help="top-1 accuracy of a checkpoint")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive and loss term")
    g.add_argument("--instances", type=int, default=20, help="random instances per primitive")
    a = sub.add_parser("attack", parents=[common, ckpt], help="FGSM accuracy over an epsilon grid")
    a.add_argument("--epsilons", type=_floats, default=list(DEFAULT_EPSILONS))
    m = sub.add_parser("missrate", parents=[common, ckpt], help="miss rate of Mixup images over a lambda grid")
    m.add_argument("--grid", type=_floats, default=list(DEFAULT_GRID))
    m.add_argument("--pairs", type=int, default=2000, help="cross-class pairs per grid point")
    h = sub.add_parser("hist", parents=[common, ckpt], help="log-probability histograms of misclassified samples")
    h.add_argument("--bins", type=int, default=20)
    h.add_argument("--compare", type=Path, help="second checkpoint; restrict to samples both models miss")
    e = sub.add_parser("export", parents=[common], help="write datasets or a pruned checkpoint as tensors")
    e.add_argument("what", choices=("dataset", "checkpoint"))
    e.add_argument("--checkpoint", type=Path, help="full checkpoint to prune (export checkpoint)")
    return p


def _effective_config(args) -> TrainConfig:
    if args.config is not None and not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    pairs = {}
    for item in args.override:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--override expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return load_config(args.config, pairs)


def _echo_config(cfg: TrainConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(f"# mixskd {command}\n" + dump_text(cfg), encoding="utf-8")
    (out / "effective_config.json").write_text(to_json(cfg) + "\n", encoding="utf-8")


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "cifar":
        if not d.path or not d.test_path:
            raise InvalidConfigError("data.source = cifar needs data.path and data.test_path")
        return load_cifar_binary(d.path, d.num_classes), load_cifar_binary(d.test_path, d.num_classes)
    train = gen_synthetic(d.num_classes, d.per_class, d.image_size, d.noise_sigma, d.seed, "train")
    test = gen_synthetic(d.num_classes, d.test_per_class, d.image_size, d.noise_sigma, d.seed + 1, "test")
    return train, test


def _load_pruned(path: Path, dataset: Dataset) -> InferenceNet:
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    net, _ = load_network(path)
    inf = net if isinstance(net, InferenceNet) else prune_for_inference(net)
    want = (inf.config.in_channels, *inf.config.input_size)
    if tuple(dataset.images.shape[1:]) != want or inf.config.num_classes != dataset.num_classes:
        raise FormatError(f"{path}: network expects images {want} and {inf.config.num_classes} classes; "
                          f"dataset has {tuple(dataset.images.shape[1:])} and {dataset.num_classes}")
    return inf


def _pick(cfg: TrainConfig, split: str) -> Dataset:
    train, test = load_datasets(cfg)
    return train if split == "train" else test


def cmd_train(cfg: TrainConfig, args) -> int:
    out = args.out
    train, test = load_datasets(cfg)
    net = build_from_config(cfg.network_config(), cfg.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = {"method": cfg.method(), "seed": cfg.seed}

    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def on_step(rec):
            fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")

        def on_epoch(epoch, net, metrics):
            fh.write(json.dumps({"kind": "epoch", **metrics}, sort_keys=True) + "\n")
            save_network(ckpt_dir / f"epoch_{epoch:03d}.mskd", net, {**meta, "epoch": epoch})

        result = fit(net, train, cfg, test, on_step, on_epoch)

    save_network(out / "final.mskd", net, meta)
    last = result.epochs[-1] if result.epochs else {}
    summary = {"method": cfg.method(), "seed": cfg.seed, "epochs": cfg.epochs, "steps": len(result.steps),
               "final": last, "parameters": {"full": net.num_parameters(),
                                             "inference": prune_for_inference(net).num_parameters()}}
    write_json(out / "summary.json", summary)
    print(f"{cfg.method()}: " + ", ".join(f"{k}={v:.4f}" for k, v in last.items() if k != "epoch"))
    return EXIT_OK


def cmd_eval(cfg: TrainConfig, args) -> int:
    data = _pick(cfg, args.split)
    net = _load_pruned(args.checkpoint, data)
    acc = top1_accuracy(net, data)
    write_json(args.out / "eval.json", {"checkpoint": str(args.checkpoint), "split": args.split,
                                        "samples": len(data), "top1": acc})
    print(f"top1 = {acc:.4f} on {len(data)} {args.split} samples")
    return EXIT_OK


def cmd_gradcheck(cfg: TrainConfig, args) -> int:
    results = run_gradcheck(args.instances, cfg.seed)
    rows, ok = [], True
    for section, reports in results.items():
        for name, rep in reports.items():
            rows.append([section, name, rep.max_rel_error, rep.max_abs_error, rep.n_checked, rep.passed])
            ok &= rep.passed
            print(f"{section:<10} {name:<16} {rep.max_rel_error:10.3e}  {'PASS' if rep.passed else 'FAIL'}")
    write_csv(args.out / "gradcheck.csv",
              ["section", "name", "max_rel_error", "max_abs_error", "checked", "passed"], rows)
    failed = [f"{r[0]}/{r[1]}" for r in rows if not r[5]]
    write_json(args.out / "gradcheck.json", {"passed": ok, "failed": failed})
    if not ok:
        print("gradcheck FAILED: " + ", ".join(failed), file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_attack(cfg: TrainConfig, args) -> int:
    data = _pick(cfg, args.split)
    rep = fgsm_attack(_load_pruned(args.checkpoint, data), data, args.epsilons)
    write_attack_report(args.out, rep)
    for eps, acc in zip(rep.epsilons, rep.accuracy):
        print(f"eps={eps:g}  acc={acc:.4f}")
    return EXIT_OK


def cmd_missrate(cfg: TrainConfig, args) -> int:
    data = _pick(cfg, args.split)
    curve = miss_rate_curve(_load_pruned(args.checkpoint, data), data, args.grid, args.pairs,
                            np.random.default_rng(cfg.seed))
    write_missrate_report(args.out, curve, args.pairs)
    for lam, mr in zip(curve.lambdas, curve.miss_rate):
        print(f"lambda={lam:g}  miss_rate={mr:.4f}")
    return EXIT_OK


def cmd_hist(cfg: TrainConfig, args) -> int:
    data = _pick(cfg, args.split)
    net = _load_pruned(args.checkpoint, data)
    mask = None
    if args.compare is not None:
        mask = misclassified_mask(net, data) & misclassified_mask(_load_pruned(args.compare, data), data)
    hist = logprob_histogram(net, data, args.bins, mask)
    write_histogram_report(args.out, hist)
    print(f"{hist.n_misclassified} misclassified samples" + (" (histograms empty)" if hist.empty else ""))
    return EXIT_OK


def cmd_export(cfg: TrainConfig, args) -> int:
    if args.what == "dataset":
        for ds in load_datasets(cfg):
            for p in export_dataset(ds, args.out):
                print(p)
        return EXIT_OK
    if args.checkpoint is None:
        raise UsageError("export checkpoint needs --checkpoint")
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    net, meta = load_network(args.checkpoint)
    inf = net if isinstance(net, InferenceNet) else prune_for_inference(net)
    dest = args.out / "inference.mskd"
    save_network(dest, inf, {k: v for k, v in meta.items() if k not in ("network", "pruned")})
    print(dest)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "attack": cmd_attack,
            "missrate": cmd_missrate, "hist": cmd_hist, "export": cmd_export}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = _effective_config(args)
        _echo_config(cfg, args.out, args.command)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, InvalidConfigError) as exc:
        print(f"mixskd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvaluationError, FormatError) as exc:
        print(f"mixskd: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
