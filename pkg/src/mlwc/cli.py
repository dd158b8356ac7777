"""``mlwc`` command line: synthesize data, train, train AttGen, evaluate, ablate, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, pack_model, save_checkpoint, unpack_model
from .config import ConfigError, RunConfig, load_config
from .data import DataError, NetpbmError, load_image_dir, save_image_dir, synth_generate
from .evaluation import ablate, ablation_tsv, branches_of, combine, evaluate
from .heads import LEVELS
from .model import MultiLevelNet
from .trainer import NumericError, TrainLog, freeze_weights, train_stage1, train_stage2
from .weightgen import AttGenParams, att_gen_train, episode_accuracy

log = logging.getLogger("mlwc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _shots(text: str) -> tuple[int, ...]:
    try:
        shots = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not shots or min(shots) < 1:
        raise argparse.ArgumentTypeError("shots must be positive integers")
    return shots


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mlwc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging (per-epoch rows)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic dataset pair to disk")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train", help="stage 1, freeze, stage 2")
    s.add_argument("--config", type=Path)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--stage1-only", action="store_true", help="stop after stage 1")
    s.add_argument("--no-wc", action="store_true", help="baseline without the weight-centric stage")
    s.add_argument("--log", type=Path, help="per-epoch TSV log")

    s = sub.add_parser("train-attgen", help="train the attention weight generator on a checkpoint")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--config", type=Path, help="override the checkpoint's weightgen settings")

    s = sub.add_parser("eval", help="few-shot evaluation over repeated trials")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--shots", type=_shots)
    s.add_argument("--trials", type=int)
    s.add_argument("--generator", choices=("avg", "att"))
    s.add_argument("--crops", type=int, choices=(1, 5))
    s.add_argument("--levels", default=",".join(LEVELS), help="comma-separated branches to combine")
    s.add_argument("--metrics", type=Path, required=True, help="TSV output")
    s.add_argument("--report", type=Path, help="JSON output (default: --metrics with .json suffix)")
    s.add_argument("--config", type=Path, help="override the checkpoint's eval settings")

    s = sub.add_parser("ablate", help="ablation table from a baseline and a weight-centric checkpoint")
    s.add_argument("--ckpt-dir", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--shots", type=_shots)
    s.add_argument("--trials", type=int)
    s.add_argument("--config", type=Path, help="override the checkpoints' eval settings")

    s = sub.add_parser("inspect-ckpt", help="list tensor names, shapes and metadata")
    s.add_argument("ckpt", type=Path)
    return p


def _log_config(config: RunConfig) -> None:
    log.info("resolved config (hash %s):\n%s", config.digest(), config.to_text().rstrip())


def _load_data(root: Path):
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    return load_image_dir(root)


def _load_model(path: Path):
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return unpack_model(load_checkpoint(path))


def _override(config: RunConfig, path: Path | None, section: str) -> RunConfig:
    if path is None:
        return config
    return dataclasses.replace(config, **{section: getattr(load_config(path), section)})


def cmd_synth_data(args) -> None:
    config = load_config(args.config)
    _log_config(config)
    pair = synth_generate(config.data)
    save_image_dir(pair, args.out)
    log.info("wrote %d base and %d novel classes to %s", pair.base_train.n_classes, pair.novel_train_pool.n_classes, args.out)


def train_model(config: RunConfig, pair, stage1_only: bool = False):
    """Train a network on ``pair.base_train``; returns (net, log)."""
    base = pair.base_train
    if config.backbone.in_channels != base.images.shape[1]:
        config = dataclasses.replace(config, backbone=dataclasses.replace(config.backbone, in_channels=base.images.shape[1]))
    rng = np.random.default_rng(config.trainer.seed)
    net = MultiLevelNet.init(config.backbone, config.heads, base.n_classes, rng, base.label_space)
    net, log_ = train_stage1(net, base, config.trainer, config.losses, val=pair.base_test, log_=TrainLog())
    if stage1_only:
        net.meta["stage"] = "1-only"
        return net, log_, config
    frozen = freeze_weights(net)
    net, log_ = train_stage2(net, frozen, base, config.trainer, config.losses, val=pair.base_test, log_=log_)
    return net, log_, config


def cmd_train(args) -> None:
    config = load_config(args.config)
    pair = _load_data(args.data)
    _log_config(config)
    net, log_, config = train_model(config, pair, stage1_only=args.stage1_only or args.no_wc)
    extra = {"weight_centric": "false" if (args.no_wc or args.stage1_only) else "true"}
    save_checkpoint(pack_model(net, config, extra=extra), args.out)
    if args.log:
        args.log.write_text(log_.to_tsv(), encoding="utf-8")
    last = log_.records[-1] if log_.records else None
    log.info("saved %s (stage %s, %d epochs)%s", args.out, net.meta["stage"], len(log_), f", train acc high {last.accuracy['high']:.3f}" if last else "")


def train_attgen(net: MultiLevelNet, pair, config: RunConfig) -> tuple[dict, dict]:
    """Per-scope AttGen parameters and (avg, att) fake-novel accuracy on base-test queries."""
    cfg = config.weightgen
    feats = net.embed(pair.base_train.images)
    test_feats = net.embed(pair.base_test.images)
    labels = pair.base_train.labels
    if cfg.scope == "combined":
        model = combine(branches_of(net))
        f = model.combine_features([feats[lv] for lv in LEVELS])
        q = model.combine_features([test_feats[lv] for lv in LEVELS])
        items = {"combined": (f, q, model.base_weights)}
    else:
        items = {lv: (feats[lv], test_feats[lv], net.classifier(lv)) for lv in LEVELS}
    out, scores = {}, {}
    for scope, (f, q, w) in items.items():
        params, _ = att_gen_train(f, labels, w, AttGenParams.init(w, cfg.scale), cfg)
        out[scope] = params
        avg = episode_accuracy(f, labels, w, None, cfg, cfg.seed, q, pair.base_test.labels)
        att = episode_accuracy(f, labels, w, params, cfg, cfg.seed, q, pair.base_test.labels)
        scores[scope] = (avg, att)
        log.info("attgen %s: fake-novel accuracy avg %.2f, att %.2f", scope, avg, att)
    return out, scores


def cmd_train_attgen(args) -> None:
    net, _, config = _load_model(args.ckpt)
    config = _override(config, args.config, "weightgen")
    pair = _load_data(args.data)
    _log_config(config)
    attgen, _ = train_attgen(net, pair, config)
    save_checkpoint(pack_model(net, config, attgen, extra={"attgen_scope": config.weightgen.scope}), args.out)


def _eval_config(config: RunConfig, args):
    ev = config.eval
    updates = {k: getattr(args, k) for k in ("shots", "trials", "generator", "crops") if getattr(args, k, None) is not None}
    return dataclasses.replace(ev, **updates)


def cmd_eval(args) -> None:
    net, attgen, config = _load_model(args.ckpt)
    config = _override(config, args.config, "eval")
    config = dataclasses.replace(config, eval=_eval_config(config, args))
    pair = _load_data(args.data)
    _log_config(config)
    levels = tuple(lv.strip() for lv in args.levels.split(",") if lv.strip())
    if not levels or any(lv not in LEVELS for lv in levels):
        raise UsageError(f"--levels must name branches from {LEVELS}")
    scope = config.weightgen.scope
    if config.eval.generator == "att" and not attgen:
        raise UsageError("--generator att needs a checkpoint from train-attgen")
    report = evaluate(combine(branches_of(net, levels)), pair, config.eval, attgen=attgen or None, attgen_scope=scope)
    args.metrics.write_text(report.to_tsv(), encoding="utf-8")
    (args.report or args.metrics.with_suffix(".json")).write_text(report.to_json(), encoding="utf-8")
    for metric, k, mean, ci, n, _ in report.rows():
        log.info("%s k=%d: %.2f +- %.2f (%d trials)", metric, k, mean, ci, n)


def _find_ablation_checkpoints(root: Path):
    if not root.is_dir():
        raise DataError(f"checkpoint directory {root} does not exist")
    baseline = mlwc = None
    for path in sorted(root.glob("*.ckpt")):
        ckpt = load_checkpoint(path)
        slot = "baseline" if ckpt.metadata.get("stage") == "1-only" else "mlwc" if ckpt.metadata.get("stage") == "2" else None
        if slot is None:
            continue
        if (baseline if slot == "baseline" else mlwc) is not None:
            raise DataError(f"more than one {slot} checkpoint in {root}")
        if slot == "baseline":
            baseline = (path, unpack_model(ckpt))
        else:
            mlwc = (path, unpack_model(ckpt))
    if baseline is None or mlwc is None:
        raise DataError(f"{root} needs one stage=1-only and one stage=2 checkpoint (*.ckpt)")
    return baseline, mlwc


def cmd_ablate(args) -> None:
    (bpath, (bnet, _, _)), (mpath, (mnet, _, config)) = _find_ablation_checkpoints(args.ckpt_dir)
    config = _override(config, args.config, "eval")
    config = dataclasses.replace(config, eval=_eval_config(config, args))
    pair = _load_data(args.data)
    _log_config(config)
    log.info("baseline %s, weight-centric %s", bpath.name, mpath.name)
    args.out.write_text(ablation_tsv(ablate(bnet, mnet, pair, config.eval)), encoding="utf-8")


def cmd_inspect(args) -> None:
    if not args.ckpt.is_file():
        raise DataError(f"checkpoint {args.ckpt} does not exist")
    ckpt = load_checkpoint(args.ckpt)
    width = max((len(n) for n in ckpt.tensors), default=0)
    for name in sorted(ckpt.tensors):
        print(f"{name:<{width}}  {'x'.join(map(str, ckpt.tensors[name].shape)) or 'scalar'}")
    for key in sorted(ckpt.metadata):
        value = ckpt.metadata[key]
        if key == "config":
            print("config:")
            print("".join(f"  {line}\n" for line in value.splitlines()), end="")
        else:
            print(f"{key}: {value}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "train-attgen": cmd_train_attgen,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-ckpt": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mlwc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"mlwc {args.command}: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mlwc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, NetpbmError, CheckpointError, OSError) as exc:
        print(f"mlwc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
