"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch
from PIL import Image

from .checkpoint import CheckpointError, load_model
from .config import RunConfig
from .data import SyntheticDomainSpec, load_image, make_synthetic, to_uint8
from .errors import CDGANError, DatasetError, InvalidConfigError, JudgeUnusableError, NonFiniteError
from .evaluation import (
    generate_eval_set,
    classification_accuracy,
    loss_ablation_matrix,
    run_experiment_matrix,
    shared_layer_matrix,
    train_judge,
    translate,
)
from .trainer import train

log = logging.getLogger("cdgan")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="YAML run config")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--set", action="append", dest="assignments", default=argparse.SUPPRESS,
                   metavar="KEY=VALUE", help="override a config entry (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="cdgan", parents=[common],
                                     description="Multi-domain image translation with CD-GAN")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--per-domain", type=int, default=200)
    p.add_argument("--size", type=int, default=32)

    sub.add_parser("train", parents=[common], help="train from a run config")

    p = sub.add_parser("translate", parents=[common], help="translate images to a domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True, help="target domain name")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", parents=[common], help="run an experiment matrix")
    p.add_argument("--matrix", choices=["loss", "shared"], default=None)
    return parser


def _run_config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), seed=getattr(args, "seed", None),
                          out=getattr(args, "out", None),
                          assignments=getattr(args, "assignments", []))


def cmd_synth(args) -> int:
    if args.domains < 2:
        raise UsageError("need ≥ 2 domains")
    out = getattr(args, "out", None)
    if out is None:
        raise UsageError("synth requires --out")
    try:
        spec = SyntheticDomainSpec(args.domains, args.per_domain, args.size,
                                   getattr(args, "seed", 0))
    except InvalidConfigError as exc:
        raise UsageError(str(exc)) from exc
    count = make_synthetic(spec).export(out)
    for name in spec.domain_names():
        print(f"{name}: {spec.images_per_domain}")
    print(f"total={count}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    data = rc.dataset()
    mcfg = rc.model_config(data)
    try:
        state = train(rc.train, data, mcfg, out_dir=rc.output_dir)
    except NonFiniteError as exc:
        log.error("training aborted: %s", exc)
        return 1
    last = state.loss_history[-1][2].composite if state.loss_history else float("nan")
    print(f"final_iter={state.iteration} composite_eg={last}")
    return 0


def cmd_translate(args) -> int:
    try:
        model, meta = load_model(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        log.error("cannot load checkpoint: %s", exc)
        return 1
    domains = meta.get("domains") or [str(i) for i in range(model.config.n_domains)]
    if args.target not in domains:
        raise UsageError(f"unknown domain {args.target!r}; valid domains: {', '.join(domains)}")
    target = domains.index(args.target)
    out = Path(getattr(args, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    size = model.config.image_size
    for path in map(Path, args.inputs):
        try:
            with Image.open(path) as im:
                width, height = im.size
            x = torch.from_numpy(load_image(path, size, model.config.image_channels))[None]
        except OSError as exc:
            log.error("cannot read %s: %s", path, exc)
            return 1
        y = translate(model, x, target)[0].numpy()
        pixels = to_uint8(y).transpose(1, 2, 0)
        img = Image.fromarray(pixels[:, :, 0] if pixels.shape[2] == 1 else pixels)
        if img.size != (width, height):
            img = img.resize((width, height), Image.BILINEAR)
        dest = out / f"{path.stem}__to_{args.target}.png"
        img.save(dest)
        print(dest)
    return 0


def cmd_evaluate(args) -> int:
    rc = _run_config(args)
    data = rc.dataset()
    try:
        model, _ = load_model(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        log.error("cannot load checkpoint: %s", exc)
        return 1
    judge = train_judge(data, rc.judge)
    if not judge.usable:
        print(f"judge real-test accuracy {judge.real_accuracy:.4f} is below the floor "
              f"{judge.floor:.2f}", file=sys.stderr)
        return 1
    ev = rc.evaluation
    images, targets, _ = generate_eval_set(model, data, ev.get("per_domain_count"),
                                           int(ev.get("eval_seed", 0)))
    acc = classification_accuracy(judge, images, targets)
    result = {"accuracy": acc, "judge_real_accuracy": judge.real_accuracy,
              "n_images": len(images), "checkpoint": str(args.checkpoint)}
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    (rc.output_dir / "evaluation.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"accuracy={acc} judge_real_accuracy={judge.real_accuracy}")
    return 0


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    ab = rc.ablation
    kind = args.matrix or ab.get("matrix", "loss")
    seeds = [int(s) for s in ab.get("seeds", [0])]
    if kind == "loss":
        matrix = loss_ablation_matrix(seeds)
    elif kind == "shared":
        matrix = shared_layer_matrix(ab.get("shared_counts", [0, 1, 2, 3]), seeds)
    else:
        raise InvalidConfigError(f"ablation.matrix must be 'loss' or 'shared', got {kind!r}")
    names = ab.get("cells")
    if names:
        unknown = set(names) - {c.name for c in matrix.cells}
        if unknown:
            raise InvalidConfigError(f"unknown ablation cells: {', '.join(sorted(unknown))}")
        matrix.cells = [c for c in matrix.cells if c.name in names]
    data = rc.dataset()
    mcfg = rc.model_config(data)
    judge = train_judge(data, rc.judge)
    if not judge.usable:
        print(f"judge real-test accuracy {judge.real_accuracy:.4f} is below the floor "
              f"{judge.floor:.2f}", file=sys.stderr)
        return 1
    ev = rc.evaluation
    results = run_experiment_matrix(matrix, mcfg, rc.train, data, judge, rc.output_dir,
                                    ev.get("per_domain_count"), ev.get("eval_every"),
                                    int(ev.get("eval_seed", 0)))
    for r in results:
        print(f"{r.cell_name},{r.seed},{r.accuracy}")
    return 1 if any(r.error for r in results) else 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    level = os.environ.get("CDGAN_LOG_LEVEL", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidConfigError) as exc:
        print(f"cdgan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"cdgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except JudgeUnusableError as exc:
        print(f"cdgan {args.command}: {exc}", file=sys.stderr)
        return 1
    except (CDGANError, OSError) as exc:
        print(f"cdgan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
