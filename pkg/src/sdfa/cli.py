"""Command-line entry point: ``sdfa <command> ...``.

Every failure ends with exit status 1 and a single ``error: <kind>: <message>``
line on stderr; malformed command lines exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .config import RunManifest, config_digest, load_config
from .errors import DataError, SdfaError
from .metrics import MetricsReport
from .model import (build_model, count_flops, count_params, load_checkpoint, predict_proba,
                    read_checkpoint_manifest, save_checkpoint)
from .skeleton_data import (NUM_JOINTS, SequenceMeta, SkeletonSequence, load_dataset, load_openpose_dir,
                            prepare_batch, save_dataset, select_primary_skeleton)
from .splits import PROTOCOLS, make_split, parse_split_options
from .synth import SynthSpec, generate_synthetic_dataset
from .training import evaluate, format_results, prepare_dataset, train, write_history

logger = logging.getLogger("sdfa")


class _Run:
    """Collects what a command read and wrote for its manifest."""

    def __init__(self, command: str, argv: Sequence[str]):
        self.manifest = RunManifest(command=command, argv=list(argv), config_digest="", seed=None)
        self._t0 = time.perf_counter()

    def finish(self, path: str | Path | None) -> None:
        self.manifest.wall_time_s = round(time.perf_counter() - self._t0, 3)
        if path:
            self.manifest.write(path)


# ---------------------------------------------------------------------------
# Commands


def _clip_dirs(root: Path) -> list[Path]:
    has_frames = any(p.name != "meta.json" for p in root.glob("*.json"))
    if has_frames:
        return [root]
    clips = sorted(p for p in root.iterdir() if p.is_dir())
    if not clips:
        raise DataError(f"{root}: no OpenPose frame files or clip directories")
    return clips


def cmd_preprocess(args, run: _Run) -> int:
    root = Path(args.in_dir)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    seqs = []
    for clip in _clip_dirs(root):
        meta_file = clip / "meta.json"
        if meta_file.exists():
            meta = SequenceMeta.from_dict(json.loads(meta_file.read_text()))
        elif args.label is not None:
            meta = SequenceMeta(is_fall=args.label == "fall", action_label=args.label)
        else:
            raise DataError(f"{clip}: no meta.json and no --label given")
        frames = select_primary_skeleton(load_openpose_dir(clip))
        seqs.append(SkeletonSequence(frames, meta, fps=args.fps))
    save_dataset(seqs, args.out_file)
    run.manifest.inputs["frames"] = str(root)
    run.manifest.outputs["dataset"] = str(args.out_file)
    print(f"sequences={len(seqs)}")
    return 0


def cmd_synth(args, run: _Run) -> int:
    spec = load_config(args.spec).synth if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    seqs = generate_synthetic_dataset(spec)
    save_dataset(seqs, args.out)
    run.manifest.seed = spec.seed
    run.manifest.config_digest = config_digest(spec.to_dict())
    if args.spec:
        run.manifest.inputs["spec"] = str(args.spec)
    run.manifest.outputs["dataset"] = str(args.out)
    print(f"sequences={len(seqs)} falls={sum(s.meta.is_fall for s in seqs)}")
    return 0


def cmd_train(args, run: _Run) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    seed = cfg.train.seed
    data = load_dataset(args.data)
    split = parse_split_options(args.split, args.split_opt, seed)
    train_idx, test_idx = make_split(data, split)
    model = build_model(cfg.model, seed=seed)
    _, history = train(model, data, (train_idx, test_idx), cfg.train)

    digest = cfg.digest()
    out = Path(args.out_checkpoint)
    save_checkpoint(model, out, extra={"config_digest": digest, "seed": seed, "split": split.describe()})
    history_path = Path(args.history) if args.history else out.with_name(out.name + ".history.tsv")
    write_history(history, history_path)

    run.manifest.seed = seed
    run.manifest.config_digest = digest
    run.manifest.inputs.update(data=str(args.data), **({"config": str(args.config)} if args.config else {}))
    run.manifest.outputs.update(checkpoint=str(out), history=str(history_path))
    last = history[-1]
    print(f"epochs={len(history)} train_loss={last.train_loss:.6f} train_acc={last.train_acc:.4f} "
          f"train_samples={len(train_idx)}")
    return 0


def _checkpoint_extra(path) -> dict:
    manifest, _ = read_checkpoint_manifest(path)
    return manifest.get("extra", {})


def cmd_eval(args, run: _Run) -> int:
    model = load_checkpoint(args.checkpoint)
    extra = _checkpoint_extra(args.checkpoint)
    seed = args.seed if args.seed is not None else int(extra.get("seed", 0))
    data = load_dataset(args.data)
    split = parse_split_options(args.split, args.split_opt, seed)
    _, test_idx = make_split(data, split)
    if test_idx.size == 0:
        raise DataError(f"split {split.describe()} leaves no test samples")
    report: MetricsReport = evaluate(model, prepare_dataset(data, model), test_idx, args.threshold)
    table = format_results([{
        "protocol": split.protocol, "fold": split.held_out_fall_type or "", "metrics": report,
        "config_digest": extra.get("config_digest", ""), "seed": seed,
    }])
    if args.report:
        Path(args.report).write_text(table)
        run.manifest.outputs["report"] = str(args.report)
    sys.stdout.write(table)
    if report.degenerate:
        logger.warning("degenerate metrics (empty denominators): %s", ", ".join(report.degenerate))
    run.manifest.seed = seed
    run.manifest.config_digest = extra.get("config_digest", "")
    run.manifest.inputs.update(checkpoint=str(args.checkpoint), data=str(args.data))
    return 0


def cmd_infer(args, run: _Run) -> int:
    model = load_checkpoint(args.checkpoint)
    seqs = load_dataset(args.sequence)
    X, _ = prepare_batch(seqs, model.config.target_length, channels=model.config.in_channels,
                         dtype=model.dtype)
    probs = predict_proba(model, X)[:, 1]
    if len(probs) == 1:
        print(f"fall_probability={float(probs[0])!r}")
    else:
        for i, p in enumerate(probs):
            print(f"sequence={i} fall_probability={float(p)!r}")
    run.manifest.inputs.update(checkpoint=str(args.checkpoint), sequence=str(args.sequence))
    return 0


def cmd_flops(args, run: _Run) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg.model, seed=0)
    if args.input_shape:
        try:
            shape = tuple(int(v) for v in args.input_shape.split(","))
        except ValueError:
            shape = ()
        if len(shape) != 3:
            raise DataError(f"--input-shape must be C,T,V, got {args.input_shape!r}")
    else:
        shape = (cfg.model.in_channels, cfg.model.target_length, NUM_JOINTS)
    params = count_params(model)
    macs = count_flops(model, shape)
    print(f"input_shape={','.join(map(str, shape))}")
    print(f"params={params}")
    print(f"params_m={params / 1e6:.4f}")
    print(f"macs={macs}")
    print(f"gmacs={macs / 1e9:.4f}")
    run.manifest.config_digest = config_digest(cfg.model.to_dict())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="write a JSON run manifest to this path")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="sdfa", description="Skeleton-based fall detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="OpenPose frame files -> canonical dataset")
    p.add_argument("in_dir", help="clip directory of per-frame JSON files, or a directory of clips")
    p.add_argument("out_file", help="output dataset (JSON lines)")
    p.add_argument("--label", choices=("fall", "adl"), help="label for clips without meta.json")
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic fall/ADL dataset")
    p.add_argument("--spec", help="config file whose [synth] section sets the generator")
    p.add_argument("--out", required=True, help="output dataset (JSON lines)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    def add_split(p):
        p.add_argument("--split", required=True, choices=PROTOCOLS)
        p.add_argument("--split-opt", action="append", default=[], metavar="KEY=VALUE",
                       help="protocol option, e.g. held_out=sideways or train_views=2,3")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", parents=[common], help="train a model on one split")
    p.add_argument("--data", required=True)
    add_split(p)
    p.add_argument("--config", help="key-value config file ([model], [train] sections)")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--history", help="per-epoch history file (default: <checkpoint>.history.tsv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test half of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    add_split(p)
    p.add_argument("--report", help="write the results table here")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="fall probability of one or more sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="canonical sequence or dataset file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("flops", parents=[common], help="parameter and multiply-accumulate counts")
    p.add_argument("--config")
    p.add_argument("--input-shape", help="C,T,V (default: in_channels,target_length,25)")
    p.set_defaults(func=cmd_flops)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    session = _Run(args.command, argv)
    try:
        code = args.func(args, session)
    except SdfaError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: data: {_one_line(exc)}", file=sys.stderr)
        return 1
    session.finish(args.manifest or (Path(args.out_checkpoint).with_name(
        Path(args.out_checkpoint).name + ".manifest.json") if args.command == "train" else None))
    return code


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
