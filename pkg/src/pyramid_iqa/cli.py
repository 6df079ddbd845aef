"""Command-line entry point: ``pyramid-iqa {synth,train,eval,predict,baseline}``.

Settings resolve as built-in defaults < ``--config`` JSON file < flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data, evaluation, optim
from .errors import CheckpointError, ImageError, ManifestError, ShapeError
from .model import ModelConfig, build_model, load_checkpoint, predict_image, save_checkpoint

log = logging.getLogger("pyramid_iqa")

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(optim.TrainConfig)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: optim.TrainConfig = field(default_factory=optim.TrainConfig)
    train_fraction: float = 0.8
    manifest: str | None = None
    checkpoint: str | None = None
    out_dir: str | None = None

    @classmethod
    def resolve(cls, file_values: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        values = dict(file_values or {})
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS - {
            "train_fraction", "manifest", "checkpoint", "out_dir"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        # one seed drives initialisation, patch sampling and the split
        model_kw = {k: values[k] for k in _MODEL_KEYS if k in values}
        train_kw = {k: values[k] for k in _TRAIN_KEYS if k in values}
        return cls(
            model=ModelConfig(**model_kw),
            train=optim.TrainConfig(**train_kw),
            train_fraction=float(values.get("train_fraction", 0.8)),
            manifest=values.get("manifest"),
            checkpoint=values.get("checkpoint"),
            out_dir=values.get("out_dir"),
        )


def _int_list(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()]


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc


def _artifact_paths(ckpt: Path) -> dict:
    stem = ckpt.with_suffix("")
    return {
        "loss_log": stem.with_name(stem.name + ".loss.csv"),
        "split": stem.with_name(stem.name + ".split.json"),
        "plot": stem.with_name(stem.name + ".loss.svg"),
    }


def plot_loss(loss_log, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [s for _, s, _ in loss_log]
    losses = [v for _, _, v in loss_log]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    manifest = data.synth_generate(args.out, args.refs, args.levels, np.random.default_rng(args.seed),
                                   size=args.size)
    path = Path(args.out) / "manifest.csv"
    log.info("wrote %d samples", len(manifest))
    print(path)
    return 0


def _train_overrides(args) -> dict:
    keys = ["variant", "seed", "learning_rate", "momentum", "weight_decay", "batch_size",
            "epochs", "patches_per_image", "patch_size", "fpn_channels", "elu_alpha",
            "train_fraction", "dtype"]
    out = {k: getattr(args, k) for k in keys}
    for k in ("conv_channels", "fc_sizes", "spp_bins"):
        v = getattr(args, k)
        out[k] = _int_list(v) if v else None
    return out


def cmd_train(args) -> int:
    overrides = _train_overrides(args)
    overrides["manifest"] = args.manifest
    overrides["checkpoint"] = args.out
    cfg = RunConfig.resolve(_load_json(args.config), overrides)
    if cfg.manifest is None or cfg.checkpoint is None:
        raise ValueError("train needs --manifest and --out (or both in the config file)")
    manifest = data.load_manifest(cfg.manifest)
    train_m, test_m = data.split_by_reference(manifest, cfg.train_fraction,
                                              np.random.default_rng(cfg.train.seed))
    log.info("split: %d train / %d test images", len(train_m), len(test_m))
    model = build_model(cfg.model)
    model, loss_log = optim.train(model, data.load_samples(train_m), cfg.train)

    ckpt = Path(cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    paths = _artifact_paths(ckpt)
    optim.write_loss_log(loss_log, paths["loss_log"])
    split = {
        "seed": cfg.train.seed,
        "train_fraction": cfg.train_fraction,
        "train_ref_ids": train_m.ref_ids,
        "test_ref_ids": test_m.ref_ids,
        "train_config": cfg.train.to_dict(),
    }
    paths["split"].write_text(json.dumps(split, indent=2) + "\n")
    if args.plot:
        plot_loss(loss_log, paths["plot"])
    print(ckpt)
    return 0


def _select(manifest, split_path, subset):
    if split_path is None or subset == "all":
        return manifest
    split = json.loads(Path(split_path).read_text())
    keep = set(split[f"{subset}_ref_ids"])
    return data.Manifest(s for s in manifest if s.ref_id in keep)


def cmd_eval(args) -> int:
    manifest = _select(data.load_manifest(args.manifest), args.split, args.subset)
    expected = None
    if args.config:
        expected = RunConfig.resolve(_load_json(args.config)).model
    model = load_checkpoint(args.checkpoint, expected_config=expected)
    report = evaluation.evaluate(model, manifest)
    report.save(args.out)
    print(f"SRCC={report.srcc!r} PLCC={report.plcc!r} n={len(report.pairs)}")
    return 0


def cmd_predict(args) -> int:
    for p in (args.dist, args.ref):
        if not Path(p).is_file():
            raise ImageError(f"no such image: {p}")
    model = load_checkpoint(args.checkpoint)
    d = data.read_image(args.dist)
    o = data.read_image(args.ref)
    score = predict_image(model, d, data.residual_map(d, o))
    print(repr(score))
    return 0


def cmd_baseline(args) -> int:
    manifest = data.load_manifest(args.manifest)
    report = evaluation.baseline_report(manifest, args.metric)
    report.save(args.out)
    print(f"{args.metric}: SRCC={report.srcc!r} PLCC={report.plcc!r} n={len(report.pairs)}")
    return 0


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyramid-iqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic distortion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--refs", type=_positive, default=20)
    p.add_argument("--levels", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive, default=256)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="split by reference and train a model")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--out", help="checkpoint path; loss log and split record go next to it")
    p.add_argument("--variant", choices=["full", "distorted_only", "residual_only", "direct_concat"])
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patches-per-image", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--conv-channels", help="comma-separated, e.g. 8,8,16,16,32")
    p.add_argument("--fc-sizes", help="comma-separated, e.g. 2048,1024,1")
    p.add_argument("--spp-bins", help="comma-separated, e.g. 1,2,4,8")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--fpn-channels", type=int)
    p.add_argument("--elu-alpha", type=float)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--plot", action="store_true", help="also write the loss curve as SVG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", help="split record written by train")
    p.add_argument("--subset", choices=["test", "train", "all"], default="test")
    p.add_argument("--config", help="refuse checkpoints whose architecture differs from this config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one distorted/reference pair")
    p.add_argument("--dist", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="PSNR or SSIM correlation report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metric", choices=sorted(evaluation.METRICS), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, ManifestError, ImageError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
