"""Command-line interface: ``train``, ``infer``, ``eval`` and ``bias-report``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import torch
import yaml

from . import __version__
from .backbone import DEFAULT_TEMPLATES, ToyEncoder, ToyEncoderSpec
from .core import ClassVocabulary, ImageRecord, RunConfig, VocabularyMismatch
from .io import (
    DatasetError,
    DatasetLayout,
    list_images,
    load_mask_pairs,
    read_classes,
    read_image,
    write_mask,
)
from .metrics import evaluate_labels, write_curve_table, write_report
from .model import infer
from .synthetic import dual_bias_spec, make_dataset
from .train import CheckpointError, TrainState, fit, format_loss_line, load_checkpoint

log = logging.getLogger("reclip")

OUTPUT_ROOT_ENV = "RECLIP_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "reclip-runs"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config loading


class _Doc:
    """Plain data from a YAML file plus the line of every mapping key."""

    def __init__(self, path: Path):
        self.path = path
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark else str(path)
            raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from exc
        self.lines = {}
        self.data = self._convert(node, ()) if node is not None else {}
        if not isinstance(self.data, dict):
            raise ConfigError(f"{path}:1: top level must be a mapping")

    def _convert(self, node, keypath):
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = k.value
                if key in out:
                    raise ConfigError(f"{self.path}:{k.start_mark.line + 1}: duplicate key {key!r}")
                self.lines[keypath + (key,)] = k.start_mark.line + 1
                out[key] = self._convert(v, keypath + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._convert(v, keypath) for v in node.value]
        return yaml.SafeLoader(" ").construct_object(node, deep=True)

    def line(self, *keypath) -> int:
        while keypath and keypath not in self.lines:
            keypath = keypath[:-1]
        return self.lines.get(keypath, 1)

    def error(self, keypath, msg) -> ConfigError:
        return ConfigError(f"{self.path}:{self.line(*keypath)}: {msg}")


TOP_KEYS = {"seed", "output_dir", "encoder", "dataset", "train", "templates"}
DATASET_KEYS = {"root", "classes", "split", "synthetic"}
SYNTHETIC_KEYS = {"n", "size", "seed", "class_names"}
CLIP_KEYS = {"checkpoint", "global_input_size"}


def _check_keys(doc: _Doc, section: dict, allowed, keypath) -> None:
    if not isinstance(section, dict):
        raise doc.error(keypath, f"{'.'.join(keypath) or 'config'} must be a mapping")
    for k in section:
        if k not in allowed:
            raise doc.error(
                keypath + (k,),
                f"unknown key {k!r} in {'.'.join(keypath) or 'top level'} "
                f"(allowed: {', '.join(sorted(allowed))})",
            )


def _typed(doc: _Doc, keypath, value, annotation: str):
    """Check a scalar against a dataclass field annotation."""
    optional = annotation.startswith("Optional[")
    base = annotation[9:-1] if optional else annotation
    if value is None:
        if optional:
            return None
        raise doc.error(keypath, f"{keypath[-1]} must not be empty")
    if base == "bool":
        ok = isinstance(value, bool)
    elif base == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif base == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif base == "str":
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise doc.error(keypath, f"{keypath[-1]} must be {base}, got {value!r}")
    return value


def _run_config(doc: _Doc, section: dict) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    _check_keys(doc, section, fields, ("train",))
    values = {k: _typed(doc, ("train", k), v, str(fields[k].type)) for k, v in section.items()}
    try:
        return RunConfig(**values)
    except ValueError as exc:
        field = str(exc).split()[0]
        raise doc.error(("train", field), str(exc)) from exc


def _toy_spec(doc: _Doc, section, class_names) -> ToyEncoderSpec:
    keypath = ("encoder", "toy")
    if section is None:
        section = {}
    allowed = {f.name for f in dataclasses.fields(ToyEncoderSpec)} | {"preset"}
    _check_keys(doc, section, allowed, keypath)
    section = dict(section)
    preset = section.pop("preset", None)
    if preset is not None:
        if preset != "dual-bias":
            raise doc.error(keypath + ("preset",), f"unknown toy preset {preset!r} (known: dual-bias)")
        base = dual_bias_spec(seed=section.get("seed", 0)).to_dict()
        if class_names is not None and tuple(class_names) != tuple(base["class_names"]):
            raise doc.error(keypath + ("preset",),
                            f"preset dual-bias needs classes {base['class_names']}")
    else:
        base = {"class_names": list(class_names) if class_names is not None else None}
    base.update(section)
    if base.get("class_names") is None:
        raise doc.error(keypath, "toy encoder needs class_names (or a dataset classes file)")
    try:
        return ToyEncoderSpec.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise doc.error(keypath, f"invalid toy encoder: {exc}") from exc


@dataclasses.dataclass
class TrainPlan:
    config: RunConfig
    encoder: object
    vocab: ClassVocabulary
    dataset: list
    output_dir: Path
    templates: tuple
    resolved: dict


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def load_train_plan(path, seed: Optional[int] = None) -> TrainPlan:
    path = Path(path)
    doc = _Doc(path)
    data = doc.data
    _check_keys(doc, data, TOP_KEYS, ())
    base = path.parent

    cfg = _run_config(doc, data.get("train") or {})
    top_seed = data.get("seed")
    if top_seed is not None:
        cfg = cfg.replace(seed=_typed(doc, ("seed",), top_seed, "int"))
    if seed is not None:
        cfg = cfg.replace(seed=seed)

    # dataset
    ds = data.get("dataset")
    if ds is None:
        raise doc.error((), "missing required section 'dataset'")
    _check_keys(doc, ds, DATASET_KEYS, ("dataset",))
    class_names = None
    records = None
    if "synthetic" in ds:
        syn = ds["synthetic"] or {}
        _check_keys(doc, syn, SYNTHETIC_KEYS, ("dataset", "synthetic"))
        class_names = syn.get("class_names")
    else:
        if "root" not in ds:
            raise doc.error(("dataset",), "dataset needs 'root' or 'synthetic'")
        root = (base / str(ds["root"])).resolve()
        if not root.is_dir():
            raise doc.error(("dataset", "root"), f"dataset root not found: {root}")
        layout = DatasetLayout(root, str(ds.get("classes", "classes.txt")))
        try:
            class_names = layout.vocabulary.names
        except (DatasetError, ValueError) as exc:
            raise doc.error(("dataset", "classes"), str(exc)) from exc

    # encoder
    enc_sec = data.get("encoder")
    if not isinstance(enc_sec, dict) or len(enc_sec) != 1:
        raise doc.error(("encoder",), "encoder must have exactly one of: toy, clip")
    kind, body = next(iter(enc_sec.items()))
    if kind == "toy":
        spec = _toy_spec(doc, body, class_names)
        encoder = ToyEncoder(spec)
        class_names = class_names or spec.class_names
        enc_resolved = {"toy": spec.to_dict()}
    elif kind == "clip":
        _check_keys(doc, body, CLIP_KEYS, ("encoder", "clip"))
        ckpt = body.get("checkpoint")
        if ckpt is None:
            raise doc.error(("encoder", "clip"), "clip encoder needs 'checkpoint'")
        try:
            from .clip_adapter import ClipEncoder
        except ImportError as exc:
            raise doc.error(("encoder", "clip"), f"clip encoder unavailable: {exc}") from exc
        try:
            encoder = ClipEncoder.from_pretrained(
                str((base / str(ckpt)).resolve()), body.get("global_input_size", 224))
        except OSError as exc:
            raise doc.error(("encoder", "clip", "checkpoint"), f"cannot load checkpoint: {exc}") from exc
        enc_resolved = {"clip": dict(body)}
    else:
        raise doc.error(("encoder", kind), f"unknown encoder kind {kind!r} (known: toy, clip)")
    if class_names is None:
        raise doc.error(("dataset",), "cannot determine class names")
    vocab = ClassVocabulary(class_names)

    if "synthetic" in ds:
        syn = ds["synthetic"] or {}
        palette = getattr(encoder, "spec", None)
        if palette is None:
            raise doc.error(("dataset", "synthetic"), "synthetic data needs the toy encoder")
        records = make_dataset(int(syn.get("n", 200)), palette.palette,
                               seed=int(syn.get("seed", cfg.seed)), prefix="train",
                               size=int(syn.get("size", 128)))
    else:
        split = str(ds.get("split", "train"))
        try:
            records = layout.load(split, with_masks=False)
        except DatasetError as exc:
            raise doc.error(("dataset", "split"), str(exc)) from exc
        if not records:
            raise doc.error(("dataset", "split"), f"split {split!r} is empty")

    templates = tuple(data.get("templates") or DEFAULT_TEMPLATES)
    out = data.get("output_dir")
    output_dir = (base / str(out)) if out is not None else default_output_root() / path.stem

    resolved = {
        "seed": cfg.seed,
        "output_dir": str(output_dir),
        "encoder": enc_resolved,
        "dataset": {k: v for k, v in ds.items()},
        "train": cfg.to_dict(),
        "templates": list(templates),
        "classes": list(vocab.names),
        "version": __version__,
    }
    if "root" in ds:
        resolved["dataset"]["root"] = str(layout.root)
    return TrainPlan(cfg, encoder, vocab, records, output_dir, templates, resolved)


def write_snapshot(path: Path, resolved: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(resolved, sort_keys=False))


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    plan = load_train_plan(args.config, args.seed)
    out = plan.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / "config.resolved.yaml", plan.resolved)
    state = TrainState.create(plan.vocab, plan.encoder, plan.config, plan.templates)
    log_path = out / "loss.log"
    with open(log_path, "w") as fh:
        def on_step(it, lr, loss):
            fh.write(format_loss_line(it, lr, loss) + "\n")

        fit(plan.dataset, state, out / "checkpoint.pt", on_step)
    log.info("wrote %s and %s", out / "checkpoint.pt", log_path)
    return EXIT_OK


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    model = state.model
    if args.classes is not None:
        model.vocab.check(read_classes(args.classes))
    images = list_images(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / "infer.resolved.yaml", {
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "images": str(Path(args.images).resolve()),
        "classes": list(model.vocab.names),
        "upsample": args.upsample or model.config.upsample,
        "version": __version__,
    })
    if not images:
        log.warning("no images found in %s; nothing written", args.images)
        return EXIT_OK
    for p in images:
        rec = ImageRecord(p.stem, read_image(p))
        write_mask(out / f"{p.stem}.png", infer(rec, model, upsample=args.upsample))
    log.info("wrote %d masks to %s", len(images), out)
    return EXIT_OK


def _evaluate_dirs(args, with_curve: bool):
    vocab = read_classes(args.classes)
    preds, gts = load_mask_pairs(args.pred, args.gt, vocab.C)
    return vocab, evaluate_labels(preds, gts, vocab.C, args.bins, args.min_pixels, with_curve)


def _report_snapshot(args, out: Path, command: str) -> None:
    write_snapshot(out.with_name(out.name + ".resolved.yaml"), {
        "command": command,
        "pred": str(Path(args.pred).resolve()),
        "gt": str(Path(args.gt).resolve()),
        "classes": str(Path(args.classes).resolve()),
        "bins": args.bins,
        "min_pixels": args.min_pixels,
        "version": __version__,
    })


def cmd_eval(args) -> int:
    vocab, res = _evaluate_dirs(args, with_curve=False)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"miou": res.miou}
    report.update({f"iou.{n}": v for n, v in zip(vocab.names, res.iou)})
    write_report(out, report)
    _report_snapshot(args, out, "eval")
    log.info("mIoU %.4f", res.miou)
    return EXIT_OK


def cmd_bias_report(args) -> int:
    vocab, res = _evaluate_dirs(args, with_curve=True)
    if res.space_preference is None:
        n = int(res.curve.supported.sum())
        raise DatasetError(
            f"space preference needs objects in at least 2 distance bins; found {n} "
            f"supported bin(s) out of {args.bins}"
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, {
        "class_preference": res.class_preference,
        "space_preference": res.space_preference,
        "miou": res.miou,
    })
    curve_path = out.with_suffix(".curve.tsv")
    write_curve_table(curve_path, res.curve)
    _report_snapshot(args, out, "bias-report")
    log.info("class preference %.4f, space preference %.4f", res.class_preference,
             res.space_preference)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reclip", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on unlabelled images")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write index masks for a directory of images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--images", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--classes", default=None, help="check the checkpoint vocabulary against this file")
    i.add_argument("--upsample", choices=["nearest", "bilinear-logits"], default=None)
    i.set_defaults(func=cmd_infer)

    for name, func, help_ in (("eval", cmd_eval, "mIoU of predicted masks"),
                              ("bias-report", cmd_bias_report, "class and space preference")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--pred", required=True)
        e.add_argument("--gt", required=True)
        e.add_argument("--classes", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--bins", type=int, default=10)
        e.add_argument("--min-pixels", type=int, default=16)
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (ValueError, VocabularyMismatch, CheckpointError, FileNotFoundError) as exc:
        # ConfigError, DatasetError and shape errors are all ValueErrors
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported and mapped to the failure exit code
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
