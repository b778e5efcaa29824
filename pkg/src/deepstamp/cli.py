"""Command-line entry point: ``deepstamp <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numerical abort.  Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import evalharness, nets, robustness, stamping, surrogate
from .dataio import (
    ImageBatch,
    default_watermark,
    load_checkpoint,
    load_cifar_batch,
    load_cifar_dir,
    load_watermark,
    save_checkpoint,
    save_cifar_batch,
)
from .errors import DeepStampError, FormatError, InsufficientSamples, NumericalAbort, SpecError
from .training import ClassifierConfig, StamperConfig, StamperState, train_classifier, train_stamper

log = logging.getLogger("deepstamp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# --------------------------------------------------------------------------
# config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    source: Literal["cifar", "surrogate"] = "cifar"
    # a raw CIFAR-10 directory, or one written by `prepare` (train.bin + val.bin)
    dir: str | None = None
    subset: int = Field(5000, ge=1, le=50000)
    val_size: int = Field(10000, ge=1, le=10000)
    seed: int | None = None


class WatermarkSection(_Strict):
    path: str | None = None


class StampSection(_Strict):
    beta: float = Field(0.5, ge=0, le=1)
    opacity_span: tuple[float, float] = stamping.DEFAULT_OPACITY_SPAN
    displacement_range: tuple[int, int] = stamping.DEFAULT_DISPLACEMENT
    seed: int | None = None


class NetsSection(_Strict):
    classifier: str = "F-small"
    discriminator: Literal["D", "D-literal"] = "D"
    n_discriminators: int = Field(1, ge=1)


class TrainSection(_Strict):
    classifier: ClassifierConfig = ClassifierConfig()
    stamper: StamperConfig = StamperConfig()


class PlanSection(_Strict):
    schemes: list[str] = list(evalharness.PLAN_SCHEMES)
    betas: list[float] = [0.5, 1.0]
    extra_archs: list[evalharness.ExtraArch] = []
    mix_ratio: float = Field(1.0, ge=0, le=1)
    out_dir: str = "runs/desk"


class Config(_Strict):
    seed: int = 0
    data: DataSection = DataSection()
    watermark: WatermarkSection = WatermarkSection()
    stamp: StampSection = StampSection()
    nets: NetsSection = NetsSection()
    train: TrainSection = TrainSection()
    plan: PlanSection = PlanSection()

    def resolved(self) -> "Config":
        """Copy with architecture choices pushed into the training configs and every seed explicit."""
        if "arch" in self.train.classifier.model_fields_set:
            raise SpecError("set the classifier architecture in nets.classifier, not train.classifier.arch")
        if {"d_arch", "n_discriminators"} & self.train.stamper.model_fields_set:
            raise SpecError("set the discriminator in nets.discriminator / nets.n_discriminators")
        if self.nets.classifier in nets.UNBUILDABLE:
            raise SpecError(f"{self.nets.classifier}: {nets.UNBUILDABLE[self.nets.classifier]}")
        if not nets.is_classifier(self.nets.classifier):
            raise SpecError(f"{self.nets.classifier} is not a classifier architecture")

        def seed(value, phase):
            return evalharness.phase_seed(self.seed, phase) if value is None else value

        cls_cfg = self.train.classifier.model_copy(
            update={"arch": self.nets.classifier, "seed": seed(self.train.classifier.seed, "pretrain")}
        )
        st_cfg = self.train.stamper.model_copy(
            update={
                "d_arch": self.nets.discriminator,
                "n_discriminators": self.nets.n_discriminators,
                "seed": seed(self.train.stamper.seed, "stamper"),
            }
        )
        return self.model_copy(
            update={
                "data": self.data.model_copy(update={"seed": seed(self.data.seed, "data")}),
                "stamp": self.stamp.model_copy(update={"seed": seed(self.stamp.seed, "stamp")}),
                "train": TrainSection(classifier=cls_cfg, stamper=st_cfg),
            }
        )

    def to_plan(self, out_dir: str | None = None) -> evalharness.ExperimentPlan:
        return evalharness.ExperimentPlan(
            data=evalharness.DataSpec(
                source=self.data.source, data_dir=self.data.dir, subset=self.data.subset, val_size=self.data.val_size
            ),
            classifier=self.train.classifier.model_copy(update={"arch": self.nets.classifier, "seed": None}),
            extra_archs=self.plan.extra_archs,
            schemes=self.plan.schemes,
            betas=self.plan.betas,
            stamper=self.train.stamper.model_copy(
                update={"d_arch": self.nets.discriminator, "n_discriminators": self.nets.n_discriminators, "seed": None}
            ),
            opacity_span=self.stamp.opacity_span,
            displacement_range=self.stamp.displacement_range,
            mix_ratio=self.plan.mix_ratio,
            watermark=self.watermark.path,
            seed=self.seed,
            out_dir=out_dir or self.plan.out_dir,
        )


def _no_duplicate_keys(pairs):
    keys = [k for k, _ in pairs]
    dupes = sorted({k for k in keys if keys.count(k) > 1})
    if dupes:
        raise SpecError(f"duplicate config keys {dupes}")
    return dict(pairs)


def load_config(path: str | None) -> Config:
    if path is None:
        return Config().resolved()
    try:
        raw = json.loads(Path(path).read_text(), object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from exc
    return Config.model_validate(raw).resolved()


def write_config(cfg: Config, out_dir: Path, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"config": cfg.model_dump(mode="json"), **extra}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# data helpers


def load_splits(data: DataSection) -> tuple[ImageBatch, ImageBatch]:
    """(train, val) from a prepared directory, a raw CIFAR-10 directory or the surrogate generator."""
    if data.source == "surrogate" and data.dir is None:
        return surrogate.make_images(data.subset, data.seed), surrogate.make_images(data.val_size, data.seed + 1)
    if data.dir is None:
        raise SpecError("data.dir is required for data.source='cifar'")
    d = Path(data.dir)
    if (d / "train.bin").exists() and (d / "val.bin").exists():
        train, val = load_cifar_batch(d / "train.bin"), load_cifar_batch(d / "val.bin")
    else:
        train, val = load_cifar_dir(d)
    if len(train) > data.subset:
        pick = np.sort(np.random.default_rng(data.seed).choice(len(train), data.subset, replace=False))
        train = train.subset(pick)
    val = val.subset(slice(0, data.val_size))
    evalharness.assert_disjoint(train, val)
    return train, val


def load_images(path) -> dict[str, ImageBatch]:
    """A CIFAR .bin file, or every .bin file in a directory, keyed by file stem."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.bin"))
        if not files:
            raise FileNotFoundError(f"no .bin files under {p}")
        return {f.stem: load_cifar_batch(f) for f in files}
    return {p.stem: load_cifar_batch(p)}


def the_watermark(cfg: Config):
    return default_watermark() if cfg.watermark.path is None else load_watermark(cfg.watermark.path)


def load_stamper_dir(path, n_discriminators: int) -> StamperState:
    d = Path(path)
    ds = [load_checkpoint(d / f"D{j}.dsck") for j in range(n_discriminators)]
    return StamperState(load_checkpoint(d / "W.dsck"), load_checkpoint(d / "V.dsck"), ds)


def _emit(obj, out: Path | None = None, name: str = "result.json") -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def _dataset_summary(batch: ImageBatch, path: Path) -> dict:
    return {
        "file": path.name,
        "records": len(batch),
        "label_counts": np.bincount(batch.labels, minlength=10).tolist(),
        "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
    }


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        train = surrogate.make_images(args.subset or 50000, args.seed)
        val = surrogate.make_images(10000, args.seed + 1)
        source = "surrogate"
    else:
        if args.data_dir is None:
            raise SpecError("prepare needs --data-dir (or --synthetic)")
        train, val = load_cifar_dir(args.data_dir)
        if args.subset is not None and args.subset < len(train):
            pick = np.sort(np.random.default_rng(args.seed).choice(len(train), args.subset, replace=False))
            train = train.subset(pick)
        source = str(args.data_dir)
    evalharness.assert_disjoint(train, val)
    save_cifar_batch(train, out / "train.bin")
    save_cifar_batch(val, out / "val.bin")
    manifest = {
        "source": source,
        "seed": args.seed,
        "train": _dataset_summary(train, out / "train.bin"),
        "val": _dataset_summary(val, out / "val.bin"),
    }
    _emit(manifest, out, "dataset.json")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_config(cfg, out)
    train, val = load_splits(cfg.data)
    params, rows = train_classifier(train, cfg.train.classifier, val=val)
    save_checkpoint(params, out / "classifier.dsck")
    _emit({"epochs": rows}, out, "report.json")
    return EXIT_OK


def cmd_train_stamper(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    stamper_cfg = cfg.train.stamper.model_copy(update={"beta": cfg.stamp.beta})
    write_config(cfg, out, classifier=str(args.classifier))
    params_f = load_checkpoint(args.classifier)
    train, _ = load_splits(cfg.data)
    state, rows = train_stamper(params_f, train, the_watermark(cfg), stamper_cfg)
    for name, params in state.all().items():
        save_checkpoint(params, out / f"{name}.dsck")
    (out / "report.json").write_text(json.dumps({"steps": rows}, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"final": rows[-1] if rows else None, "out": str(out)}))
    return EXIT_OK


def cmd_stamp(args) -> int:
    cfg = load_config(args.config)
    beta = cfg.stamp.beta if args.beta is None else args.beta
    out = Path(args.out)
    write_config(cfg, out, scheme=args.scheme, beta=beta)
    if args.input is not None:
        inputs = load_images(args.input)
    else:
        train, val = load_splits(cfg.data)
        inputs = {"train": train, "val": val}
    w = the_watermark(cfg)
    state = None
    if args.scheme == "learned":
        if args.stamper is None:
            raise SpecError("--scheme learned needs --stamper DIR")
        state = load_stamper_dir(args.stamper, cfg.nets.n_discriminators)
    lo, hi = cfg.stamp.opacity_span
    spec = stamping.StampSpec(
        blend_factor=beta,
        scheme=args.scheme,
        opacity_range=(lo * beta, hi * beta),
        displacement_range=cfg.stamp.displacement_range,
        rng_seed=cfg.stamp.seed,
    )
    start, written = 0, []
    for name, x in inputs.items():
        if state is not None:
            stamped, draws = stamping.stamp_learned(x, nets.synthesize(state.w, x.data, w), beta), {}
        else:
            stamped, draws = stamping.apply_scheme(x, w, spec, start)
        sidecar = {"scheme": args.scheme, "beta": beta, "spec": spec.to_json(), "first_index": start, **draws}
        stamping.save_stamped(stamped, out / f"{name}.bin", sidecar)
        written.append(str(out / f"{name}.bin"))
        start += len(x)
    print(json.dumps({"written": written}))
    return EXIT_OK


def cmd_train_on_stamped(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_config(cfg, out, data=str(args.data))
    stamped = load_images(args.data)
    train = stamped.get("train") or next(iter(stamped.values()))
    _, val = load_splits(cfg.data)
    val_stamped = stamped.get("val")
    if val_stamped is not None and len(val_stamped) != len(val):
        val_stamped = None
    params, rows = train_classifier(train, cfg.train.classifier, val=val, val_stamped=val_stamped)
    save_checkpoint(params, out / "classifier.dsck")
    _emit({"epochs": rows}, out, "report.json")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params = load_checkpoint(args.classifier)
    acc_clean, acc_stamped = evalharness.evaluate(params, load_cifar_batch(args.clean), load_cifar_batch(args.stamped))
    _emit({"acc_clean": acc_clean, "acc_stamped": acc_stamped}, Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_probe(args) -> int:
    stamped = ImageBatch.concat(load_images(args.stamped).values())
    clean = ImageBatch.concat(load_images(args.clean).values()) if args.clean else None
    n = min(args.samples, len(stamped))
    stamped = stamped.subset(slice(0, n))
    clean = clean.subset(slice(0, n)) if clean is not None else None
    estimate, residual = robustness.mean_estimate_attack(stamped, clean, args.beta)
    result = {"samples": n, "beta": args.beta, "attack_residual": residual, "notes": robustness.ATTACK_NOTES}
    if args.stamper is not None:
        cfg = load_config(args.config)
        if clean is None:
            raise SpecError("--stamper needs --clean to synthesise watermarks")
        planes = nets.synthesize(load_stamper_dir(args.stamper, cfg.nets.n_discriminators).w, clean.data, the_watermark(cfg))
        result["randomness"] = robustness.randomness(planes).to_json()
    _emit(result, Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_run_plan(args) -> int:
    cfg = load_config(args.plan)
    plan = cfg.to_plan(args.out)
    out = Path(plan.out_dir)
    write_config(cfg, out)
    table = evalharness.run_plan(plan)
    print((out / "reports" / "table.md").read_text())
    print(json.dumps({"cells": len(table), "out": str(out)}))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", message)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepstamp", description="Learned visible watermarking: train, stamp, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="validate CIFAR-10 binaries and write train/val splits")
    s.add_argument("--data-dir", help="directory with data_batch_*.bin and test_batch.bin")
    s.add_argument("--synthetic", action="store_true", help="generate the procedural stand-in dataset instead")
    s.add_argument("--subset", type=int, help="keep this many training images (seeded choice)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train-classifier", help="pretrain the classifier F")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("train-stamper", help="train W, V and the discriminators against a frozen F")
    s.add_argument("--config")
    s.add_argument("--classifier", required=True, help="checkpoint of F")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_stamper)

    s = sub.add_parser("stamp", help="write a stamped dataset plus JSON sidecars")
    s.add_argument("--config")
    s.add_argument("--scheme", required=True, choices=stamping.SCHEMES)
    s.add_argument("--stamper", help="directory written by train-stamper (learned scheme)")
    s.add_argument("--beta", type=float, help="override stamp.beta")
    s.add_argument("--input", help="CIFAR .bin file or directory; default: the configured splits")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stamp)

    s = sub.add_parser("train-on-stamped", help="train F' on a stamped dataset")
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="stamped .bin file or directory from `stamp`")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_on_stamped)

    s = sub.add_parser("evaluate", help="clean and stamped top-1 accuracy of a classifier")
    s.add_argument("--classifier", required=True)
    s.add_argument("--clean", required=True)
    s.add_argument("--stamped", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("probe", help="mean-estimation removal probe and watermark randomness")
    s.add_argument("--stamped", required=True)
    s.add_argument("--clean")
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--samples", type=int, default=evalharness.ATTACK_SAMPLES)
    s.add_argument("--stamper", help="also report randomness of this stamper's watermarks")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("run-plan", help="run the full experiment grid (resumable)")
    s.add_argument("--plan", required=True, help="config JSON; its plan section defines the grid")
    s.add_argument("--out", help="override plan.out_dir")
    s.set_defaults(func=cmd_run_plan)
    return p


def _fail(code: str, message: str, **extra) -> None:
    print(json.dumps({"error": code, "message": message, **extra}), file=sys.stderr)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalAbort):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, InsufficientSamples, FileNotFoundError, IsADirectoryError)):
        return EXIT_DATA
    if isinstance(exc, DeepStampError) and exc.code == "dimension":
        return EXIT_DATA
    return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DEEPSTAMP_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except ValidationError as exc:
        _fail("config", str(exc).replace("\n", "; "))
        return EXIT_USAGE
    except (DeepStampError, OSError) as exc:
        code = getattr(exc, "code", "io")
        extra = {"step": exc.step} if isinstance(exc, NumericalAbort) else {}
        _fail(code, str(exc), **extra)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
