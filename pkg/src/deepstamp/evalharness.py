"""End-to-end accuracy-drop experiment at desk scale.

A plan runs these phases in order, each persisting its artifacts under the
output directory before the manifest marks it done:

    data                      train subset and validation split
    pretrain                  the frozen classifier F
    stamper/<beta>            W, V and D trained against F (only if "learned" is run)
    stamp/<scheme>-<beta>     stamped train and validation splits
    train/<arch>/<scheme>-<beta>   F' trained on the stamped split, evaluated
    report                    table.csv, table.md, deltas.json, robustness.json

Rerunning with the same plan skips phases the manifest lists as done, so an
interrupted run resumes where it stopped.  Every phase draws its seed from a
hash of the master seed and the phase name.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import nets, robustness, stamping, surrogate
from .dataio import (
    ImageBatch,
    NetworkParams,
    Watermark,
    default_watermark,
    load_checkpoint,
    load_cifar_batch,
    load_cifar_dir,
    load_watermark,
    save_checkpoint,
    save_cifar_batch,
)
from .errors import DimensionError, SpecError
from .training import ClassifierConfig, StamperConfig, StamperState, accuracy, train_classifier, train_stamper

log = logging.getLogger(__name__)

PLAN_SCHEMES = ("clean", "static", "opacity", "displacement", "learned")
SCHEME_COLUMNS = {"static": "S", "opacity": "O", "displacement": "D", "learned": "DeepStamp"}
ATTACK_SAMPLES = 1000
# per-epoch progress rows use the first validation images only; cells use the full split
MONITOR_SAMPLES = 1000

# Published accuracies (%) for comparison: arch -> (baseline, {blend: (S, O, D, DeepStamp)})
REFERENCE = {
    "AlexNet": (82.74, {0.5: (78.50, 79.10, 80.13, 79.59), 1.0: (73.51, 73.15, 73.62, 74.09)}),
    "VGG16": (94.00, {0.5: (92.71, 92.92, 92.58, 92.74), 1.0: (92.57, 92.83, 92.61, None)}),
    "ResNet50": (95.37, {0.5: (94.88, 94.71, 94.92, 94.18), 1.0: (94.67, 93.64, 93.66, None)}),
}


class DataSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["cifar", "surrogate"] = "cifar"
    data_dir: str | None = None
    subset: int = Field(5000, ge=1, le=50000)
    val_size: int = Field(10000, ge=1, le=10000)


class ExtraArch(BaseModel):
    """A further F' architecture trained on the same stamped splits."""

    model_config = ConfigDict(extra="forbid")

    arch: str
    schemes: list[str] | None = None
    betas: list[float] | None = None
    epochs: int | None = Field(None, ge=0)


class ExperimentPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataSpec = DataSpec()
    classifier: ClassifierConfig = ClassifierConfig()
    extra_archs: list[ExtraArch] = []
    schemes: list[str] = list(PLAN_SCHEMES)
    betas: list[float] = [0.5, 1.0]
    stamper: StamperConfig = StamperConfig()
    opacity_span: tuple[float, float] = stamping.DEFAULT_OPACITY_SPAN
    displacement_range: tuple[int, int] = stamping.DEFAULT_DISPLACEMENT
    mix_ratio: float = Field(1.0, ge=0, le=1)
    watermark: str | None = None
    seed: int = 0
    out_dir: str = "runs/desk"

    @field_validator("schemes")
    @classmethod
    def _known_schemes(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("schemes must be non-empty")
        unknown = sorted(set(v) - set(PLAN_SCHEMES))
        if unknown:
            raise ValueError(f"unknown schemes {unknown}; choose from {list(PLAN_SCHEMES)}")
        return [s for s in PLAN_SCHEMES if s in v]

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, v: list[float]) -> list[float]:
        if not v or any(not 0.0 <= b <= 1.0 for b in v):
            raise ValueError("betas must be a non-empty list of values in [0, 1]")
        return sorted(set(float(b) for b in v))

    @model_validator(mode="after")
    def _archs_exist(self) -> "ExperimentPlan":
        for arch in [self.classifier.arch] + [e.arch for e in self.extra_archs]:
            if arch in nets.UNBUILDABLE:
                raise ValueError(f"{arch}: {nets.UNBUILDABLE[arch]}")
            if not nets.is_classifier(arch):
                raise ValueError(f"{arch} is not a classifier architecture")
        return self

    def cells(self) -> list[tuple[str, float, str]]:
        """(arch, beta, scheme) for every result cell, primary arch first."""
        out = [(self.classifier.arch, b, s) for b in self.betas for s in self.schemes]
        for extra in self.extra_archs:
            schemes = [s for s in self.schemes if extra.schemes is None or s in extra.schemes]
            betas = [b for b in self.betas if extra.betas is None or b in extra.betas]
            out += [(extra.arch, b, s) for b in betas for s in schemes]
        return out


@dataclass
class Cell:
    arch: str
    beta: float
    scheme: str
    acc_clean_eval: float
    acc_stamped_eval: float
    steps: int
    seed: int

    def __post_init__(self):
        for name in ("acc_clean_eval", "acc_stamped_eval"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name}={getattr(self, name)} outside [0, 100]")


ResultTable = list[Cell]


def _monitor(batch: ImageBatch) -> ImageBatch:
    return batch.subset(slice(0, min(MONITOR_SAMPLES, len(batch))))


def phase_seed(master: int, phase: str) -> int:
    """Independent 63-bit seed per phase name."""
    digest = hashlib.sha256(f"{master}/{phase}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def beta_tag(beta: float) -> str:
    return str(float(beta))


def evaluate(params: NetworkParams, clean: ImageBatch, stamped: ImageBatch) -> tuple[float, float]:
    """Top-1 accuracy (%) on clean and stamped versions of the same validation images."""
    if len(clean) == 0:
        raise DimensionError("cannot evaluate on an empty batch")
    if clean.data.shape != stamped.data.shape or not np.array_equal(clean.labels, stamped.labels):
        raise DimensionError("clean and stamped validation sets must hold the same images")
    acc_clean = accuracy(nets.predict_logits(params, clean.data), clean.labels)
    if stamped is clean or np.array_equal(stamped.data, clean.data):
        return acc_clean, acc_clean
    return acc_clean, accuracy(nets.predict_logits(params, stamped.data), stamped.labels)


def assert_disjoint(train: ImageBatch, val: ImageBatch) -> None:
    """Raise if any validation image is byte-identical to a training image."""
    seen = {hashlib.sha1(img.tobytes()).digest() for img in train.data}
    dupes = sum(hashlib.sha1(img.tobytes()).digest() in seen for img in val.data)
    if dupes:
        raise SpecError(f"{dupes} validation images also appear in the training split")


# --------------------------------------------------------------------------
# reports


CSV_FIELDS = ["arch", "beta", "scheme", "acc_clean_eval", "acc_stamped_eval", "steps", "seed"]


def _grid(table: ResultTable, metric: str) -> list[str]:
    lines = [
        "| arch | blend | clean | S | O | D | DeepStamp |",
        "|---|---|---|---|---|---|---|",
    ]
    index = {(c.arch, c.beta, c.scheme): c for c in table}
    rows = sorted({(c.arch, c.beta) for c in table}, key=lambda r: ([c.arch for c in table].index(r[0]), r[1]))
    for arch, beta in rows:
        vals = []
        for scheme in PLAN_SCHEMES:
            cell = index.get((arch, beta, scheme))
            vals.append("-" if cell is None else f"{getattr(cell, metric):.2f}")
        lines.append(f"| {arch} | {beta_tag(beta)} | " + " | ".join(vals) + " |")
    return lines


def _reference_grid() -> list[str]:
    lines = [
        "| arch | blend | baseline | S | O | D | DeepStamp |",
        "|---|---|---|---|---|---|---|",
    ]
    for arch, (base, rows) in REFERENCE.items():
        for beta, vals in rows.items():
            cols = ["-" if v is None else f"{v:.2f}" for v in vals]
            lines.append(f"| {arch} | {beta_tag(beta)} | {base:.2f} | " + " | ".join(cols) + " |")
    return lines


def deltas(table: ResultTable) -> dict:
    """Accuracy change of every stamped cell relative to the clean cell of the same arch and blend."""
    index = {(c.arch, c.beta, c.scheme): c for c in table}
    out = []
    for c in table:
        base = index.get((c.arch, c.beta, "clean"))
        if c.scheme == "clean" or base is None:
            continue
        out.append(
            {
                "arch": c.arch,
                "beta": c.beta,
                "scheme": c.scheme,
                "delta_clean_eval": c.acc_clean_eval - base.acc_clean_eval,
                "delta_stamped_eval": c.acc_stamped_eval - base.acc_stamped_eval,
            }
        )
    ref = []
    for arch, (base, rows) in REFERENCE.items():
        for beta, vals in rows.items():
            for scheme, v in zip(SCHEME_COLUMNS, vals):
                if v is not None:
                    ref.append({"arch": arch, "beta": beta, "scheme": scheme, "delta": round(v - base, 2)})
    return {"cells": out, "reference": ref if table else []}


def render_report(table: ResultTable, out_dir) -> dict[str, str]:
    """Write ``table.csv``, ``table.md`` and ``deltas.json``; returns their contents."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for c in table:
        row = asdict(c)
        row["acc_clean_eval"] = f"{c.acc_clean_eval:.2f}"
        row["acc_stamped_eval"] = f"{c.acc_stamped_eval:.2f}"
        writer.writerow(row)
    md = ["# Accuracy of classifiers trained on stamped data", ""]
    if table:
        md += ["Evaluated on clean validation images (%):", ""] + _grid(table, "acc_clean_eval")
        md += ["", "Evaluated on validation images stamped the same way (%):", ""]
        md += _grid(table, "acc_stamped_eval")
        md += ["", "Published full-scale reference (%), for direction only:", ""] + _reference_grid()
    files = {
        "table.csv": buf.getvalue(),
        "table.md": "\n".join(md) + "\n",
        "deltas.json": json.dumps(deltas(table), indent=1, sort_keys=True) + "\n",
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    return files


# --------------------------------------------------------------------------
# manifest


class Manifest:
    """Phase status file, rewritten atomically after every change."""

    def __init__(self, path: Path):
        self.path = path
        self.data = json.loads(path.read_text()) if path.exists() else {"phases": {}}

    def done(self, phase: str) -> bool:
        return self.data["phases"].get(phase, {}).get("status") == "done"

    def record(self, phase: str, **fields) -> None:
        self.data["phases"][phase] = fields
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        os.replace(tmp, self.path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _slug(phase: str) -> str:
    return phase.replace("/", "_")


# --------------------------------------------------------------------------
# runner


class PlanRunner:
    def __init__(self, plan: ExperimentPlan, out_dir=None):
        self.plan = plan
        self.out = Path(out_dir or plan.out_dir)
        for sub in ("data", "checkpoints", "reports", "stamped"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        plan_json = json.dumps(plan.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"
        plan_path = self.out / "plan.json"
        if plan_path.exists() and plan_path.read_text() != plan_json:
            raise SpecError(f"{plan_path} holds a different plan; use a fresh output directory")
        plan_path.write_text(plan_json)
        self.manifest = Manifest(self.out / "manifest.json")
        self._watermark: Watermark | None = None

    # paths -----------------------------------------------------------------
    def data_path(self, split: str) -> Path:
        return self.out / "data" / f"{split}.bin"

    def stamped_path(self, scheme: str, beta: float, split: str) -> Path:
        if scheme == "clean":
            return self.data_path(split)
        return self.out / "stamped" / f"{scheme}-{beta_tag(beta)}" / f"{split}.bin"

    def stamper_dir(self, beta: float) -> Path:
        return self.out / "checkpoints" / f"stamper-{beta_tag(beta)}"

    def cell_path(self, arch: str, scheme: str, beta: float) -> Path:
        return self.out / "reports" / "cells" / f"{arch}-{scheme}-{beta_tag(beta)}.json"

    # helpers ---------------------------------------------------------------
    @property
    def watermark(self) -> Watermark:
        if self._watermark is None:
            p = self.plan.watermark
            self._watermark = default_watermark() if p is None else load_watermark(p)
        return self._watermark

    def load_split(self, scheme: str, beta: float, split: str) -> ImageBatch:
        return load_cifar_batch(self.stamped_path(scheme, beta, split))

    def load_stamper(self, beta: float) -> StamperState:
        d = self.stamper_dir(beta)
        ds = [load_checkpoint(d / f"D{j}.dsck") for j in range(self.plan.stamper.n_discriminators)]
        return StamperState(load_checkpoint(d / "W.dsck"), load_checkpoint(d / "V.dsck"), ds)

    def phases(self) -> list[str]:
        p = self.plan
        out = ["data", "pretrain"]
        if "learned" in p.schemes:
            out += [f"stamper/{beta_tag(b)}" for b in p.betas]
        stamped = sorted(
            {(s, b) for _, b, s in p.cells() if s != "clean"}, key=lambda t: (t[1], PLAN_SCHEMES.index(t[0]))
        )
        out += [f"stamp/{s}-{beta_tag(b)}" for s, b in stamped]
        trained = []
        for arch, b, s in p.cells():
            name = f"train/{arch}/{s}" if s == "clean" else f"train/{arch}/{s}-{beta_tag(b)}"
            if name not in trained:
                trained.append(name)
        return out + trained + ["report"]

    # phases ----------------------------------------------------------------
    def run(self) -> ResultTable:
        for phase in self.phases():
            if self.manifest.done(phase):
                log.info("skip %s (done)", phase)
                continue
            log.info("phase %s", phase)
            t0 = time.perf_counter()
            seed = phase_seed(self.plan.seed, phase)
            try:
                self.run_phase(phase, seed)
            except Exception as exc:
                self.manifest.record(phase, status="failed", seed=seed, error=f"{type(exc).__name__}: {exc}")
                raise
            self.manifest.record(phase, status="done", seed=seed, seconds=round(time.perf_counter() - t0, 3))
        return self.table()

    def run_phase(self, phase: str, seed: int) -> None:
        kind, _, rest = phase.partition("/")
        if kind == "data":
            self.phase_data(seed)
        elif kind == "pretrain":
            self.phase_pretrain(seed)
        elif kind == "stamper":
            self.phase_stamper(float(rest), seed)
        elif kind == "stamp":
            scheme, _, beta = rest.rpartition("-")
            self.phase_stamp(scheme, float(beta), seed)
        elif kind == "train":
            arch, _, tag = rest.partition("/")
            scheme, _, beta = tag.rpartition("-") if tag != "clean" else ("clean", "", "nan")
            self.phase_train(arch, scheme, float(beta), seed, phase)
        elif kind == "report":
            self.phase_report()
        else:
            raise SpecError(f"unknown phase {phase!r}")

    def phase_data(self, seed: int) -> None:
        spec = self.plan.data
        if spec.source == "surrogate":
            train = surrogate.make_images(spec.subset, seed % 2**32)
            val = surrogate.make_images(spec.val_size, (seed >> 32) + 1)
            origin = {"source": "surrogate"}
        else:
            if spec.data_dir is None:
                raise SpecError("data.source='cifar' needs data.data_dir")
            full_train, full_val = load_cifar_dir(spec.data_dir)
            pick = np.sort(np.random.default_rng(seed).choice(len(full_train), spec.subset, replace=False))
            train, val = full_train.subset(pick), full_val.subset(slice(0, spec.val_size))
            origin = {"source": "cifar", "data_dir": spec.data_dir, "train_indices_sha256": hashlib.sha256(pick.tobytes()).hexdigest()}
        assert_disjoint(train, val)
        self.data_path("train").parent.mkdir(parents=True, exist_ok=True)
        save_cifar_batch(train, self.data_path("train"))
        save_cifar_batch(val, self.data_path("val"))
        _write_json(self.out / "data" / "data.json", {**origin, "train": len(train), "val": len(val), "disjoint": True})

    def phase_pretrain(self, seed: int) -> None:
        train, val = self.load_split("clean", 0.0, "train"), self.load_split("clean", 0.0, "val")
        cfg = self.plan.classifier.model_copy(update={"seed": seed})
        params, rows = train_classifier(train, cfg, val=_monitor(val))
        save_checkpoint(params, self.out / "checkpoints" / "F.dsck")
        _write_json(self.out / "reports" / "pretrain.json", {"config": cfg.model_dump(mode="json"), "epochs": rows})

    def phase_stamper(self, beta: float, seed: int) -> None:
        params_f = load_checkpoint(self.out / "checkpoints" / "F.dsck")
        cfg = self.plan.stamper.model_copy(update={"seed": seed, "beta": beta})
        state, rows = train_stamper(params_f, self.load_split("clean", 0.0, "train"), self.watermark, cfg)
        d = self.stamper_dir(beta)
        d.mkdir(parents=True, exist_ok=True)
        for name, params in state.all().items():
            save_checkpoint(params, d / f"{name}.dsck")
        _write_json(
            self.out / "reports" / f"stamper-{beta_tag(beta)}.json",
            {"config": cfg.model_dump(mode="json"), "steps": rows},
        )

    def stamp_split(self, scheme: str, beta: float, seed: int, x: ImageBatch, start: int) -> tuple[ImageBatch, dict]:
        if scheme == "learned":
            planes = nets.synthesize(self.load_stamper(beta).w, x.data, self.watermark)
            return stamping.stamp_learned(x, planes, beta), {}
        lo, hi = self.plan.opacity_span
        spec = stamping.StampSpec(
            blend_factor=beta,
            scheme=scheme,
            opacity_range=(lo * beta, hi * beta),
            displacement_range=tuple(self.plan.displacement_range),
            rng_seed=seed,
        )
        out, draws = stamping.apply_scheme(x, self.watermark, spec, start)
        return out, {"spec": spec.to_json(), **draws}

    def phase_stamp(self, scheme: str, beta: float, seed: int) -> None:
        train = self.load_split("clean", 0.0, "train")
        for split, x, start in (("train", train, 0), ("val", self.load_split("clean", 0.0, "val"), len(train))):
            out, draws = self.stamp_split(scheme, beta, seed, x, start)
            path = self.stamped_path(scheme, beta, split)
            path.parent.mkdir(parents=True, exist_ok=True)
            sidecar = {"scheme": scheme, "beta": beta, "split": split, "seed": seed, "first_index": start, **draws}
            stamping.save_stamped(out, path, sidecar)

    def training_set(self, scheme: str, beta: float, seed: int) -> ImageBatch:
        stamped = self.load_split(scheme, beta, "train")
        if scheme == "clean" or self.plan.mix_ratio >= 1.0:
            return stamped
        clean = self.load_split("clean", 0.0, "train")
        keep_clean = np.random.default_rng(seed).permutation(len(clean))[: round(len(clean) * (1 - self.plan.mix_ratio))]
        data = stamped.data.copy()
        data[keep_clean] = clean.data[keep_clean]
        return stamped.with_data(data)

    def phase_train(self, arch: str, scheme: str, beta: float, seed: int, phase: str) -> None:
        val = self.load_split("clean", 0.0, "val")
        cfg = self.plan.classifier.model_copy(update={"arch": arch, "seed": seed})
        for extra in self.plan.extra_archs:
            if extra.arch == arch and extra.epochs is not None:
                cfg = cfg.model_copy(update={"epochs": extra.epochs})
        reuse = scheme == "clean" and arch == self.plan.classifier.arch
        if reuse:
            # the clean baseline for the primary arch is the pretrained F itself
            params = load_checkpoint(self.out / "checkpoints" / "F.dsck")
            pre = json.loads((self.out / "reports" / "pretrain.json").read_text())
            cfg, rows = ClassifierConfig(**pre["config"]), pre["epochs"]
        else:
            val_s = self.load_split(scheme, beta, "val")
            params, rows = train_classifier(
                self.training_set(scheme, beta, seed), cfg, val=_monitor(val), val_stamped=_monitor(val_s)
            )
            save_checkpoint(params, self.out / "checkpoints" / f"{_slug(phase)}.dsck")
            _write_json(self.out / "reports" / "runs" / f"{_slug(phase)}.json", {"config": cfg.model_dump(mode="json"), "epochs": rows})
        betas = self.plan.betas if scheme == "clean" else [beta]
        for b in betas:
            acc_c, acc_s = evaluate(params, val, self.load_split(scheme, b, "val"))
            cell = Cell(arch, b, scheme, acc_c, acc_s, int(params.step), int(cfg.seed or 0))
            _write_json(self.cell_path(arch, scheme, b), asdict(cell))

    def table(self) -> ResultTable:
        return [
            Cell(**json.loads(self.cell_path(arch, scheme, beta).read_text()))
            for arch, beta, scheme in self.plan.cells()
        ]

    def probe(self) -> dict:
        """Removal-probe and randomness numbers for static vs learned on the first training images."""
        out = {}
        clean = self.load_split("clean", 0.0, "train")
        n = min(ATTACK_SAMPLES, len(clean))
        if n < robustness.MIN_ATTACK_SAMPLES:
            return out
        ref = clean.subset(slice(0, n))
        for beta in self.plan.betas:
            entry = {}
            for scheme in ("static", "opacity", "displacement", "learned"):
                if scheme not in self.plan.schemes:
                    continue
                stamped = self.load_split(scheme, beta, "train").subset(slice(0, n))
                _, residual = robustness.mean_estimate_attack(stamped, ref, beta)
                entry[scheme] = {"attack_residual": residual}
            if "static" in entry:
                static_planes = np.broadcast_to(self.watermark.rgba(), (n, 4) + clean.hw)
                entry["static"]["randomness"] = robustness.randomness(static_planes).to_json()
            if "learned" in entry:
                planes = nets.synthesize(self.load_stamper(beta).w, ref.data, self.watermark)
                entry["learned"]["randomness"] = robustness.randomness(planes).to_json()
            out[beta_tag(beta)] = entry
        return {"samples": n, "notes": robustness.ATTACK_NOTES, "blends": out}

    def phase_report(self) -> None:
        render_report(self.table(), self.out / "reports")
        _write_json(self.out / "reports" / "robustness.json", self.probe())


def run_plan(plan: ExperimentPlan, out_dir=None) -> ResultTable:
    return PlanRunner(plan, out_dir).run()
