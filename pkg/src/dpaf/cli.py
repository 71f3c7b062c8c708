"""Command-line front end: ``dpaf {calibrate,train,generate,eval}``.

Every command reads one JSON run config (unknown keys are rejected), writes
its artifacts under the output directory and stamps them with the config
digest. Exit codes: 0 success, 2 invalid config or arguments, 3 infeasible
privacy budget, 4 I/O or corrupt input files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import accountant as acc
from . import nn
from . import trainer as tr
from .data import IdxFormatError, LabeledDataset, read_idx, synth_dataset

log = logging.getLogger("dpaf")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

OUT_ENV = "DPAF_OUT"

CALIBRATION_FILE = "calibration.jsonl"
CHECKPOINT_FILE = "generator.ckpt"
LEDGER_FILE = "ledger.jsonl"
PRIVACY_FILE = "privacy.json"
SAMPLES_DIR = "samples"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"
METRICS_HEADER = ("digest", "seed", "samples", "test_size", "accuracy")


class ConfigError(ValueError):
    """The run config is malformed or inconsistent."""


# ---------------------------------------------------------------------------
# run config


@dataclass(frozen=True)
class DatasetSpec:
    """Either a synthetic pattern set or an IDX image/label pair."""

    kind: str = "synthetic"
    n: int = 2000
    num_classes: int = 2
    side: int = 16
    seed: int = 0
    noise: float = 0.1
    jitter: float = 0.08
    images: str | None = None
    labels: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'idx', got {self.kind!r}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("idx datasets need both 'images' and 'labels' paths")
        if self.kind == "synthetic" and (self.n < 1 or self.num_classes < 2 or self.side < 1):
            raise ConfigError("synthetic datasets need n >= 1, num_classes >= 2, side >= 1")

    def load(self, base: Path) -> LabeledDataset:
        if self.kind == "idx":
            return read_idx(base / self.images, base / self.labels, self.num_classes)
        return synth_dataset(
            self.n, self.num_classes, self.side, self.seed, self.noise, self.jitter
        )


@dataclass(frozen=True)
class PrivacyTarget:
    epsilon: float = 10.0
    delta: float = 1e-5
    allocation: tuple = (0.1, None, 0.1)
    allocation_mode: str = "absolute"

    def __post_init__(self):
        object.__setattr__(self, "allocation", tuple(self.allocation))
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")
        if len(self.allocation) != 3:
            raise ConfigError("allocation needs three entries (conv1, conv2, dpagg)")


@dataclass(frozen=True)
class GenerateSpec:
    count: int = 1000

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("generate.count must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    test_dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(n=1000, seed=999))
    net: nn.NetConfig = field(default_factory=nn.NetConfig)
    schedule: tr.TrainSchedule = field(default_factory=tr.TrainSchedule)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    privacy: PrivacyTarget = field(default_factory=PrivacyTarget)
    eval: tr.EvalConfig = field(default_factory=tr.EvalConfig)
    generate: GenerateSpec = field(default_factory=GenerateSpec)
    seed: int = 0
    output_dir: str = "dpaf_out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON config, output location excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def privacy_spec(self, data_size: int) -> acc.PrivacySpec:
        p = self.privacy
        return tr.privacy_spec_for(
            data_size, self.net, self.schedule, p.epsilon, p.delta, p.allocation, p.allocation_mode
        )


_SECTIONS = {
    "dataset": DatasetSpec,
    "test_dataset": DatasetSpec,
    "net": nn.NetConfig,
    "schedule": tr.TrainSchedule,
    "train": tr.TrainConfig,
    "privacy": PrivacyTarget,
    "eval": tr.EvalConfig,
    "generate": GenerateSpec,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        obj = cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e
    if cls is tr.EvalConfig:
        obj = dataclasses.replace(obj, filters=tuple(obj.filters))
    return obj


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a parsed config; every key must be known."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kw = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], value, key)
        elif key == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError("seed must be a non-negative integer")
            kw[key] = value
        else:
            if not isinstance(value, str) or not value:
                raise ConfigError("output_dir must be a non-empty string")
            kw[key] = value
    cfg = RunConfig(**kw)
    if cfg.dataset.kind == "synthetic":
        if (cfg.dataset.side, cfg.dataset.num_classes) != (cfg.net.side, cfg.net.num_classes):
            raise ConfigError("dataset side/num_classes must match the net config")
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# artifacts


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def calibration_report(cfg: RunConfig, cal: acc.CalibrationResult) -> str:
    head = {"digest": cfg.digest(), "kind": "calibration"}
    return json.dumps(head, sort_keys=True) + "\n" + cal.to_text()


def to_pgm_bytes(img: np.ndarray) -> bytes:
    """Binary greyscale PGM of a (h, w) array in [-1, 1]."""
    h, w = img.shape
    px = np.rint((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


# magic, width, height, maxval, then exactly one whitespace byte
_PGM_HEADER = re.compile(rb"(P5)\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`to_pgm_bytes` (up to 8-bit quantization)."""
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None or m.group(4) != b"255":
        raise IdxFormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(2)), int(m.group(3))
    px = np.frombuffer(data, dtype=np.uint8, offset=m.end())
    if px.size != w * h:
        raise IdxFormatError(f"{path}: expected {w * h} pixels, found {px.size}")
    return px.reshape(h, w).astype(np.float64) / 127.5 - 1.0


def write_samples(out: Path, samples: LabeledDataset, digest: str, seed: int) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, lab) in enumerate(zip(samples.images, samples.labels)):
        files = []
        for c in range(img.shape[0]):
            name = f"{i:06d}.pgm" if img.shape[0] == 1 else f"{i:06d}_c{c}.pgm"
            (out / name).write_bytes(to_pgm_bytes(img[c]))
            files.append(name)
        entries.append({"files": files, "label": int(lab)})
    manifest = {
        "digest": digest,
        "seed": seed,
        "num_classes": samples.num_classes,
        "samples": entries,
    }
    _write_text(out / MANIFEST_FILE, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return [f for e in entries for f in e["files"]]


def read_samples(directory) -> LabeledDataset:
    directory = Path(directory)
    with open(directory / MANIFEST_FILE, encoding="utf-8") as f:
        manifest = json.load(f)
    images, labels = [], []
    for entry in manifest["samples"]:
        images.append(np.stack([read_pgm(directory / name) for name in entry["files"]]))
        labels.append(entry["label"])
    return LabeledDataset(np.stack(images), np.array(labels), manifest["num_classes"])


def append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_HEADER, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(cfg: RunConfig, out: Path, base: Path) -> str:
    data = cfg.dataset.load(base)
    cal = acc.calibrate_sigma(cfg.privacy_spec(len(data)))
    report = calibration_report(cfg, cal)
    _write_text(out / CALIBRATION_FILE, report)
    return report


def cmd_train(cfg: RunConfig, out: Path, base: Path) -> tr.RunResult:
    data = cfg.dataset.load(base)
    p = cfg.privacy
    res = tr.run_dpaf(
        data, cfg.net, cfg.schedule, cfg.train, p.epsilon, p.delta, cfg.seed,
        p.allocation, p.allocation_mode,
    )
    digest = cfg.digest()
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / CALIBRATION_FILE, calibration_report(cfg, res.calibration))
    nn.save_checkpoint(
        out / CHECKPOINT_FILE, res.g_params, cfg.net, {"seed": cfg.seed, "kind": "generator"}, digest
    )
    head = json.dumps({"digest": digest, "kind": "ledger"}, sort_keys=True) + "\n"
    _write_text(out / LEDGER_FILE, head + res.ledger.to_text())
    statement = {
        "digest": digest,
        "epsilon": res.achieved_epsilon,
        "delta": p.delta,
        "order": res.achieved_order,
        "target_epsilon": p.epsilon,
        "releases": res.ledger.releases,
        "counts": res.ledger.counts,
        "statement": res.privacy_statement(p.delta),
    }
    _write_text(out / PRIVACY_FILE, json.dumps(statement, sort_keys=True, indent=1) + "\n")
    return res


def cmd_generate(cfg: RunConfig, out: Path, checkpoint: Path, count: int, labels=None) -> Path:
    try:
        g_params, net_cfg, _, digest = nn.load_checkpoint(checkpoint)
    except FileNotFoundError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise nn.CheckpointError(f"corrupt checkpoint: {e}") from e
    if labels is not None and any(not 0 <= v < net_cfg.num_classes for v in labels):
        raise ConfigError(f"labels must lie in [0, {net_cfg.num_classes})")
    samples = tr.generate_samples(g_params, net_cfg, count, cfg.seed, labels)
    target = out / SAMPLES_DIR
    write_samples(target, samples, digest, cfg.seed)
    return target


def cmd_eval(cfg: RunConfig, out: Path, base: Path, samples_dir: Path) -> float:
    train = read_samples(samples_dir)
    test = cfg.test_dataset.load(base)
    accuracy = tr.eval_downstream(train, test, cfg.seed, cfg.eval)
    append_metrics(
        out / METRICS_FILE,
        {
            "digest": cfg.digest(),
            "seed": cfg.seed,
            "samples": len(train),
            "test_size": len(test),
            "accuracy": f"{accuracy:.6f}",
        },
    )
    return accuracy


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpaf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=f"output directory (beats ${OUT_ENV} and the config)")

    common(sub.add_parser("calibrate", help="calibrate noise multipliers for the budget"))
    common(sub.add_parser("train", help="run the full private training pipeline"))
    g = sub.add_parser("generate", help="write synthetic PGM images from a checkpoint")
    common(g)
    g.add_argument("--checkpoint", help=f"defaults to <out>/{CHECKPOINT_FILE}")
    g.add_argument("--count", type=int, help="number of images (default: config)")
    g.add_argument("--labels", help="comma-separated labels, cycled to --count")
    e = sub.add_parser("eval", help="train on synthetic samples, test on real data")
    common(e)
    e.add_argument("--samples", help=f"sample directory (defaults to <out>/{SAMPLES_DIR})")
    return p


def _resolve(args) -> tuple[RunConfig, Path, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = args.out or os.environ.get(OUT_ENV) or cfg.output_dir
    base = Path(args.config).resolve().parent
    out = Path(out)
    if not out.is_absolute():
        out = Path.cwd() / out
    return cfg, out, base


def _labels(spec: str | None, count: int):
    if spec is None:
        return None
    try:
        vals = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --labels {spec!r}") from e
    if not vals:
        raise ConfigError("--labels is empty")
    return [vals[i % len(vals)] for i in range(count)]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg, out, base = _resolve(args)
        if args.command == "calibrate":
            sys.stdout.write(cmd_calibrate(cfg, out, base))
        elif args.command == "train":
            res = cmd_train(cfg, out, base)
            print(res.privacy_statement(cfg.privacy.delta))
        elif args.command == "generate":
            count = args.count if args.count is not None else cfg.generate.count
            if count < 1:
                raise ConfigError("--count must be >= 1")
            ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_FILE
            target = cmd_generate(cfg, out, ckpt, count, _labels(args.labels, count))
            print(f"wrote {count} samples to {target}")
        else:
            samples = Path(args.samples) if args.samples else out / SAMPLES_DIR
            print(f"accuracy {cmd_eval(cfg, out, base, samples):.6f}")
    except acc.InfeasibleBudgetError as e:
        print(f"error: infeasible privacy budget: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, IdxFormatError, nn.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, acc.AccountantError, tr.ScheduleError, nn.ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
