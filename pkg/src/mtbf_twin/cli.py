"""Command-line entry point: ``mtbf-twin <command> ...``.

Commands: gen-data, encode, train, eval, ablate {encoding,regularization,mtl}, stream.
Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import gaf_codec
from . import train_eval as te
from .config import ConfigError, apply_overrides, load_config, parse_config_text
from .mtl_model import MODES, REG_SCHEMES, CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .scenario_sim import (PARAM_NAMES, DatasetError, ScenarioParams, SimConfig, build_dataset,
                           class_proportions, read_dataset, scenario_for_index, simulate_deformation,
                           truncate_to_frame, write_dataset)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
STREAM_VERSION = 1

log = logging.getLogger("mtbf_twin")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class Settings:
    sim: SimConfig
    enc: gaf_codec.EncodingConfig
    model: ModelConfig
    train: te.TrainConfig


def load_settings(args) -> Settings:
    sections = load_config(args.config) if getattr(args, "config", None) else parse_config_text("")
    sim = SimConfig.from_mapping(sections["sim"])
    enc = apply_overrides(gaf_codec.EncodingConfig(), sections["enc"], "enc")
    model_values = dict(sections["model"])
    if "image_size" in model_values and int(model_values["image_size"]) != enc.image_size:
        raise ConfigError(f"model.image_size={model_values['image_size']} disagrees with "
                          f"enc.image_size={enc.image_size}")
    model_values["image_size"] = str(enc.image_size)
    model = ModelConfig.from_mapping(model_values)
    train = te.TrainConfig.from_mapping(sections["train"])

    if getattr(args, "seed", None) is not None:
        sim = dataclasses.replace(sim, seed=args.seed)
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "count", None) is not None:
        sim = dataclasses.replace(sim, count=args.count)
    if getattr(args, "splits", None):
        try:
            sizes = tuple(int(v) for v in args.splits.split(","))
        except ValueError:
            raise UsageError(f"--splits expects three integers like 850,150,150, got {args.splits!r}")
        sim = dataclasses.replace(sim, splits=sizes)
    if getattr(args, "encoding", None):
        enc = dataclasses.replace(enc, kind=args.encoding)
    if getattr(args, "reg", None):
        model = dataclasses.replace(model, reg_scheme=args.reg)
    if getattr(args, "mode", None):
        model = dataclasses.replace(model, mode=args.mode)
    if getattr(args, "epochs", None) is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    return Settings(sim, enc, model, train)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    s = load_settings(args)
    if sum(s.sim.splits) != s.sim.count:
        raise UsageError(f"split sizes {s.sim.splits} do not sum to count {s.sim.count}")
    ds = build_dataset(s.sim)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    sizes = {name: len(ds.split(name)) for name in ("train", "val", "test")}
    print(f"wrote {len(ds)} records to {out} (seed {ds.seed})")
    print("splits: " + "/".join(str(v) for v in sizes.values()) + " (train/val/test)")
    for name, frac in class_proportions(s.label for s in ds.samples).items():
        print(f"  {name:<22}{100 * frac:6.1f}%")
    return EXIT_OK


def cmd_encode(args) -> int:
    s = load_settings(args)
    ds = read_dataset(_require(args.data, "dataset file"))
    images, computed = te.encode_samples(ds.samples, s.enc, args.out, export_ppm=args.export_ppm)
    print(f"{len(ds)} images of {images.shape[1]}x{images.shape[2]}x3 ({s.enc.kind}) in "
          f"{Path(args.out) / s.enc.kind}: {computed} computed, {len(ds) - computed} cached")
    return EXIT_OK


def cmd_train(args) -> int:
    s = load_settings(args)
    ds = read_dataset(_require(args.data, "dataset file"))
    data = te.prepare(ds, s.enc, args.cache)
    model, history, m = te.run_training(data, s.model, s.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    _write(out / "history.csv", te.history_csv(history))
    _write(out / "metrics.csv", te.metrics_csv(m, "test"))
    sweep = te.time_sweep(model, data.test)
    _write(out / "time_sweep.tsv", te.sweep_table(sweep))
    report = _metrics_report(m, "test") + f"best epoch: {model.epoch}\ntraining time: {m.train_seconds:.1f} s\n"
    _write(out / "report.txt", report)
    print(report, end="")
    return EXIT_OK


def _metrics_report(m: te.Metrics, split: str) -> str:
    lines = [f"split: {split} ({m.n} samples)"]
    if m.accuracy is not None:
        lines += [f"accuracy: {m.accuracy:.4f}", f"defect-vs-normal accuracy: {m.binary_accuracy:.4f}",
                  te.confusion_text(m)]
    if m.rmse is not None:
        lines.append(f"springback RMSE: {m.rmse:.4f} deg")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    s = load_settings(args)
    model = load_checkpoint(_require(args.checkpoint, "checkpoint"), expect_mode=args.mode)
    ds = read_dataset(_require(args.data, "dataset file"))
    enc = dataclasses.replace(s.enc, image_size=model.config.image_size)
    samples = ds.split(args.split)
    if not samples:
        raise DatasetError(f"split {args.split!r} is empty")
    images, _ = te.encode_samples(samples, enc, args.cache)
    m = te.evaluate(model, te.split_arrays(samples, images))
    report = _metrics_report(m, args.split)
    print(report, end="")
    if args.out:
        out = Path(args.out)
        _write(out / f"eval_{args.split}.csv", te.metrics_csv(m, args.split))
        _write(out / f"eval_{args.split}.txt", report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    s = load_settings(args)
    ds = read_dataset(_require(args.data, "dataset file"))
    kw = dict(repeats=args.repeats, cache_dir=args.cache)
    if args.study == "encoding":
        result = te.ablate_encoding(ds, s.model, s.train, s.enc, **kw)
    elif args.study == "regularization":
        result = te.ablate_regularization(ds, s.model, s.train, s.enc, **kw)
    else:
        result = te.ablate_mtl(ds, s.model, s.train, s.enc, **kw)
    out = Path(args.out)
    _write(out / f"ablate_{args.study}.csv", te.runs_csv(result.runs))
    _write(out / f"ablate_{args.study}.txt", result.report())
    print(result.report(), end="")
    return EXIT_OK


def read_scenario_file(path) -> ScenarioParams:
    """``name = value`` lines for all thirteen parameters (alpha_B in radians)."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key not in PARAM_NAMES:
            raise DatasetError(f"{path}:{lineno}: expected '<parameter> = <value>' with one of {PARAM_NAMES}")
        values[key] = float(value)
    missing = [n for n in PARAM_NAMES if n not in values]
    if missing:
        raise DatasetError(f"{path}: missing parameters {missing}")
    try:
        return ScenarioParams(**values)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def stream_frames(N: int, interval: int) -> list[int]:
    """Frames ``interval, 2*interval, ...`` always ending at ``N``."""
    if interval < 1:
        raise UsageError("--frame-interval must be >= 1")
    frames = list(range(interval, N + 1, interval))
    if not frames or frames[-1] != N:
        frames.append(N)
    return frames


def stream_events(model, scenario: ScenarioParams, series, interval: int, job: str,
                  enc: gaf_codec.EncodingConfig):
    """Replay ``series`` frame by frame; yields ``(fields, seconds)`` per event."""
    virtual = scenario.virtual.as_array()[None, :]
    for L in stream_frames(series.total_frames, interval):
        t0 = time.perf_counter()
        part = truncate_to_frame(series, L)
        image = gaf_codec.encode(part.values, enc)[None]
        pred = model.predict(image, virtual)
        seconds = time.perf_counter() - t0
        probs = pred.probs[0]
        fields = [job, str(L), format(L / series.total_frames, ".17g"), te.CLASS_NAMES[int(np.argmax(probs))],
                  *(format(float(p), ".17g") for p in probs), format(float(pred.springback[0]), ".17g")]
        yield fields, seconds


def cmd_stream(args) -> int:
    s = load_settings(args)
    model = load_checkpoint(_require(args.checkpoint, "checkpoint"), expect_mode="multi_task")
    enc = dataclasses.replace(s.enc, kind="gaf_fe", image_size=model.config.image_size)
    if args.scenario:
        scenario = read_scenario_file(_require(args.scenario, "scenario file"))
        series, _, _ = simulate_deformation(scenario, s.sim.total_frames, s.train.seed, s.sim)
        job = args.job or Path(args.scenario).stem
    else:
        if args.sample_id is None or not args.data:
            raise UsageError("stream needs --scenario FILE or --data DATASET --sample-id K")
        ds = read_dataset(_require(args.data, "dataset file"))
        sim = dataclasses.replace(s.sim, seed=ds.seed, count=len(ds), total_frames=ds.total_frames)
        scenario, noise_seed = scenario_for_index(sim, args.sample_id)
        series, label, _ = simulate_deformation(scenario, sim.total_frames, noise_seed, sim)
        record = ds.samples[args.sample_id]
        if label != record.label or not np.array_equal(scenario.virtual.as_array(), record.virtual.as_array()):
            raise DatasetError(f"sample {args.sample_id} cannot be regenerated from {args.data}; "
                               "pass the --config used by gen-data")
        job = args.job or f"sample-{args.sample_id}"

    header = [f"#mtbf-stream\tversion={STREAM_VERSION}",
              "\t".join(["job", "L", "fraction", "predicted"] + [f"p_{n}" for n in te.CLASS_NAMES]
                        + ["springback"])]
    lines, latency = list(header), []
    for fields, seconds in stream_events(model, scenario, series, args.frame_interval, job, enc):
        lines.append("\t".join(fields))
        latency.append(seconds)
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    print(f"{len(latency)} events; mean per-frame inference {1000 * np.mean(latency):.1f} ms", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mtbf-twin", description="Tube-bending defect and springback prediction toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value config file (sim.*, enc.*, model.*, train.*)")
        if seed:
            p.add_argument("--seed", type=int, help="overrides sim.seed and train.seed")

    def model_flags(p):
        p.add_argument("--encoding", choices=gaf_codec.ENCODINGS)
        p.add_argument("--reg", choices=REG_SCHEMES)
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--epochs", type=int)
        p.add_argument("--cache", help="encoded-image cache directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    common(p)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--count", type=int)
    p.add_argument("--splits", help="train,val,test sizes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("encode", help="encode every sample as an image (cached by content hash)")
    common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--encoding", choices=gaf_codec.ENCODINGS)
    p.add_argument("--out", required=True, help="cache directory")
    p.add_argument("--export-ppm", action="store_true", help="also write plain-text P3 images")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a model and write checkpoint plus reports")
    common(p)
    model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--mode", choices=MODES, help="reject checkpoints of another mode")
    p.add_argument("--cache")
    p.add_argument("--out", help="directory for eval_<split>.csv/.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation study")
    p.add_argument("study", choices=("encoding", "regularization", "mtl"))
    common(p)
    model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=None, help="runs per variant (5; 1 for mtl)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stream", help="replay a scenario frame by frame through a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file holding the sample")
    p.add_argument("--sample-id", type=int)
    p.add_argument("--scenario", help="file of '<parameter> = <value>' lines")
    p.add_argument("--frame-interval", type=int, default=10)
    p.add_argument("--job", help="job id written on every event")
    p.add_argument("--out", help="event log path (stdout when omitted)")
    p.set_defaults(func=cmd_stream)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "repeats", 0) is None:
        args.repeats = 1 if args.study == "mtl" else 5
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mtbf-twin: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (te.TrainingError, dc.NumericError) as exc:
        print(f"mtbf-twin: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, gaf_codec.EncodingError, OSError, ValueError) as exc:
        print(f"mtbf-twin: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
