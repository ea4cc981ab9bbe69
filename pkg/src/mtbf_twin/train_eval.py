"""Training protocol, metrics, time sweep and the three ablation studies."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import gaf_codec
from .config import apply_overrides
from .mtl_model import Batch, ModelConfig, MTLNet, build_model
from .scenario_sim import Dataset, DefectLabel, Sample

log = logging.getLogger(__name__)

CLASS_NAMES = [lab.name for lab in DefectLabel]
OUTPUT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    clip_mode: str = "global"
    eval_batch: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        return apply_overrides(cls(), values, "train")


@dataclass
class Metrics:
    n: int
    accuracy: float | None = None
    binary_accuracy: float | None = None
    rmse: float | None = None
    confusion: np.ndarray | None = None  # rows: true class, cols: predicted
    loss: float | None = None
    train_seconds: float | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_reg: float
    val_loss: float
    val_accuracy: float | None
    val_rmse: float | None


# ---------------------------------------------------------------------------
# data plumbing


def _series_key(sample: Sample, enc: gaf_codec.EncodingConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(sample.physical.values, dtype="<f8").tobytes())
    h.update(json.dumps([enc.kind, enc.image_size, enc.colormap_size, enc.pad_length,
                         [list(a) for a in enc.anchors], enc.colormap_file]).encode())
    if enc.colormap_file:
        h.update(Path(enc.colormap_file).read_bytes())
    return h.hexdigest()


def encode_samples(samples: Sequence[Sample], enc: gaf_codec.EncodingConfig,
                   cache_dir: str | Path | None = None, export_ppm: bool = False):
    """Encode every sample's series; returns ``(images, n_computed)``.

    With ``cache_dir`` each image is stored as ``<content hash>.npy`` next to a
    ``manifest.tsv`` (sample index, hash, file); images whose hash is already
    present are loaded instead of recomputed.
    """
    images = np.empty((len(samples), enc.image_size, enc.image_size, 3))
    computed = 0
    root = Path(cache_dir) / enc.kind if cache_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(samples):
        key = _series_key(s, enc) if root is not None else ""
        path = root / f"{key}.npy" if root is not None else None
        if path is not None and path.exists():
            images[i] = np.load(path)
        else:
            images[i] = gaf_codec.encode(s.physical.values, enc)
            computed += 1
            if path is not None:
                np.save(path, images[i])
        if root is not None:
            manifest.append(f"{s.index}\t{key}\t{path.name}")
            if export_ppm:
                (root / f"sample_{s.index:05d}.ppm").write_text(gaf_codec.to_ppm(images[i]))
    if root is not None:
        (root / "manifest.tsv").write_text("#mtbf-encode-manifest\tversion=1\n" + "\n".join(manifest) + "\n")
    return images, computed


@dataclass
class SplitArrays:
    images: np.ndarray
    virtual: np.ndarray
    labels: np.ndarray
    springback: np.ndarray
    fractions: np.ndarray

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> Batch:
        return Batch(self.images[idx], self.virtual[idx], self.labels[idx], self.springback[idx])


def split_arrays(samples: Sequence[Sample], images: np.ndarray) -> SplitArrays:
    return SplitArrays(
        images=images,
        virtual=np.array([s.virtual.as_array() for s in samples]).reshape(-1, 5),
        labels=np.array([int(s.label) for s in samples], dtype=int),
        springback=np.array([s.springback for s in samples], dtype=float),
        fractions=np.array([s.physical.fraction for s in samples], dtype=float),
    )


@dataclass
class PreparedData:
    train: SplitArrays
    val: SplitArrays
    test: SplitArrays


def prepare(dataset: Dataset, enc: gaf_codec.EncodingConfig, cache_dir=None) -> PreparedData:
    images, _ = encode_samples(dataset.samples, enc, cache_dir)
    parts = {}
    for name in ("train", "val", "test"):
        idx = [i for i, s in enumerate(dataset.samples) if s.split == name]
        parts[name] = split_arrays([dataset.samples[i] for i in idx], images[idx])
    return PreparedData(**parts)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Reshuffled batches covering every sample once; a lone trailing sample joins the previous batch."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


# ---------------------------------------------------------------------------
# training and evaluation


def predict_arrays(model: MTLNet, data: SplitArrays, batch: int = 50):
    probs, sb = [], []
    for i in range(0, len(data), batch):
        sl = slice(i, i + batch)
        pred = model.predict(data.images[sl], data.virtual[sl])
        if pred.probs is not None:
            probs.append(pred.probs)
        if pred.springback is not None:
            sb.append(pred.springback)
    return (np.concatenate(probs) if probs else None, np.concatenate(sb) if sb else None)


def classification_metrics(labels: np.ndarray, predicted: np.ndarray) -> tuple[float, float, np.ndarray]:
    confusion = np.zeros((4, 4), dtype=int)
    np.add.at(confusion, (labels, predicted), 1)
    accuracy = float(np.trace(confusion) / max(len(labels), 1))
    binary = float(np.mean((labels == 0) == (predicted == 0))) if len(labels) else 0.0
    return accuracy, binary, confusion


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(target)) ** 2)))


def evaluate(model: MTLNet, data: SplitArrays, batch: int = 50) -> Metrics:
    """Infer-mode metrics over one split."""
    probs, sb = predict_arrays(model, data, batch)
    m = Metrics(n=len(data))
    loss = 0.0
    if probs is not None:
        pred = probs.argmax(axis=1)
        m.accuracy, m.binary_accuracy, m.confusion = classification_metrics(data.labels, pred)
        loss += float(-np.mean(np.log(np.clip(probs[np.arange(len(data)), data.labels], 1e-300, None))))
    if sb is not None:
        m.rmse = rmse(sb, data.springback)
        loss += model.config.gamma * m.rmse**2 if model.mode == "multi_task" else m.rmse**2
    m.loss = loss
    return m


def _selection_key(m: Metrics):
    if m.accuracy is not None:
        return (m.accuracy, -m.loss)
    return (-m.rmse,)


def configure_optimizer(model: MTLNet, cfg: TrainConfig):
    model.optimizer = dc.Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                              clip=cfg.clip, clip_mode=cfg.clip_mode)


def train(data: PreparedData, model: MTLNet, cfg: TrainConfig) -> tuple[MTLNet, list[EpochRecord]]:
    """Minibatch Adam with per-epoch reshuffle; keeps the best-validation state."""
    if len(data.train) == 0 or len(data.val) == 0:
        raise TrainingError("training needs non-empty train and val splits")
    model.set_standardization(data.train.virtual)
    model.init_regression_bias(float(np.mean(data.train.springback)))
    configure_optimizer(model, cfg)
    history: list[EpochRecord] = []
    best_key, best_state = None, None
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng((cfg.seed, epoch))
        losses, regs = [], []
        for b, idx in enumerate(epoch_batches(len(data.train), cfg.batch_size, rng)):
            try:
                loss, parts = model.joint_loss(data.train.batch(idx), train=True)
                if not math.isfinite(loss):
                    raise dc.NumericError("loss is not finite")
                model.optimizer.step(model.params())
            except dc.NumericError as exc:
                raise TrainingError(f"numeric failure at epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(loss)
            regs.append(parts["reg"])
        model.epoch = epoch
        val = evaluate(model, data.val, cfg.eval_batch)
        rec = EpochRecord(epoch, float(np.mean(losses)), float(np.mean(regs)), val.loss, val.accuracy, val.rmse)
        history.append(rec)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %s val_rmse %s", epoch, rec.train_loss,
                 rec.val_loss, rec.val_accuracy, rec.val_rmse)
        key = _selection_key(val)
        if best_key is None or key > best_key:
            best_key, best_state = key, (model.state_dict(), model.optimizer.step_count, epoch)
    state, steps, epoch = best_state
    model.load_state_dict(state, step_count=steps)
    model.epoch = epoch
    return model, history


def run_training(data: PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Build, train and test one model; returns ``(model, history, test metrics)``."""
    model = build_model(model_cfg, seed=train_cfg.seed)
    t0 = time.perf_counter()
    model, history = train(data, model, train_cfg)
    elapsed = time.perf_counter() - t0
    metrics = evaluate(model, data.test, train_cfg.eval_batch)
    metrics.train_seconds = elapsed
    return model, history, metrics


# ---------------------------------------------------------------------------
# streaming-time analysis


@dataclass
class BucketMetrics:
    low: float
    high: float
    count: int
    accuracy: float | None
    rmse: float | None
    rmse_se: float | None


def bucket_index(fractions: np.ndarray, buckets: int) -> np.ndarray:
    """Bucket ``k`` covers ``(k/B, (k+1)/B]``."""
    f = np.asarray(fractions, dtype=float)
    if np.any(f <= 0) or np.any(f > 1):
        raise ValueError("frame fractions must lie in (0, 1]")
    return np.clip(np.ceil(f * buckets - 1e-12).astype(int) - 1, 0, buckets - 1)


def time_sweep(model: MTLNet, data: SplitArrays, buckets: int = 5, batch: int = 50) -> list[BucketMetrics]:
    """Per-bucket accuracy and RMSE over the observed frame fraction L/N; empty buckets are omitted."""
    probs, sb = predict_arrays(model, data, batch)
    which = bucket_index(data.fractions, buckets)
    rows = []
    for k in range(buckets):
        sel = which == k
        n = int(sel.sum())
        if n == 0:
            continue
        acc = float(np.mean(probs[sel].argmax(axis=1) == data.labels[sel])) if probs is not None else None
        r = se = None
        if sb is not None:
            sq = (sb[sel] - data.springback[sel]) ** 2
            r = float(np.sqrt(sq.mean()))
            # delta method: se(sqrt(m)) = se(m) / (2 sqrt(m))
            se = float(sq.std(ddof=1) / math.sqrt(n) / (2 * r)) if n > 1 and r > 0 else 0.0
        rows.append(BucketMetrics(k / buckets, (k + 1) / buckets, n, acc, r, se))
    return rows


def sweep_table(rows: list[BucketMetrics]) -> str:
    out = [f"# mtbf-time-sweep version={OUTPUT_VERSION}", "bucket_low\tbucket_high\tcount\taccuracy\trmse"]
    for r in rows:
        out.append("\t".join([f"{r.low:.17g}", f"{r.high:.17g}", str(r.count),
                              "" if r.accuracy is None else f"{r.accuracy:.17g}",
                              "" if r.rmse is None else f"{r.rmse:.17g}"]))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# ablations


@dataclass
class RunResult:
    study: str
    variant: str
    repeat: int
    seed: int
    accuracy: float | None
    rmse: float | None
    seconds: float
    sparsity: float | None = None
    max_reg: float | None = None


def accepting_sparsity(model: MTLNet, threshold: float = 1e-3) -> float | None:
    ws = [model.layers[n].W.value.ravel() for n in ("FCN2", "FCN6") if n in model.layers]
    if not ws:
        return None
    w = np.concatenate(ws)
    return float(np.mean(np.abs(w) < threshold))


def _run(study, variant, r, data, model_cfg, train_cfg) -> RunResult:
    model, history, m = run_training(data, model_cfg, train_cfg)
    return RunResult(study, variant, r, train_cfg.seed, m.accuracy, m.rmse, m.train_seconds,
                     accepting_sparsity(model), max(h.train_reg for h in history))


@dataclass
class AblationTable:
    title: str
    row_labels: list[str]
    runs: list[RunResult] = field(default_factory=list)

    def rows_for(self, variant):
        return [r for r in self.runs if r.variant == variant]

    def summary(self) -> list[dict]:
        """Best/average accuracy and RMSE per variant, plus medians."""
        out = []
        for v in self.row_labels:
            rs = self.rows_for(v)
            acc = [r.accuracy for r in rs if r.accuracy is not None]
            err = [r.rmse for r in rs if r.rmse is not None]
            sp = [r.sparsity for r in rs if r.sparsity is not None]
            out.append({
                "variant": v,
                "best_accuracy": max(acc) if acc else None,
                "average_accuracy": float(np.mean(acc)) if acc else None,
                "best_rmse": min(err) if err else None,
                "average_rmse": float(np.mean(err)) if err else None,
                "median_accuracy": float(np.median(acc)) if acc else None,
                "median_rmse": float(np.median(err)) if err else None,
                "median_sparsity": float(np.median(sp)) if sp else None,
                "repeats": len(rs),
            })
        return out

    def table(self) -> list[list]:
        """Rows of ``[variant, best acc, avg acc, best RMSE, avg RMSE]``."""
        return [[s["variant"], s["best_accuracy"], s["average_accuracy"], s["best_rmse"], s["average_rmse"]]
                for s in self.summary()]

    def report(self) -> str:
        head = ["", "Best Accuracy", "Average Accuracy", "Best RMSE", "Average RMSE"]
        lines = [self.title, "\t".join(head)]
        for row in self.table():
            lines.append("\t".join([row[0]] + [_pct(row[1]), _pct(row[2]), _num(row[3]), _num(row[4])]))
        lines.append("(fourth column is the average RMSE)")
        return "\n".join(lines) + "\n"


def _pct(x):
    return "-" if x is None else f"{100 * x:.1f}%"


def _num(x):
    return "-" if x is None else f"{x:.4f}"


def _fmt_secs(s):
    return f"{int(s // 60)}'{int(round(s % 60)):02d}\""


def _csv(kind: str, header: list[str], rows: list[list]) -> str:
    """CSV text behind a ``# mtbf-<kind> version=N`` line; floats at 17 significant digits."""
    buf = io.StringIO()
    buf.write(f"# mtbf-{kind} version={OUTPUT_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else format(v, ".17g") if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def runs_csv(runs: list[RunResult], include_time: bool = False) -> str:
    """One row per run. Wall-clock is left out by default so reruns stay byte-identical."""
    cols = [f.name for f in dataclasses.fields(RunResult) if include_time or f.name != "seconds"]
    return _csv("runs", cols, [[getattr(r, c) for c in cols] for r in runs])


def metrics_csv(m: Metrics, split: str) -> str:
    header = ["split", "n", "accuracy", "binary_accuracy", "rmse", "loss"]
    header += [f"confusion_{t}_{p}" for t in range(4) for p in range(4)]
    row = [split, m.n, m.accuracy, m.binary_accuracy, m.rmse, m.loss]
    row += [int(v) for v in m.confusion.ravel()] if m.confusion is not None else [None] * 16
    return _csv("metrics", header, [row])


def history_csv(history: list[EpochRecord]) -> str:
    cols = [f.name for f in dataclasses.fields(EpochRecord)]
    return _csv("history", cols, [[getattr(h, c) for c in cols] for h in history])


def confusion_text(m: Metrics) -> str:
    width = max(len(n) for n in CLASS_NAMES)
    lines = ["true \\ predicted".ljust(width) + "".join(f"{n[:10]:>12}" for n in CLASS_NAMES)]
    for name, row in zip(CLASS_NAMES, m.confusion):
        lines.append(name.ljust(width) + "".join(f"{v:>12d}" for v in row))
    return "\n".join(lines)


def ablate_encoding(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    enc: gaf_codec.EncodingConfig, repeats: int = 5, cache_dir=None,
                    encodings: Sequence[str] = gaf_codec.ENCODINGS) -> AblationTable:
    table = AblationTable("Effectiveness of GAF", list(encodings))
    for kind in encodings:
        data = prepare(dataset, dataclasses.replace(enc, kind=kind), cache_dir)
        for r in range(repeats):
            tc = dataclasses.replace(train_cfg, seed=train_cfg.seed + r)
            table.runs.append(_run("encoding", kind, r, data, model_cfg, tc))
            log.info("encoding %s repeat %d: %s", kind, r, table.runs[-1])
    return table


def ablate_regularization(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                          enc: gaf_codec.EncodingConfig, repeats: int = 5, cache_dir=None) -> AblationTable:
    from .mtl_model import REG_SCHEMES
    table = AblationTable("Effectiveness of L1/L2 regularization", list(REG_SCHEMES))
    data = prepare(dataset, enc, cache_dir)
    for scheme in REG_SCHEMES:
        mc = dataclasses.replace(model_cfg, reg_scheme=scheme)
        for r in range(repeats):
            tc = dataclasses.replace(train_cfg, seed=train_cfg.seed + r)
            table.runs.append(_run("regularization", scheme, r, data, mc, tc))
            log.info("regularization %s repeat %d: %s", scheme, r, table.runs[-1])
    return table


MTL_COLUMNS = (
    ("Multi-source-input MTL", "multi_task", ""),
    ("MTL-Task 1 (classification)", "task1_only", "classification"),
    ("MTL-Task 1 (regression)", "task1_only", "regression"),
    ("MTL-Task 2 (classification)", "task2_only", "classification"),
    ("MTL-Task 2 (regression)", "task2_only", "regression"),
)


@dataclass
class MTLComparison:
    runs: list[RunResult] = field(default_factory=list)

    def column(self, label: str) -> dict:
        rs = [r for r in self.runs if r.variant == label]
        acc = [r.accuracy for r in rs if r.accuracy is not None]
        err = [r.rmse for r in rs if r.rmse is not None]
        return {
            "accuracy": float(np.median(acc)) if acc else None,
            "rmse": float(np.median(err)) if err else None,
            "seconds": float(np.median([r.seconds for r in rs])) if rs else None,
        }

    def table(self) -> dict[str, dict]:
        return {label: self.column(label) for label, _, _ in MTL_COLUMNS}

    def report(self) -> str:
        t = self.table()
        labels = [c[0] for c in MTL_COLUMNS]
        lines = ["Comparison of MTL and single-task learning", "\t" + "\t".join(labels)]
        lines.append("Accuracy\t" + "\t".join(_pct(t[c]["accuracy"]) for c in labels))
        lines.append("RMSE\t" + "\t".join(_num(t[c]["rmse"]) for c in labels))
        lines.append("Time\t" + "\t".join(_fmt_secs(t[c]["seconds"]) for c in labels))
        return "\n".join(lines) + "\n"


def ablate_mtl(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
               enc: gaf_codec.EncodingConfig, repeats: int = 1, cache_dir=None) -> MTLComparison:
    data = prepare(dataset, enc, cache_dir)
    out = MTLComparison()
    for label, mode, output in MTL_COLUMNS:
        mc = dataclasses.replace(model_cfg, mode=mode, single_output=output)
        for r in range(repeats):
            tc = dataclasses.replace(train_cfg, seed=train_cfg.seed + r)
            out.runs.append(_run("mtl", label, r, data, mc, tc))
            log.info("mtl %s repeat %d: %s", label, r, out.runs[-1])
    return out
