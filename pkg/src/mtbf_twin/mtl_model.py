"""Multi-source-input multi-task network.

Task 1 (defects) reads the GAF image through a small residual CNN; task 2
(springback) reads the standardized virtual parameters through one dense
layer. Features cross over in two places::

    image -> Conv1-BN1-MaxPool-ReLU1 -+-> Conv2_1-BN2_1-ReLU2_1-Conv2_2-BN2_2-ReLU2_2 -+
                                      +-> ConvSkip-BNSkip-ReLUSkip -------------------+-> Addition1
    Addition1 -> flatten -> FCN1 (sharing) -+-> Addition2 -> FCN2 (accepting) -> softmax
    virtual -> FCN3 (sharing) --------------+
    FCN1 -> FCN4 -> FCN5 -> [FCN3, FCN5] -> FCN6 (accepting) -> springback

Sharing layers carry L2 and accepting layers L1 penalties at the same
strength; every other weight gets a weaker global L2 penalty.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import apply_overrides

MODES = ("multi_task", "task1_only", "task2_only")
REG_SCHEMES = ("l1_l2", "l1_only", "l2_only", "none")
SHARING = ("FCN1", "FCN3")
ACCEPTING = ("FCN2", "FCN6")

CKPT_MAGIC = b"MTBFCKPT"
CKPT_VERSION = 1
N_CLASSES = 4
N_VIRTUAL = 5


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    conv1_channels: int = 16
    conv2_channels: int = 32
    shared_width: int = 64
    task2_hidden: int = 64
    lam_share: float = 0.00025
    lam_accept: float = 0.00025
    lam_global: float = 0.0001
    gamma: float = 3.0  # springback MSE weight; tuned on the validation split
    mode: str = "multi_task"
    # task1_only / task2_only heads: "classification" or "regression"
    single_output: str = ""
    reg_scheme: str = "l1_l2"
    fusion: str = "concat"  # FCN3/FCN5 fusion into FCN6: "concat" or "sum"
    squared_l2: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"invalid mode {self.mode!r}; expected one of {MODES}")
        if self.reg_scheme not in REG_SCHEMES:
            raise ValueError(f"invalid regularization scheme {self.reg_scheme!r}; expected one of {REG_SCHEMES}")
        if self.fusion not in ("concat", "sum"):
            raise ValueError(f"invalid fusion {self.fusion!r}")
        if self.single_output not in ("", "classification", "regression"):
            raise ValueError(f"invalid single_output {self.single_output!r}")
        for name in ("image_size", "conv1_channels", "conv2_channels", "shared_width", "task2_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_size % 2:
            raise ValueError("image_size must be even (one 2x2 max pooling)")
        for name in ("lam_share", "lam_accept", "lam_global", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def output(self) -> str:
        """Head produced by a single-task model; empty for multi_task."""
        if self.mode == "multi_task":
            return ""
        if self.single_output:
            return self.single_output
        return "classification" if self.mode == "task1_only" else "regression"

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        return apply_overrides(cls(), values, "model")


def regularization_tags(cfg: ModelConfig, layer: str) -> tuple[str, float]:
    scheme = cfg.reg_scheme
    if scheme == "none":
        return "none", 0.0
    if layer in ACCEPTING:
        return ("l1", cfg.lam_accept) if scheme in ("l1_l2", "l1_only") else ("l2", cfg.lam_accept)
    if scheme == "l1_only":
        return "none", 0.0
    if layer in SHARING:
        return "l2", cfg.lam_share
    return "l2", cfg.lam_global


@dataclass
class Prediction:
    probs: np.ndarray | None  # (b, 4)
    springback: np.ndarray | None  # (b,)


@dataclass
class Batch:
    images: np.ndarray
    virtual: np.ndarray
    labels: np.ndarray | None = None
    springback: np.ndarray | None = None

    def __len__(self):
        return len(self.virtual)


class MTLNet:
    """Network parameters, running statistics, optimizer state and input standardization."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = cfg = config
        self.seed = seed
        self.epoch = 0
        self.optimizer = dc.Adam()
        self.virtual_mean: np.ndarray | None = None
        self.virtual_std: np.ndarray | None = None
        rng = np.random.default_rng(seed)
        self.layers: dict = {}

        def tagged(layer):
            return dict(zip(("reg", "lam"), regularization_tags(cfg, layer)))

        c1, c2, w = cfg.conv1_channels, cfg.conv2_channels, cfg.shared_width
        half = cfg.image_size // 2
        uses_image = cfg.mode in ("multi_task", "task1_only")
        uses_virtual = cfg.mode in ("multi_task", "task2_only")
        out = cfg.output
        if uses_image:
            L = self.layers
            L["Conv1"] = dc.Conv2D(3, 3, c1, rng, "Conv1", **tagged("Conv1"))
            L["Conv1"].need_input_grad = False
            L["BN1"] = dc.BatchNorm(c1, "BN1")
            L["Conv2_1"] = dc.Conv2D(3, c1, c2, rng, "Conv2_1", **tagged("Conv2_1"))
            L["BN2_1"] = dc.BatchNorm(c2, "BN2_1")
            L["Conv2_2"] = dc.Conv2D(3, c2, c2, rng, "Conv2_2", **tagged("Conv2_2"))
            L["BN2_2"] = dc.BatchNorm(c2, "BN2_2")
            L["ConvSkip"] = dc.Conv2D(1, c1, c2, rng, "ConvSkip", **tagged("ConvSkip"))
            L["BNSkip"] = dc.BatchNorm(c2, "BNSkip")
            L["FCN1"] = dc.Dense(half * half * c2, w, rng, "FCN1", **tagged("FCN1"))
            head = N_CLASSES if out in ("", "classification") else 1
            L["FCN2"] = dc.Dense(w, head, rng, "FCN2", **tagged("FCN2"))
        if uses_virtual:
            self.layers["FCN3"] = dc.Dense(N_VIRTUAL, w, rng, "FCN3", **tagged("FCN3"))
        if cfg.mode == "multi_task":
            h = cfg.task2_hidden
            self.layers["FCN4"] = dc.Dense(w, h, rng, "FCN4", **tagged("FCN4"))
            self.layers["FCN5"] = dc.Dense(h, w, rng, "FCN5", **tagged("FCN5"))
            fan = 2 * w if cfg.fusion == "concat" else w
            self.layers["FCN6"] = dc.Dense(fan, 1, rng, "FCN6", **tagged("FCN6"))
        elif cfg.mode == "task2_only":
            head = 1 if out == "regression" else N_CLASSES
            self.layers["FCN6"] = dc.Dense(w, head, rng, "FCN6", **tagged("FCN6"))
        self._relus = {k: dc.ReLU() for k in ("ReLU1", "ReLU2_1", "ReLU2_2", "ReLUSkip",
                                                "ReLU_FCN1", "ReLU_FCN3", "ReLU_FCN4", "ReLU_FCN5")}
        self._pool = dc.MaxPool2()
        self._cache: dict = {}

    # -- bookkeeping ---------------------------------------------------------

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def has_classifier(self) -> bool:
        return self.config.mode == "multi_task" or self.config.output == "classification"

    @property
    def has_regressor(self) -> bool:
        return self.config.mode == "multi_task" or self.config.output == "regression"

    def params(self) -> list[dc.Param]:
        return [p for layer in self.layers.values() for p in layer.params]

    def weight_params(self) -> list[dc.Param]:
        """Weights subject to regularization (biases and BN scale/shift excluded)."""
        return [p for p in self.params() if p.name.endswith((".W", ".K"))]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def census(self) -> list[tuple[str, str, tuple, str, float]]:
        rows = []
        for name, layer in self.layers.items():
            for p in layer.params:
                rows.append((name, p.name, p.shape, p.reg, p.lam))
        return rows

    def set_standardization(self, virtual: np.ndarray):
        virtual = np.asarray(virtual, dtype=np.float64)
        self.virtual_mean = virtual.mean(axis=0)
        std = virtual.std(axis=0)
        self.virtual_std = np.where(std > 0, std, 1.0)

    def init_regression_bias(self, value: float):
        if self.has_regressor:
            head = "FCN6" if "FCN6" in self.layers else "FCN2"
            self.layers[head].b.value[:] = value

    def standardize(self, virtual: np.ndarray) -> np.ndarray:
        if self.virtual_mean is None:
            raise ValueError("virtual inputs are unstandardized: call set_standardization() with training data first")
        return (np.asarray(virtual, dtype=np.float64) - self.virtual_mean) / self.virtual_std

    # -- forward / backward --------------------------------------------------

    def _bn(self, name, x, train, update):
        return self.layers[name].forward(x, train, update)

    def forward(self, images, virtual, train: bool = False, update_stats: bool = True):
        """Return ``(logits or None, springback or None)``; caches for :meth:`backward`."""
        cfg = self.config
        L, R = self.layers, self._relus
        c = self._cache = {}
        h1 = h3 = None
        if "Conv1" in L:
            images = np.asarray(images, dtype=np.float64)
            S = cfg.image_size
            if images.ndim != 4 or images.shape[1:] != (S, S, 3):
                raise dc.ShapeError(f"expected images of shape (b, {S}, {S}, 3), got {images.shape}")
            x = self._bn("BN1", L["Conv1"].forward(images), train, update_stats)
            x = R["ReLU1"].forward(self._pool.forward(x))
            t = R["ReLU2_1"].forward(self._bn("BN2_1", L["Conv2_1"].forward(x), train, update_stats))
            t = R["ReLU2_2"].forward(self._bn("BN2_2", L["Conv2_2"].forward(t), train, update_stats))
            s = R["ReLUSkip"].forward(self._bn("BNSkip", L["ConvSkip"].forward(x), train, update_stats))
            a1 = dc.add(t, s)
            c["a1_shape"] = a1.shape
            h1 = R["ReLU_FCN1"].forward(L["FCN1"].forward(a1.reshape(a1.shape[0], -1)))
        if "FCN3" in L:
            v = self.standardize(virtual)
            if v.ndim != 2 or v.shape[1] != N_VIRTUAL:
                raise dc.ShapeError(f"expected virtual inputs of shape (b, {N_VIRTUAL}), got {v.shape}")
            h3 = R["ReLU_FCN3"].forward(L["FCN3"].forward(v))
        if h1 is not None and h3 is not None and h1.shape[0] != h3.shape[0]:
            raise dc.ShapeError("image and virtual batches differ in size")

        logits = sb = None
        if self.mode == "multi_task":
            logits = L["FCN2"].forward(dc.add(h1, h3))
            h5 = R["ReLU_FCN5"].forward(L["FCN5"].forward(R["ReLU_FCN4"].forward(L["FCN4"].forward(h1))))
            fused = np.concatenate([h3, h5], axis=1) if cfg.fusion == "concat" else dc.add(h3, h5)
            sb = L["FCN6"].forward(fused)[:, 0]
        elif self.mode == "task1_only":
            out = L["FCN2"].forward(h1)
            logits, sb = (out, None) if cfg.output == "classification" else (None, out[:, 0])
        else:
            out = L["FCN6"].forward(h3)
            logits, sb = (out, None) if cfg.output == "classification" else (None, out[:, 0])
        return logits, sb

    def backward(self, dlogits=None, dsb=None):
        cfg = self.config
        L, R = self.layers, self._relus
        dh1 = dh3 = None
        if self.mode == "multi_task":
            da2 = L["FCN2"].backward(dlogits)
            dh1, dh3 = da2.copy(), da2.copy()
            dfused = L["FCN6"].backward(dsb[:, None])
            if cfg.fusion == "concat":
                w = cfg.shared_width
                dh3 += dfused[:, :w]
                dh5 = dfused[:, w:]
            else:
                dh3 += dfused
                dh5 = dfused
            dh4 = L["FCN5"].backward(R["ReLU_FCN5"].backward(dh5))
            dh1 += L["FCN4"].backward(R["ReLU_FCN4"].backward(dh4))
        elif self.mode == "task1_only":
            dout = dlogits if cfg.output == "classification" else dsb[:, None]
            dh1 = L["FCN2"].backward(dout)
        else:
            dout = dlogits if cfg.output == "classification" else dsb[:, None]
            dh3 = L["FCN6"].backward(dout)
        if dh3 is not None:
            L["FCN3"].backward(R["ReLU_FCN3"].backward(dh3))
        if dh1 is not None:
            da1 = L["FCN1"].backward(R["ReLU_FCN1"].backward(dh1)).reshape(self._cache["a1_shape"])
            ds = L["BNSkip"].backward(R["ReLUSkip"].backward(da1))
            dx = L["ConvSkip"].backward(ds)
            dt = L["BN2_2"].backward(R["ReLU2_2"].backward(da1))
            dt = L["BN2_1"].backward(R["ReLU2_1"].backward(L["Conv2_2"].backward(dt)))
            dx = dx + L["Conv2_1"].backward(dt)
            dx = L["BN1"].backward(self._pool.backward(R["ReLU1"].backward(dx)))
            L["Conv1"].backward(dx)

    def activation_signature(self) -> bytes:
        """Digest of every ReLU mask and pooling argmax from the last forward pass."""
        h = hashlib.sha256()
        for relu in self._relus.values():
            if relu._mask is not None:
                h.update(np.packbits(relu._mask).tobytes())
        if self._pool._arg is not None:
            h.update(self._pool._arg.astype(np.int8).tobytes())
        return h.digest()

    def predict(self, images, virtual) -> Prediction:
        logits, sb = self.forward(images, virtual, train=False)
        probs = dc.softmax(logits) if logits is not None else None
        return Prediction(probs, sb)

    # -- loss ----------------------------------------------------------------

    def reg_penalty(self) -> float:
        return float(sum(dc.reg_penalty(p, self.config.squared_l2) for p in self.weight_params()))

    def joint_loss(self, batch: Batch, train: bool = True, backward: bool = True,
                   update_stats: bool = True) -> tuple[float, dict]:
        """CE + gamma * MSE + penalties; fills gradients when ``backward``."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        if self.has_classifier and batch.labels is None:
            raise ValueError("batch is missing defect labels")
        if self.has_regressor and batch.springback is None:
            raise ValueError("batch is missing springback targets")
        logits, sb = self.forward(batch.images, batch.virtual, train=train, update_stats=update_stats)
        parts = {"ce": 0.0, "mse": 0.0}
        dlogits = dsb = None
        if logits is not None:
            parts["ce"], dlogits, _ = dc.softmax_crossentropy(logits, batch.labels)
        if sb is not None:
            parts["mse"], dsb = dc.mse(sb, batch.springback)
        gamma = self.config.gamma if self.mode == "multi_task" else 1.0
        parts["reg"] = self.reg_penalty()
        loss = parts["ce"] + gamma * parts["mse"] + parts["reg"]
        if backward:
            self.zero_grad()
            self.backward(dlogits, gamma * dsb if dsb is not None else None)
            for p in self.weight_params():
                if p.reg != "none" and p.lam > 0:
                    p.grad += dc.reg_grad(p, self.config.squared_l2)
        return loss, parts

    def train_step(self, batch: Batch) -> float:
        loss, _ = self.joint_loss(batch, train=True, backward=True)
        if not np.isfinite(loss):
            raise dc.NumericError("non-finite loss")
        self.optimizer.step(self.params())
        return loss

    # -- state snapshot ------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        """Every array of the model state, in checkpoint order."""
        out = {}
        for name, layer in self.layers.items():
            for p in layer.params:
                out[p.name] = p.value
            if isinstance(layer, dc.BatchNorm):
                out[f"{name}.running_mean"] = layer.running_mean
                out[f"{name}.running_var"] = layer.running_var
        opt = self.optimizer
        for p in self.params():
            if p.name in opt.m:
                out[f"adam.m.{p.name}"] = opt.m[p.name]
                out[f"adam.v.{p.name}"] = opt.v[p.name]
        if self.virtual_mean is not None:
            out["std.virtual_mean"] = self.virtual_mean
            out["std.virtual_std"] = self.virtual_std
        return out


    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}

    def load_state_dict(self, records: dict[str, np.ndarray], step_count: int | None = None,
                        source: str = "state") -> None:
        """Install arrays produced by :meth:`arrays`; validates every name and shape first."""
        records = dict(records)
        for name, layer in self.layers.items():
            wanted = [(p.name, p.shape) for p in layer.params]
            if isinstance(layer, dc.BatchNorm):
                wanted += [(f"{name}.running_mean", layer.running_mean.shape),
                           (f"{name}.running_var", layer.running_var.shape)]
            for key, shape in wanted:
                if key not in records:
                    raise CheckpointError(f"{source}: missing record for layer {name} ({key})")
                if records[key].shape != shape:
                    raise CheckpointError(f"{source}: shape mismatch for layer {name} ({key}): "
                                          f"stored {records[key].shape} vs model {shape}")
        names = {p.name for p in self.params()}
        for key in records:
            if key.startswith(("adam.m.", "adam.v.")) and key[len("adam.m."):] not in names:
                raise CheckpointError(f"{source}: optimizer record for unknown parameter {key}")
        known = {key for layer in self.layers.values() for key in self._layer_keys(layer)}
        extra = [k for k in records if k not in known and not k.startswith(("adam.m.", "adam.v.", "std."))]
        if extra:
            raise CheckpointError(f"{source}: unexpected records {sorted(extra)}")

        for name, layer in self.layers.items():
            for p in layer.params:
                p.value = records[p.name].copy()
                p.grad = np.zeros_like(p.value)
            if isinstance(layer, dc.BatchNorm):
                layer.running_mean = records[f"{name}.running_mean"].copy()
                layer.running_var = records[f"{name}.running_var"].copy()
        opt = self.optimizer
        opt.m = {k[len("adam.m."):]: v.copy() for k, v in records.items() if k.startswith("adam.m.")}
        opt.v = {k[len("adam.v."):]: v.copy() for k, v in records.items() if k.startswith("adam.v.")}
        if set(opt.m) != set(opt.v):
            raise CheckpointError(f"{source}: optimizer first/second moments do not pair up")
        if step_count is not None:
            opt.step_count = step_count
        if "std.virtual_mean" in records:
            self.virtual_mean = records["std.virtual_mean"].copy()
            self.virtual_std = records["std.virtual_std"].copy()

    @staticmethod
    def _layer_keys(layer):
        keys = [p.name for p in layer.params]
        if isinstance(layer, dc.BatchNorm):
            keys += [f"{layer.name}.running_mean", f"{layer.name}.running_var"]
        return keys


def build_model(config: ModelConfig | None = None, seed: int = 0) -> MTLNet:
    return MTLNet(config or ModelConfig(), seed)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "MTBFCKPT" | u32 version | u16 len + mode tag | u32 len + JSON meta
#   u32 record count | records: u16 name len, name, u8 rank, u32 dims..., float64 LE data
#   u32 CRC-32 of everything above
#
# Records are ordered: layer params and running stats, Adam moments, input
# standardization constants.


def _pack_record(buf: io.BytesIO, name: str, arr: np.ndarray):
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def save_checkpoint(model: MTLNet, path: str | Path) -> None:
    opt = model.optimizer
    meta = {
        "config": dataclasses.asdict(model.config),
        "seed": model.seed,
        "epoch": model.epoch,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                 "clip": opt.clip, "clip_mode": opt.clip_mode, "step_count": opt.step_count},
    }
    arrays = model.arrays()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    tag = model.mode.encode()
    buf.write(struct.pack("<H", len(tag)) + tag)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_raw)) + meta_raw)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _pack_record(buf, name, arr)
    payload = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path, expect_mode: str | None = None) -> MTLNet:
    """Rebuild a model from ``path``; nothing is returned unless the whole file validates."""
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 8 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated file)")
    r = _Reader(payload)
    r.take(len(CKPT_MAGIC))
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (tag_len,) = r.unpack("<H")
    mode = r.take(tag_len).decode()
    if expect_mode is not None and mode != expect_mode:
        raise CheckpointError(f"{path}: checkpoint mode {mode!r} does not match expected {expect_mode!r}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    cfg = ModelConfig(**meta["config"])
    if cfg.mode != mode:
        raise CheckpointError(f"{path}: mode tag {mode!r} disagrees with stored config {cfg.mode!r}")
    (count,) = r.unpack("<I")
    records = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        records[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after records")

    model = MTLNet(cfg, meta["seed"])
    a = meta["adam"]
    model.optimizer = dc.Adam(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], clip=a["clip"],
                              clip_mode=a["clip_mode"])
    model.load_state_dict(records, step_count=a["step_count"], source=str(path))
    model.epoch = meta["epoch"]
    return model
