"""Minimal reverse-mode differentiation for the layers the network needs.

Each layer caches what its backward pass needs during ``forward`` and, in
``backward``, accumulates parameter gradients into ``Param.grad`` and returns
the gradient with respect to its input. Tensors are float64 numpy arrays in
NHWC layout (or ``(batch, features)`` for dense layers).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

REG_KINDS = ("l1", "l2", "none")


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Param:
    """A learnable tensor with its gradient buffer and regularization tag."""

    def __init__(self, value: np.ndarray, name: str = "", reg: str = "none", lam: float = 0.0):
        if reg not in REG_KINDS:
            raise ValueError(f"unknown regularization {reg!r}")
        if lam < 0:
            raise ValueError(f"{name}: regularization strength must be >= 0, got {lam}")
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.reg = reg
        self.lam = float(lam)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, reg={self.reg}, lam={self.lam})"


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# layers


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense",
                 reg: str = "l2", lam: float = 0.0):
        self.name = name
        self.W = Param(uniform_fan_in(rng, (n_in, n_out), n_in), f"{name}.W", reg, lam)
        self.b = Param(np.zeros(n_out), f"{name}.b")
        self._x = None

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise ShapeError(f"{self.name}: expected (batch, {self.W.shape[0]}), got {x.shape}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.W.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        return dout @ self.W.value.T


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # b, h, w, c, k, k
    b, h, w, c = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def conv2d_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding that keeps the spatial size."""
    k = kernel.shape[0]
    b, h, w, _ = x.shape
    return (_im2col(x, k) @ kernel.reshape(-1, kernel.shape[-1])).reshape(b, h, w, -1)


class Conv2D:
    """Same-padded, stride-1 convolution; no bias (every conv here feeds a batch norm)."""

    def __init__(self, k: int, c_in: int, c_out: int, rng: np.random.Generator, name: str = "conv",
                 reg: str = "l2", lam: float = 0.0):
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.name = name
        self.k = k
        self.K = Param(uniform_fan_in(rng, (k, k, c_in, c_out), k * k * c_in), f"{name}.K", reg, lam)
        self._cols = None
        self._shape = None
        self.need_input_grad = True

    @property
    def params(self):
        return [self.K]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[-1] != self.K.shape[2]:
            raise ShapeError(f"{self.name}: expected (b, h, w, {self.K.shape[2]}), got {x.shape}")
        self._shape = x.shape
        self._cols = _im2col(x, self.k)
        b, h, w, _ = x.shape
        return (self._cols @ self.K.value.reshape(-1, self.K.shape[-1])).reshape(b, h, w, -1)

    def backward(self, dout: np.ndarray):
        c_out = self.K.shape[-1]
        self.K.grad += (self._cols.T @ dout.reshape(-1, c_out)).reshape(self.K.shape)
        if not self.need_input_grad:
            return None
        flipped = self.K.value[::-1, ::-1].transpose(0, 1, 3, 2)
        return conv2d_same(dout, flipped)


class BatchNorm:
    """Per-channel batch normalization over every axis but the last."""

    def __init__(self, channels: int, name: str = "bn", eps: float = 1e-5, momentum: float = 0.1):
        self.name = name
        self.gamma = Param(np.ones(channels), f"{name}.gamma")
        self.beta = Param(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    @property
    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, train: bool = True, update_stats: bool = True) -> np.ndarray:
        if x.shape[-1] != self.gamma.shape[0]:
            raise ShapeError(f"{self.name}: expected {self.gamma.shape[0]} channels, got {x.shape[-1]}")
        axes = tuple(range(x.ndim - 1))
        if train:
            if x.shape[0] < 2:
                raise ShapeError(f"{self.name}: batch norm in train mode needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mean
                self.running_var = (1 - m) * self.running_var + m * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, axes, train)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, axes, train = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=axes)
        self.beta.grad += dout.sum(axis=axes)
        dxhat = dout * self.gamma.value
        if not train:
            return dxhat * inv_std
        M = xhat.size // xhat.shape[-1]
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        return inv_std / M * (M * dxhat - s1 - xhat * s2)


class ReLU:
    def __init__(self):
        self._mask = None
        self.params = []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class MaxPool2:
    """2x2 max pooling, stride 2. Ties route the gradient to the first window element."""

    def __init__(self):
        self._arg = None
        self._shape = None
        self.params = []

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
        win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
        self._arg = win.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        b, h, w, c = self._shape
        win = np.zeros((b, h // 2, w // 2, c, 4))
        np.put_along_axis(win, self._arg[..., None], dout[..., None], axis=-1)
        return win.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_crossentropy(logits: np.ndarray, target: np.ndarray):
    """Mean cross-entropy over the batch; returns ``(loss, dlogits, probs)``."""
    target = np.asarray(target, dtype=int)
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(b), target]))
    probs = np.exp(z - logsum[:, None])
    d = probs.copy()
    d[np.arange(b), target] -= 1.0
    return loss, d / b, probs


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared residual over the batch; returns ``(loss, dpred)``."""
    r = pred.reshape(-1) - np.asarray(target, dtype=np.float64).reshape(-1)
    return float(np.mean(r * r)), (2.0 * r / r.size).reshape(pred.shape)


# ---------------------------------------------------------------------------
# regularization


def reg_penalty(p: Param, squared_l2: bool = True) -> float:
    if p.reg == "none" or p.lam == 0.0:
        return 0.0
    if p.lam < 0:
        raise ValueError(f"{p.name}: negative regularization strength")
    if p.reg == "l1":
        return p.lam * float(np.abs(p.value).sum())
    if squared_l2:
        return p.lam * float(np.sum(p.value * p.value))
    return p.lam * float(np.sqrt(np.sum(p.value * p.value)))


def reg_grad(p: Param, squared_l2: bool = True) -> np.ndarray:
    if p.reg == "none" or p.lam == 0.0:
        return np.zeros_like(p.value)
    if p.lam < 0:
        raise ValueError(f"{p.name}: negative regularization strength")
    if p.reg == "l1":
        return p.lam * np.sign(p.value)
    if squared_l2:
        return 2.0 * p.lam * p.value
    norm = np.sqrt(np.sum(p.value * p.value))
    return p.lam * p.value / norm if norm > 0 else np.zeros_like(p.value)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 1.0
    clip_mode: str = "global"  # or "elementwise"
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def clip_grads(self, params: list[Param]) -> float:
        """Clip in place; returns the pre-clip global norm."""
        norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)))
        if not np.isfinite(norm):
            bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
            raise NumericError(f"non-finite gradient in {', '.join(bad)}")
        if self.clip is None:
            return norm
        if self.clip_mode == "global":
            if norm > self.clip:
                scale = self.clip / norm
                for p in params:
                    p.grad *= scale
        elif self.clip_mode == "elementwise":
            for p in params:
                np.clip(p.grad, -self.clip, self.clip, out=p.grad)
        else:
            raise ValueError(f"unknown clip mode {self.clip_mode!r}")
        return norm

    def step(self, params: list[Param]) -> float:
        norm = self.clip_grads(params)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in params:
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.value -= self.lr * (m / c1) / denom
        return norm


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_probed: int
    worst: str
    n_skipped: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(fragment, params: list[Param], n_probe: int = 50, h: float = 1e-5, seed: int = 0,
               floor: float = 1e-8, kink_signature=None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``fragment(backward)`` must return the scalar loss; when ``backward`` is
    true it must also fill ``grad`` of every param (grads are zeroed here
    first). At least ``n_probe`` entries are probed, spread evenly over the
    params. Relative error is ``|a - n| / max(|a|, |n|, floor)``.

    ``kink_signature()``, when given, summarizes the piecewise-linear
    decisions (ReLU masks, pooling argmaxes) of the last forward pass. A probe
    whose +/-h evaluations change that signature straddles a kink; the step is
    shrunk (down to h/100) and the probe is skipped if it still straddles one.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    fragment(True)
    base_sig = kink_signature() if kink_signature else None
    analytic = [p.grad.copy() for p in params]
    # spread probes over every tensor so small tensors are not drowned out by large ones
    per = max(1, -(-n_probe // len(params)))
    probes = []
    for pi, p in enumerate(params):
        ids = np.arange(p.value.size) if p.value.size <= per else rng.choice(p.value.size, per, replace=False)
        probes += [(pi, int(i)) for i in ids]
    worst, worst_name, skipped = 0.0, "", 0
    for pi, flat in probes:
        p = params[pi]
        idx = np.unravel_index(flat, p.value.shape)
        orig = p.value[idx]
        num = None
        for step in (h, h / 10, h / 100) if kink_signature else (h,):
            p.value[idx] = orig + step
            f_plus = fragment(False)
            clean = kink_signature is None or kink_signature() == base_sig
            p.value[idx] = orig - step
            f_minus = fragment(False)
            clean = clean and (kink_signature is None or kink_signature() == base_sig)
            p.value[idx] = orig
            if clean:
                num = (f_plus - f_minus) / (2 * step)
                break
        if num is None:
            skipped += 1
            continue
        a = analytic[pi][idx]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        if err > worst:
            worst, worst_name = err, f"{p.name}{list(idx)}"
    return GradCheckReport(float(worst), len(probes) - skipped, worst_name, skipped)
