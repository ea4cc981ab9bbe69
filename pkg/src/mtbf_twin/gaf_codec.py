"""Series-to-image encoding with Gramian angular summation fields.

Pipeline: rescale to [-1, 1] (min-max, or the exponential feature-enhanced
variant) -> polar angles -> GASF matrix -> bicubic resize to S x S ->
colormap lookup. Padding baselines replicate boundary values up to a fixed
length and then go through the min-max pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLAMP_TOL = 1e-12
ENCODINGS = ("gaf_fe", "gaf_original", "padding_be", "padding_l", "padding_r")
PAD_MODES = {"padding_be": "both_ends", "padding_l": "left", "padding_r": "right"}

# dark blue -> cyan -> green -> yellow -> red
DEFAULT_ANCHORS = (
    (0.0, 0.0, 0.5),
    (0.0, 1.0, 1.0),
    (0.0, 1.0, 0.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 0.0),
)


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedSeries:
    values: np.ndarray
    rescale_kind: str


@dataclass(frozen=True)
class PolarSeries:
    theta: np.ndarray
    radius: np.ndarray


@dataclass
class EncodingConfig:
    kind: str = "gaf_fe"
    image_size: int = 64
    colormap_size: int = 256
    # padding baselines extend every series to this length
    pad_length: int = 128
    anchors: tuple = DEFAULT_ANCHORS
    colormap_file: str | None = None
    _cmap: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def colormap(self) -> np.ndarray:
        if self._cmap is None:
            if self.colormap_file:
                self._cmap = load_colormap(self.colormap_file)
            else:
                self._cmap = anchor_colormap(self.anchors, self.colormap_size)
        return self._cmap


def _check_series(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 1 or X.size < 2:
        raise EncodingError("need a 1-D series with at least 2 points")
    if not np.all(np.isfinite(X)):
        raise EncodingError("series contains non-finite values")
    if X.max() == X.min():
        raise EncodingError("constant series cannot be rescaled (max == min)")
    return X


def rescale_mean(X) -> NormalizedSeries:
    X = _check_series(X)
    hi, lo = X.max(), X.min()
    x = ((X - hi) + (X - lo)) / (hi - lo)
    return NormalizedSeries(np.clip(x, -1.0, 1.0), "mean")


def rescale_exp(X) -> NormalizedSeries:
    """Exponential rescaling that stretches fluctuations near the series maximum.

    Evaluated on ``X - max(X)``: numerator and denominator both pick up the
    factor ``exp(-max(X))``, so the result equals the unshifted formula while
    never overflowing for large positive inputs.
    """
    X = _check_series(X)
    shifted = X - X.max()
    e = np.exp(shifted)
    e_lo = np.exp(shifted.min())
    denom = 1.0 - e_lo
    if denom <= 0.0:
        raise EncodingError("series range too small for exponential rescaling (exp(min) == exp(max))")
    x = ((e - 1.0) + (e - e_lo)) / denom
    return NormalizedSeries(np.clip(x, -1.0, 1.0), "exponential")


def to_polar(x: NormalizedSeries | np.ndarray) -> PolarSeries:
    vals = np.asarray(x.values if isinstance(x, NormalizedSeries) else x, dtype=np.float64)
    if np.any(np.abs(vals) > 1.0 + CLAMP_TOL):
        raise EncodingError("normalized values must lie in [-1, 1]")
    vals = np.clip(vals, -1.0, 1.0)
    n = vals.size
    return PolarSeries(np.arccos(vals), np.arange(1, n + 1) / n)


def gasf(polar: PolarSeries) -> np.ndarray:
    th = polar.theta
    if th.size < 2:
        raise EncodingError("GASF needs at least 2 points")
    return np.cos(th[:, None] + th[None, :])


def gasf_algebraic(x: np.ndarray) -> np.ndarray:
    """``x_i x_j - sqrt(1 - x_i^2) sqrt(1 - x_j^2)``; same matrix as :func:`gasf`."""
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    return np.outer(x, x) - np.outer(s, s)


def keys_kernel(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    s = np.abs(s)
    out = np.zeros_like(s)
    near = s <= 1
    far = (s > 1) & (s < 2)
    out[near] = (a + 2) * s[near] ** 3 - (a + 3) * s[near] ** 2 + 1
    out[far] = a * s[far] ** 3 - 5 * a * s[far] ** 2 + 8 * a * s[far] - 4 * a
    return out


def cubic_weights(n: int, S: int, a: float = -0.5) -> np.ndarray:
    """``S x n`` resampling matrix, corner-aligned, border taps clamped onto the edge."""
    if n == S:
        return np.eye(n)
    pos = np.arange(S) * (n - 1) / (S - 1)
    base = np.floor(pos).astype(int)
    frac = pos - base
    W = np.zeros((S, n))
    for k in range(-1, 3):
        w = keys_kernel(frac - k, a)
        idx = np.clip(base + k, 0, n - 1)
        np.add.at(W, (np.arange(S), idx), w)
    return W


def _resample_rows(G: np.ndarray, S: int, a: float) -> np.ndarray:
    """Resample axis 0 as ``G[base] + sum_k w_k (G[tap_k] - G[base])``.

    Same result as ``cubic_weights(n, S) @ G`` up to rounding, but a constant
    field gives all-zero differences and so comes back bitwise unchanged.
    """
    n = G.shape[0]
    pos = np.arange(S) * (n - 1) / (S - 1)
    base = np.floor(pos).astype(int)
    frac = (pos - base)[:, None]
    ref = G[base]
    out = ref.copy()
    for k in (-1, 1, 2):
        out += keys_kernel(frac - k, a) * (G[np.clip(base + k, 0, n - 1)] - ref)
    return out


def resize_bicubic(G: np.ndarray, S: int, a: float = -0.5) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise EncodingError("expected a square matrix")
    n = G.shape[0]
    if n < 4:
        raise EncodingError(f"bicubic resize needs n >= 4, got {n}")
    if S < 2:
        raise EncodingError("target size must be >= 2")
    if S == n:
        return G.copy()
    return np.clip(_resample_rows(_resample_rows(G, S, a).T, S, a).T, -1.0, 1.0)


def anchor_colormap(anchors, m: int = 256) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    xs = np.linspace(0.0, 1.0, len(anchors))
    q = np.linspace(0.0, 1.0, m)
    return np.stack([np.interp(q, xs, anchors[:, c]) for c in range(3)], axis=1)


def load_colormap(path: str | Path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    cmap = np.array(rows, dtype=np.float64)
    if cmap.ndim != 2 or cmap.shape[1] != 3 or cmap.shape[0] < 2:
        raise EncodingError(f"{path}: colormap must have m >= 2 rows of 3 floats")
    if cmap.min() < 0 or cmap.max() > 1:
        raise EncodingError(f"{path}: colormap values must be in [0, 1]")
    return cmap


def colormap_index(Gs: np.ndarray, m: int) -> np.ndarray:
    """1-based row index: [-1, 1] mapped linearly onto [1, m], rounded half up."""
    pos = (np.asarray(Gs) + 1.0) * 0.5 * (m - 1) + 1.0
    return np.clip(np.floor(pos + 0.5).astype(int), 1, m)


def colorize(Gs: np.ndarray, colormap: np.ndarray) -> np.ndarray:
    idx = colormap_index(Gs, len(colormap))
    return colormap[idx - 1]


def pad_series(X, mode: str, n_max: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n = X.size
    if n > n_max:
        raise EncodingError(f"series length {n} exceeds padding length {n_max}")
    extra = n_max - n
    if mode == "right":
        left, right = 0, extra
    elif mode == "left":
        left, right = extra, 0
    elif mode == "both_ends":
        left = extra // 2
        right = extra - left
    else:
        raise EncodingError(f"unknown padding mode {mode!r}")
    return np.pad(X, (left, right), mode="edge")


def gaf_matrix(X, kind: str = "gaf_fe", pad_length: int = 128) -> np.ndarray:
    if kind == "gaf_fe":
        x = rescale_exp(X)
    elif kind == "gaf_original":
        x = rescale_mean(X)
    elif kind in PAD_MODES:
        x = rescale_mean(pad_series(X, PAD_MODES[kind], pad_length))
    else:
        raise EncodingError(f"unknown encoding {kind!r}; valid kinds: {', '.join(ENCODINGS)}")
    return gasf(to_polar(x))


def encode(X, config: EncodingConfig | None = None) -> np.ndarray:
    """Encode a raw series as an ``S x S x 3`` image with channels in [0, 1]."""
    cfg = config or EncodingConfig()
    G = gaf_matrix(X, cfg.kind, cfg.pad_length)
    return colorize(resize_bicubic(G, cfg.image_size), cfg.colormap())


def to_ppm(image: np.ndarray) -> str:
    """Plain-text (P3) portable pixmap."""
    h, w, _ = image.shape
    px = np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(int)
    rows = [" ".join(str(v) for v in row.ravel()) for row in px]
    return f"P3\n{w} {h}\n255\n" + "\n".join(rows) + "\n"


def read_ppm(text: str) -> np.ndarray:
    tokens = [tok for line in text.splitlines() for tok in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P3":
        raise EncodingError("not a P3 pixmap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:4 + w * h * 3], dtype=float)
    if data.size != w * h * 3:
        raise EncodingError("truncated pixmap")
    return data.reshape(h, w, 3) / maxval
