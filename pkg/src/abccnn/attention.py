"""Question-configured kernels, the attention map and attention-weighted features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import ConfigError, DimensionError, Tensor


@dataclass
class AttentionParams:
    W_sk: Tensor | None  # (C*kh*kw, d_s); None when attention is disabled
    b_k: Tensor | None
    W_reduce: Tensor  # (C_r, C, 1, 1)
    kh: int = 1
    kw: int = 1

    def __post_init__(self):
        if self.kh % 2 == 0 or self.kw % 2 == 0:
            raise ConfigError(f"kernel extents must be odd, got {self.kh}x{self.kw}")
        C_r, C = self.W_reduce.shape[:2]
        if self.W_reduce.shape[2:] != (1, 1) or C_r > C:
            raise DimensionError(f"bad reduction kernel shape {self.W_reduce.shape}")
        if self.W_sk is not None:
            if self.W_sk.shape[0] != C * self.kh * self.kw or self.b_k.shape != (self.W_sk.shape[0],):
                raise DimensionError("CCK projection does not match the feature channel count")

    @property
    def channels(self) -> int:
        return self.W_reduce.shape[1]

    @property
    def reduced_channels(self) -> int:
        return self.W_reduce.shape[0]


def configure_kernel(s: Tensor, p: AttentionParams) -> Tensor:
    """sigmoid(W_sk s + b_k) laid out as a one-filter kernel bank.

    Returns (1, C, kh, kw) for a single embedding, (B, 1, C, kh, kw) for a batch.
    """
    if p.W_sk is None:
        raise ConfigError("attention is disabled for these parameters")
    if s.shape[-1] != p.W_sk.shape[1]:
        raise DimensionError(f"question embedding size {s.shape[-1]} != {p.W_sk.shape[1]}")
    k = ad.sigmoid(ad.affine(p.W_sk, s, p.b_k))
    shape = (1, p.channels, p.kh, p.kw)
    return k.reshape(shape if s.ndim == 1 else (s.shape[0], *shape))


def attention_map(k: Tensor, I: Tensor) -> Tensor:
    """softmax over all cells of (k * I); (N, N) or (B, N, N)."""
    z = ad.conv2d_same(I, k)
    z = z.reshape(z.shape[-2:] if I.ndim == 3 else (I.shape[0], *z.shape[-2:]))
    return ad.softmax_spatial(z)


def uniform_map(shape: tuple[int, ...]) -> Tensor:
    n = shape[-2] * shape[-1]
    return ad.constant(np.full(shape, 1.0 / n))


def weight_features(I: Tensor, m: Tensor) -> Tensor:
    return ad.channel_scale(I, m)


def reduce_channels(I_w: Tensor, p: AttentionParams) -> Tensor:
    return ad.conv2d_same(I_w, p.W_reduce)


def write_map_csv(m: np.ndarray, path: str | Path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(m)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_map_csv(path: str | Path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").split()
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def write_map_pgm(m: np.ndarray, path: str | Path) -> None:
    """8-bit grayscale with the largest attention value mapped to 255."""
    m = np.asarray(m, dtype=float)
    top = m.max()
    pix = np.zeros(m.shape, dtype=np.uint8) if top <= 0 else np.rint(255.0 * m / top).astype(np.uint8)
    Image.fromarray(pix, mode="L").save(path, format="PPM")
