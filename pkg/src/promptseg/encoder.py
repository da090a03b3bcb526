"""Frozen feature encoder and the .apfe multi-level feature file format.

The built-in encoder is a three-stage convolutional net with fixed random
weights drawn from a named seed. It stands in for a large pretrained
image encoder: nothing here ever trains. Feature maps from real
foundation encoders enter through load_features instead, written by the
companion exporter tool.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from promptseg.config import EncoderConfig
from promptseg.ioutil import (FormatError, expect_eof, read_exact, read_str,
                              read_u32, write_str, write_u32)
from promptseg.tensor import DimensionError, Tensor, default_dtype

FEATURE_MAGIC = b"APFE"
FEATURE_VERSION = 1
LEVEL_IDS = (1, 2, 3)


@dataclass
class MultiLevelFeatures:
    """Three frozen feature maps; the first two share a channel count and
    all three share spatial extent."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    source: str = "toy"   # toy | imported

    def __post_init__(self):
        for f in (self.f1, self.f2, self.f3):
            if f.ndim != 3:
                raise DimensionError(f"feature level must be (c,h,w), got {f.shape}")
        if self.f1.shape[1:] != self.f3.shape[1:] or self.f2.shape[1:] != self.f3.shape[1:]:
            raise DimensionError("feature levels must share spatial extent")
        if self.f1.shape[0] != self.f2.shape[0]:
            raise DimensionError("levels 1 and 2 must share a channel count")

    @property
    def levels(self):
        return (self.f1, self.f2, self.f3)

    @property
    def spatial(self):
        return self.f3.shape[1:]


class FrozenEncoder:
    """Toy stride-4 conv encoder with weights fixed by EncoderConfig.weight_seed.

    Stage 1 patchifies (kernel = stride), stages 2 and 3 are 3x3 same
    convolutions; every stage ends in tanh so random features stay
    bounded. Taps: f1 after stage 1, f2 after stage 2, f3 after stage 3.
    """

    def __init__(self, cfg: EncoderConfig | None = None):
        self.cfg = cfg or EncoderConfig()
        c1, c2, c3 = self.cfg.channels
        s = self.cfg.stride
        rng = np.random.default_rng(self.cfg.weight_seed)

        def w(shape, fan_in):
            return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float64)

        self.w0 = w((c1, 3 * s * s), 3 * s * s)
        self.b0 = w((c1,), 1.0) * 0.1
        self.w1 = w((c2, c1, 3, 3), c1 * 9)
        self.b1 = w((c2,), 1.0) * 0.1
        self.w2 = w((c3, c2, 3, 3), c2 * 9)
        self.b2 = w((c3,), 1.0) * 0.1

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w0, self.b0, self.w1, self.b1, self.w2, self.b2):
            h.update(arr.tobytes())
        return h.hexdigest()

    def _conv3x3(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        ci, h, wd = x.shape
        co = w.shape[0]
        pad = np.zeros((ci, h + 2, wd + 2), dtype=x.dtype)
        pad[:, 1:-1, 1:-1] = x
        out = np.zeros((co, h * wd), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                out += w[:, :, dy, dx].astype(x.dtype) @ pad[:, dy:dy + h, dx:dx + wd].reshape(ci, h * wd)
        return out.reshape(co, h, wd) + b.astype(x.dtype)[:, None, None]

    def extract(self, pixels: np.ndarray, dtype=None) -> MultiLevelFeatures:
        """Run the frozen stages on a (3,H,W) image in [0,1]."""
        dtype = np.dtype(dtype or default_dtype())
        x = np.asarray(pixels, dtype=dtype)
        if x.ndim != 3 or x.shape[0] != 3:
            raise DimensionError(f"encoder expects (3,H,W) pixels, got {x.shape}")
        s = self.cfg.stride
        _, hi, wi = x.shape
        if hi % s or wi % s:
            raise DimensionError(f"image size {hi}x{wi} not divisible by encoder stride {s}")
        h, w = hi // s, wi // s
        patches = x.reshape(3, h, s, w, s).transpose(1, 3, 0, 2, 4).reshape(h * w, 3 * s * s)
        a1 = np.tanh(patches @ self.w0.T.astype(dtype) + self.b0.astype(dtype)).T.reshape(-1, h, w)
        a2 = np.tanh(self._conv3x3(a1, self.w1, self.b1))
        a3 = np.tanh(self._conv3x3(a2, self.w2, self.b2))
        return MultiLevelFeatures(Tensor(a1), Tensor(a2), Tensor(a3), source="toy")


# -- .apfe feature files -------------------------------------------------------


def save_features(path: str, image_id: str, feats: MultiLevelFeatures) -> None:
    """Write the v1 feature file: header then float32 LE payloads in level order."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        write_u32(fh, FEATURE_VERSION)
        write_str(fh, image_id)
        write_u32(fh, len(LEVEL_IDS))
        for level_id, f in zip(LEVEL_IDS, feats.levels):
            c, h, w = f.shape
            write_u32(fh, level_id)
            write_u32(fh, c)
            write_u32(fh, h)
            write_u32(fh, w)
        for f in feats.levels:
            fh.write(np.ascontiguousarray(f.data, dtype="<f4").tobytes())


def load_features(path: str) -> tuple[str, MultiLevelFeatures]:
    """Read and validate a v1 feature file. Returns (image_id, features)."""
    with open(path, "rb") as fh:
        magic = read_exact(fh, 4)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        version = read_u32(fh)
        if version != FEATURE_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        image_id = read_str(fh)
        n_levels = read_u32(fh)
        if n_levels != len(LEVEL_IDS):
            raise FormatError(f"expected {len(LEVEL_IDS)} levels, file has {n_levels}")
        shapes = []
        for want_id in LEVEL_IDS:
            level_id = read_u32(fh)
            if level_id != want_id:
                raise FormatError(f"level id {level_id} out of order, expected {want_id}")
            c, h, w = read_u32(fh), read_u32(fh), read_u32(fh)
            if min(c, h, w) <= 0:
                raise FormatError(f"level {level_id} has empty shape ({c},{h},{w})")
            shapes.append((c, h, w))
        arrays = []
        for shape in shapes:
            count = shape[0] * shape[1] * shape[2]
            raw = read_exact(fh, 4 * count)
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        expect_eof(fh)
    feats = MultiLevelFeatures(*(Tensor(a) for a in arrays), source="imported")
    return image_id, feats


def level_checksums(feats: MultiLevelFeatures) -> list[str]:
    """sha256 of each level's float32 LE payload, as written on disk."""
    return [hashlib.sha256(np.ascontiguousarray(f.data, dtype="<f4").tobytes()).hexdigest()
            for f in feats.levels]
