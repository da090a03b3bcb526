"""Episodic training: soft Dice objective, batched episode steps with
Adam, binary checkpoints, and bit-exact resume.

Every step derives its own RNG from (seed, step), so resuming from a
checkpoint needs no serialized generator state: step s samples the same
batch whether or not the process restarted in between.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from promptseg.config import config_hash, model_hash
from promptseg.episodes import Dataset, sample_episode
from promptseg.ioutil import (FormatError, expect_eof, read_exact, read_str,
                              read_u32, read_u64, write_str, write_u32,
                              write_u64)
from promptseg.tensor import (DimensionError, NonFiniteError, Tensor, adam_step,
                              add, bilinear_resize, div, mul, sigmoid, sub,
                              tsum)

CHECKPOINT_MAGIC = b"APCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}
_LE = {0: "<f4", 1: "<f8"}


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"aborted at step {step}: {message}")
        self.step = step


class HashMismatchError(RuntimeError):
    pass


def dice_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Soft Dice with smoothing 1.0 on sigmoid probabilities; the logits
    are resized to the ground-truth grid first."""
    gt = np.asarray(gt)
    if logits.ndim != 2 or gt.ndim != 2:
        raise DimensionError(f"dice expects 2-D logits and mask, got {logits.shape}, {gt.shape}")
    if logits.shape != gt.shape:
        logits = bilinear_resize(logits, gt.shape)
    probs = sigmoid(logits)
    g = Tensor(gt.astype(logits.data.dtype))
    inter = tsum(mul(probs, g))
    denom = add(add(tsum(probs), float(g.data.sum())), 1.0)
    return sub(1.0, div(add(mul(inter, 2.0), 1.0), denom))


def train_step(model, batch, lr: float) -> float:
    """Mean Dice over the batch, one Adam update. Returns the loss value."""
    step_tag = getattr(model, "_step_tag", "?")
    try:
        total = None
        for ep in batch:
            loss = dice_loss(model.forward(ep), ep.query.mask)
            total = loss if total is None else add(total, loss)
        mean = mul(total, 1.0 / len(batch))
        value = float(mean.data)
        if not np.isfinite(value):
            raise TrainingAborted(step_tag, f"non-finite loss {value}")
        for p in model.params():
            p.zero_grad()
        mean.backward()
        adam_step(model.params(), lr=lr)
    except NonFiniteError as exc:
        raise TrainingAborted(step_tag, f"non-finite value in graph: {exc}") from exc
    return value


# -- checkpoints ------------------------------------------------------------------


@dataclass
class CheckpointData:
    step: int
    config_digest: str
    model_digest: str
    blobs: dict              # name -> (data, m, v, adam_step)


def save_checkpoint(path, model, step: int):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        write_u32(fh, CHECKPOINT_VERSION)
        write_u64(fh, step)
        write_str(fh, config_hash(model.cfg))
        write_str(fh, model_hash(model.cfg))
        params = model.params()
        write_u64(fh, len(params))
        for p in params:
            code = _DTYPE_CODES.get(p.data.dtype)
            if code is None:
                raise FormatError(f"parameter {p.name} has unsupported dtype {p.data.dtype}")
            write_str(fh, p.name)
            fh.write(bytes([code]))
            write_u32(fh, p.data.ndim)
            for d in p.data.shape:
                write_u32(fh, d)
            fh.write(p.data.astype(_LE[code]).tobytes())
            fh.write(p.m.astype(_LE[code]).tobytes())
            fh.write(p.v.astype(_LE[code]).tobytes())
            write_u64(fh, p.step)


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = read_u32(fh)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        step = read_u64(fh)
        cfg_digest = read_str(fh)
        mdl_digest = read_str(fh)
        count = read_u64(fh)
        blobs = {}
        for _ in range(count):
            name = read_str(fh)
            code = read_exact(fh, 1)[0]
            if code not in _CODE_DTYPES:
                raise FormatError(f"parameter {name}: unknown dtype code {code}")
            ndim = read_u32(fh)
            shape = tuple(read_u32(fh) for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            width = _CODE_DTYPES[code].itemsize
            def block():
                return np.frombuffer(read_exact(fh, n * width), dtype=_LE[code]).reshape(shape).copy()
            data, m, v = block(), block(), block()
            adam_steps = read_u64(fh)
            if name in blobs:
                raise FormatError(f"duplicate parameter {name}")
            blobs[name] = (data, m, v, adam_steps)
        expect_eof(fh)
    return CheckpointData(step, cfg_digest, mdl_digest, blobs)


def restore(model, path, mode: str = "train") -> int:
    """Load a checkpoint into the model; returns the stored step count.

    train mode requires the full config digest to match (bit-exact
    resume); eval mode only requires the model-defining sections to
    match, so evaluation settings may differ from training ones.
    """
    data = load_checkpoint(path)
    if mode == "train":
        if data.config_digest != config_hash(model.cfg):
            raise HashMismatchError(
                f"checkpoint config digest {data.config_digest[:12]} does not match "
                f"current config {config_hash(model.cfg)[:12]}")
    elif data.model_digest != model_hash(model.cfg):
        raise HashMismatchError(
            f"checkpoint model digest {data.model_digest[:12]} does not match "
            f"current model {model_hash(model.cfg)[:12]}")
    params = model.params()
    if len(params) != len(data.blobs):
        raise FormatError(f"checkpoint has {len(data.blobs)} parameters, model has {len(params)}")
    for p in params:
        if p.name not in data.blobs:
            raise FormatError(f"checkpoint is missing parameter {p.name}")
        arr, m, v, adam_steps = data.blobs[p.name]
        if arr.shape != p.data.shape:
            raise FormatError(f"parameter {p.name}: checkpoint shape {arr.shape} vs model {p.data.shape}")
        p.tensor.data[...] = arr.astype(p.data.dtype)
        p.m = m.astype(p.data.dtype)
        p.v = v.astype(p.data.dtype)
        p.step = int(adam_steps)
        p.zero_grad()
    return data.step


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- the loop ---------------------------------------------------------------------


def run_training(model, dataset: Dataset, steps: int, start_step: int = 0,
                 log_fn=None):
    """Train from start_step (exclusive of already-done work) to steps.
    Batch composition at step s depends only on (seed, s)."""
    cfg = model.cfg.train
    losses = []
    for step in range(start_step, steps):
        model._step_tag = step
        rng = np.random.default_rng([cfg.seed, step])
        batch = [sample_episode(dataset, cfg.shots, rng)
                 for _ in range(cfg.batch_episodes)]
        loss = train_step(model, batch, cfg.lr)
        losses.append((step, loss))
        if log_fn is not None:
            log_fn(step, loss)
    return losses
