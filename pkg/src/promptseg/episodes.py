"""Synthetic cross-domain benchmark: parametric shape classes rendered
under controllable appearance domains, episode sampling, IoU metrics, and
the multi-run evaluation protocol.

A domain controls appearance only (palette, texture frequency, noise,
inversion, blur); masks are exact rasterizations of the shape geometry,
so a domain shift changes what pixels look like but never what counts as
foreground. Train and eval splits must use disjoint class sets.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from promptseg.tensor import ContractError, DimensionError

SHAPE_NAMES = ("circle", "triangle", "square", "cross",
               "ring", "star", "ellipse", "lshape")

FG_FRACTION_LO = 0.05
FG_FRACTION_HI = 0.6
MAX_RESAMPLES = 100


class SamplingError(RuntimeError):
    pass


@dataclass
class DomainSpec:
    invert: bool = False
    noise_sigma: float = 0.02
    texture_freq: float = 2.0
    blur_radius: int = 0
    palette_seed: int = 0

    def key(self) -> str:
        raw = f"{int(self.invert)}|{self.noise_sigma!r}|{self.texture_freq!r}|" \
              f"{self.blur_radius}|{self.palette_seed}"
        return hashlib.sha256(raw.encode()).hexdigest()[:8]


@dataclass
class Sample:
    image: np.ndarray        # (3, S, S) float32 in [0,1]
    mask: np.ndarray         # (S, S) float32 binary
    class_id: int
    uid: str


@dataclass
class Dataset:
    samples: dict            # class_id -> list[Sample]
    image_size: int
    spec: DomainSpec

    def classes(self):
        return sorted(self.samples)

    def total(self) -> int:
        return sum(len(v) for v in self.samples.values())


@dataclass
class Episode:
    support: list            # K Samples
    query: Sample
    class_id: int
    domain_id: str


# -- geometry ---------------------------------------------------------------------


def _grid(size: int):
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="xy")


def _rotate(xx, yy, cx, cy, theta):
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def _raster(class_id: int, size: int, rng) -> np.ndarray:
    xx, yy = _grid(size)
    cx, cy = rng.uniform(0.35, 0.65, 2)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    name = SHAPE_NAMES[class_id]
    if name == "circle":
        r = rng.uniform(0.14, 0.26)
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif name == "triangle":
        r = rng.uniform(0.2, 0.3)
        verts = [(cx + r * math.cos(theta + 2 * math.pi * k / 3),
                  cy + r * math.sin(theta + 2 * math.pi * k / 3)) for k in range(3)]
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            x0, y0 = verts[k]
            x1, y1 = verts[(k + 1) % 3]
            inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    elif name == "square":
        s = rng.uniform(0.12, 0.24)
        rx, ry = _rotate(xx, yy, cx, cy, theta)
        inside = np.maximum(np.abs(rx), np.abs(ry)) <= s
    elif name == "cross":
        s = rng.uniform(0.18, 0.28)
        t = s * rng.uniform(0.25, 0.4)
        rx, ry = _rotate(xx, yy, cx, cy, theta)
        inside = ((np.abs(rx) <= s) & (np.abs(ry) <= t)) | \
                 ((np.abs(rx) <= t) & (np.abs(ry) <= s))
    elif name == "ring":
        r_out = rng.uniform(0.18, 0.28)
        r_in = r_out * rng.uniform(0.45, 0.65)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        inside = (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
    elif name == "star":
        r_out = rng.uniform(0.2, 0.3)
        r_in = r_out * 0.45
        dx, dy = xx - cx, yy - cy
        phi = np.arctan2(dy, dx)
        rad = r_in + (r_out - r_in) * (0.5 + 0.5 * np.cos(5.0 * (phi - theta)))
        inside = dx * dx + dy * dy <= rad * rad
    elif name == "ellipse":
        a = rng.uniform(0.18, 0.28)
        b = a * rng.uniform(0.5, 0.85)
        rx, ry = _rotate(xx, yy, cx, cy, theta)
        inside = (rx / a) ** 2 + (ry / b) ** 2 <= 1.0
    elif name == "lshape":
        s = rng.uniform(0.14, 0.26)
        rx, ry = _rotate(xx, yy, cx, cy, theta)
        inside = (np.maximum(np.abs(rx), np.abs(ry)) <= s) & ~((rx > 0) & (ry > 0))
    else:
        raise ContractError(f"unknown class id {class_id}")
    return inside.astype(np.float32)


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return img
    k = 2 * radius + 1
    out = img
    for axis in (1, 2):
        padded = np.concatenate([np.repeat(out.take([0], axis=axis), radius, axis=axis),
                                 out,
                                 np.repeat(out.take([-1], axis=axis), radius, axis=axis)],
                                axis=axis)
        csum = np.cumsum(padded, axis=axis, dtype=np.float64)
        zero = np.zeros_like(csum.take([0], axis=axis))
        csum = np.concatenate([zero, csum], axis=axis)
        hi = csum.take(range(k, csum.shape[axis]), axis=axis)
        lo = csum.take(range(0, csum.shape[axis] - k), axis=axis)
        out = ((hi - lo) / k).astype(img.dtype)
    return out


def _render(mask: np.ndarray, spec: DomainSpec, class_id: int, rng) -> np.ndarray:
    size = mask.shape[0]
    pal = np.random.default_rng([spec.palette_seed, class_id])
    fg_color = pal.uniform(0.1, 0.9, 3)
    bg_color = pal.uniform(0.1, 0.9, 3)
    xx, yy = _grid(size)
    alpha = rng.uniform(0.0, 2.0 * math.pi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wave = np.sin(2.0 * math.pi * spec.texture_freq *
                  (xx * math.cos(alpha) + yy * math.sin(alpha)) + phase)
    img = bg_color[:, None, None] + (fg_color - bg_color)[:, None, None] * mask[None]
    img = img + 0.12 * wave[None]
    if spec.invert:
        img = 1.0 - img
    img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = _box_blur(img, spec.blur_radius)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: DomainSpec, classes, count: int, image_size: int = 64) -> Dataset:
    """Deterministic dataset: every sample's geometry and appearance derive
    from (palette seed, class, index) alone."""
    key = spec.key()
    samples = {}
    for cid in classes:
        if not 0 <= cid < len(SHAPE_NAMES):
            raise ContractError(f"class id {cid} outside the shape vocabulary")
        rows = []
        for idx in range(count):
            rng = np.random.default_rng([spec.palette_seed, cid, idx])
            mask = None
            for _ in range(MAX_RESAMPLES):
                candidate = _raster(cid, image_size, rng)
                frac = float(candidate.mean())
                if FG_FRACTION_LO <= frac <= FG_FRACTION_HI:
                    mask = candidate
                    break
            if mask is None:
                raise ContractError(
                    f"class {cid} sample {idx}: no in-range mask after {MAX_RESAMPLES} draws")
            image = _render(mask, spec, cid, rng)
            rows.append(Sample(image, mask, cid, uid=f"{key}:{cid}:{idx}"))
        samples[cid] = rows
    return Dataset(samples, image_size, spec)


def check_disjoint(train_classes, eval_classes):
    overlap = set(train_classes) & set(eval_classes)
    if overlap:
        raise ContractError(f"train/eval class sets overlap: {sorted(overlap)}")


def sample_episode(dataset: Dataset, shots: int, rng, class_id=None) -> Episode:
    eligible = [c for c in dataset.classes() if len(dataset.samples[c]) >= shots + 1]
    if not eligible:
        raise SamplingError(f"no class has {shots + 1} samples")
    if class_id is None:
        class_id = int(eligible[rng.integers(len(eligible))])
    elif class_id not in eligible:
        raise SamplingError(f"class {class_id} lacks {shots + 1} samples")
    rows = dataset.samples[class_id]
    picks = rng.choice(len(rows), size=shots + 1, replace=False)
    support = [rows[int(i)] for i in picks[:-1]]
    return Episode(support, rows[int(picks[-1])], class_id, dataset.spec.key())


def downsample_mask(mask: np.ndarray, grid: tuple) -> np.ndarray:
    """Nearest sampling at cell centers, full-res mask to feature grid."""
    big_h, big_w = mask.shape
    h, w = grid
    ri = ((np.arange(h) + 0.5) * big_h / h).astype(int).clip(0, big_h - 1)
    rj = ((np.arange(w) + 0.5) * big_w / w).astype(int).clip(0, big_w - 1)
    return mask[np.ix_(ri, rj)]


# -- metrics ----------------------------------------------------------------------


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise DimensionError(f"iou shape mismatch: {pred.shape} vs {gt.shape}")
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class RunResult:
    seed_key: list
    miou: float
    per_class: dict          # class_id -> [intersection, union, episodes]


@dataclass
class EvalReport:
    runs: list               # RunResult per run
    mean_miou: float
    std_miou: float
    episodes_per_run: int
    shots: int
    aggregation: str
    domain_id: str
    header: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["evaluation report"]
        for k, v in self.header.items():
            lines.append(f"{k}: {v}")
        lines.append(f"aggregation: {self.aggregation}")
        lines.append(f"episodes per run: {self.episodes_per_run}   shots: {self.shots}")
        lines.append(f"domain: {self.domain_id}")
        lines.append("")
        lines.append("run  seed            mIoU    per-class IoU")
        for i, run in enumerate(self.runs):
            parts = []
            for cid in sorted(run.per_class):
                inter, union, n = run.per_class[cid]
                val = 1.0 if union == 0 else inter / union
                parts.append(f"{SHAPE_NAMES[cid]}={val:.4f}({n})")
            lines.append(f"{i:<4d} {str(run.seed_key):<15} {run.miou:.4f}  " + " ".join(parts))
        lines.append("")
        lines.append(f"mean mIoU over {len(self.runs)} runs: "
                     f"{self.mean_miou:.4f} +/- {self.std_miou:.4f}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        lines = []
        for k, v in self.header.items():
            lines.append(f"{k}={v}")
        lines.append(f"aggregation={self.aggregation}")
        lines.append(f"episodes_per_run={self.episodes_per_run}")
        lines.append(f"shots={self.shots}")
        lines.append(f"domain={self.domain_id}")
        lines.append(f"runs={len(self.runs)}")
        for i, run in enumerate(self.runs):
            lines.append(f"run{i}_miou={run.miou!r}")
            for cid in sorted(run.per_class):
                inter, union, n = run.per_class[cid]
                lines.append(f"run{i}_class{cid}_inter={inter!r}")
                lines.append(f"run{i}_class{cid}_union={union!r}")
                lines.append(f"run{i}_class{cid}_episodes={n}")
        lines.append(f"mean_miou={self.mean_miou!r}")
        lines.append(f"std_miou={self.std_miou!r}")
        return "\n".join(lines) + "\n"


def _run_miou(per_class: dict, episode_ious, aggregation: str) -> float:
    if aggregation == "episode-mean":
        return float(np.mean(episode_ious)) if episode_ious else 0.0
    vals = []
    for cid in sorted(per_class):
        inter, union, n = per_class[cid]
        if n == 0:
            continue
        vals.append(1.0 if union == 0 else inter / union)
    return float(np.mean(vals)) if vals else 0.0


def evaluate(predict, dataset: Dataset, runs: int = 5, episodes_per_run: int = 200,
             seed: int = 101, shots: int = 1, aggregation: str = "class-accumulate",
             header=None) -> EvalReport:
    """Run the episodic protocol: `predict(episode) -> binary mask` is
    scored over `runs` independently seeded batches of episodes.

    class-accumulate: per-class intersections and unions are summed over
    the run before dividing; the run score is the class mean.
    episode-mean: plain mean of per-episode IoU.
    """
    results = []
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        per_class = {cid: [0.0, 0.0, 0] for cid in dataset.classes()}
        episode_ious = []
        for _ in range(episodes_per_run):
            ep = sample_episode(dataset, shots, rng)
            pred = predict(ep)
            g = ep.query.mask > 0.5
            p = np.asarray(pred) > 0.5
            if p.shape != g.shape:
                raise DimensionError(f"prediction shape {p.shape} vs mask {g.shape}")
            acc = per_class[ep.class_id]
            acc[0] += float(np.logical_and(p, g).sum())
            acc[1] += float(np.logical_or(p, g).sum())
            acc[2] += 1
            episode_ious.append(iou(p, g))
        miou = _run_miou(per_class, episode_ious, aggregation)
        results.append(RunResult([seed, r], miou, per_class))
    scores = [run.miou for run in results]
    return EvalReport(results, float(np.mean(scores)), float(np.std(scores)),
                      episodes_per_run, shots, aggregation, dataset.spec.key(),
                      header=dict(header or {}))


# -- renders ----------------------------------------------------------------------


def write_pgm(path, gray: np.ndarray):
    """Binary graymap from floats in [0,1]."""
    arr = (np.clip(gray, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def write_ppm(path, rgb: np.ndarray):
    """Binary pixmap from a (3,h,w) float image in [0,1]."""
    arr = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.transpose(1, 2, 0).tobytes())
