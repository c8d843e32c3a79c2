"""Synthetic living-room scenes with 8 appropriateness labels, client partitioning,
augmentation, and CSV ingestion.

Each scene is generated from a handful of latent factors (how crowded the
room is, how close the nearest person is, four context flags). The image
renders those factors; the labels are a fixed sigmoid-linear function of them,
so every label can be recomputed exactly from the stored factors.

Channel layout of a rendered image:
  0  people, one Gaussian blob each, brighter when closer to the robot
  1  context flags, flag k is a square of side ``(k+1)*H/16`` in corner k
  2  task marker, a ring (task 1, circle of influence) or an arrow (task 2)
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import ConfigError, IngestionError
from .model import N_ACTIONS, SCORE_MAX, SCORE_MIN

N_FACTORS = 6
MAX_PEOPLE = 6
TASKS = (1, 2)

# rows: actions 1..8; columns: crowd, proximity, flag0..flag3
LABEL_WEIGHTS = np.array([
    [-2.0, -1.5, -1.0, -0.5, 0.8, -1.2],
    [-1.6, -1.2, -0.8, -0.4, 0.4, -1.0],
    [-0.8, -1.8, -1.2, 0.6, -0.6, -0.2],
    [-0.6, -1.4, -0.6, 0.4, -0.4, -0.2],
    [-2.2, -2.0, -1.4, -1.0, -0.8, -0.6],
    [-0.4, -0.6, 0.6, 0.2, -0.2, 0.4],
    [-1.0, -1.6, -1.6, 0.8, -1.0, 0.2],
    [1.2, 0.8, 1.0, 1.2, 0.6, -1.6],
])
LABEL_BIAS = np.array([1.0, 0.8, 0.6, 0.8, 0.9, 0.7, 0.5, -0.3])
# logit shift applied to task-2 scenes (scaled by ``task_shift``)
TASK2_OFFSET = np.array([1.5, -1.5, 1.2, -1.2, 1.5, -1.0, 1.2, -1.5])


@dataclass(frozen=True)
class LatentFactors:
    crowd_density: float
    min_distance: float
    context_flags: tuple

    def features(self) -> np.ndarray:
        """Label-function inputs: crowd, proximity of nearest person (0 if empty), flags."""
        proximity = 0.0 if self.crowd_density == 0 else 1.0 - self.min_distance
        return np.array([self.crowd_density, proximity, *map(float, self.context_flags)])


@dataclass(frozen=True)
class SceneSample:
    image: np.ndarray
    labels: np.ndarray
    task_id: int
    factors: LatentFactors | None = None
    sample_id: int = -1

    def __post_init__(self):
        if self.task_id not in TASKS:
            raise ConfigError(f"task_id must be 1 or 2, got {self.task_id}")


@dataclass(frozen=True)
class LabelModel:
    weights: np.ndarray = field(default_factory=lambda: LABEL_WEIGHTS.copy())
    bias: np.ndarray = field(default_factory=lambda: LABEL_BIAS.copy())
    task2_offset: np.ndarray = field(default_factory=lambda: TASK2_OFFSET.copy())
    task_shift: float = 1.0

    def labels(self, factors: LatentFactors, task_id: int) -> np.ndarray:
        z = self.weights @ factors.features() + self.bias
        if task_id == 2:
            z = z + self.task_shift * self.task2_offset
        return np.clip(1.0 + 4.0 / (1.0 + np.exp(-z)), SCORE_MIN, SCORE_MAX).astype(nc.DTYPE)


def _blob(img: np.ndarray, cy: float, cx: float, amp: float, sigma: float) -> None:
    H, W = img.shape
    yy, xx = np.mgrid[0:H, 0:W]
    img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def _segment_dist(yy, xx, p, q):
    """Distance from every pixel to the segment p-q (points as (row, col))."""
    py, px = p
    dy, dx = q[0] - py, q[1] - px
    t = np.clip(((yy - py) * dy + (xx - px) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    return np.hypot(yy - (py + t * dy), xx - (px + t * dx))


def task_marker(task_id: int, H: int) -> np.ndarray:
    """Ring (task 1) or right-pointing arrow (task 2).

    The arrow is rescaled to carry the ring's total intensity, so the two tasks
    share first-order image statistics and differ only in shape.
    """
    yy, xx = np.mgrid[0:H, 0:H].astype(float)
    c = (H - 1) / 2.0
    ring = (np.abs(np.hypot(yy - c, xx - c) - H / 4.0) < 0.75).astype(float)
    if task_id == 1:
        return ring
    tip = (c, H - 2.0)
    arm = H / 4.0
    d = np.minimum(_segment_dist(yy, xx, (c, c - arm), tip),
                   np.minimum(_segment_dist(yy, xx, (c - arm, tip[1] - arm), tip),
                              _segment_dist(yy, xx, (c + arm, tip[1] - arm), tip)))
    arrow = (d < 1.0).astype(float)
    return arrow * (ring.sum() / arrow.sum())


def render_scene(factors: LatentFactors, task_id: int, H: int, rng: np.random.Generator,
                 noise: float = 0.02) -> np.ndarray:
    img = np.zeros((3, H, H))
    c = (H - 1) / 2.0
    n_people = int(round(factors.crowd_density * MAX_PEOPLE))
    max_r = H / 2.0 - 2.0
    for k in range(n_people):
        dist = factors.min_distance if k == 0 else rng.uniform(factors.min_distance, 1.0)
        r = 2.0 + dist * (max_r - 2.0)
        ang = rng.uniform(0, 2 * np.pi)
        _blob(img[0], c + r * np.sin(ang), c + r * np.cos(ang), 0.3 + 0.7 * (1.0 - dist), H / 20.0)
    corners = [(0, 0), (0, 1), (1, 0), (1, 1)]
    for k, on in enumerate(factors.context_flags):
        if on:
            side = max(1, (k + 1) * H // 16)
            r0 = 0 if corners[k][0] == 0 else H - side
            c0 = 0 if corners[k][1] == 0 else H - side
            img[1, r0:r0 + side, c0:c0 + side] = 1.0
    img[2] = task_marker(task_id, H)
    img += noise * rng.standard_normal(img.shape)
    return img.astype(nc.DTYPE)


def sample_factors(rng: np.random.Generator) -> LatentFactors:
    crowd = float(rng.integers(0, MAX_PEOPLE + 1)) / MAX_PEOPLE
    dist = float(np.round(rng.uniform(0.0, 1.0), 6)) if crowd > 0 else 1.0
    flags = tuple(bool(f) for f in rng.random(4) < 0.4)
    return LatentFactors(crowd, dist, flags)


def generate_dataset(n_scenes: int, H: int = 32, seed: int = 0,
                     label_model: LabelModel | None = None) -> list[SceneSample]:
    """Balanced two-task synthetic dataset, fully determined by ``seed``."""
    if n_scenes < 8:
        raise ConfigError("n_scenes must be at least 8")
    label_model = label_model or LabelModel()
    rng = np.random.default_rng(seed)
    tasks = rng.permutation(np.arange(n_scenes) % 2 + 1)
    out = []
    for i in range(n_scenes):
        task = int(tasks[i])
        f = sample_factors(rng)
        img = render_scene(f, task, H, rng)
        out.append(SceneSample(img, label_model.labels(f, task), task, f, i))
    return out


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.image for s in samples]).astype(nc.DTYPE)
    Y = np.stack([s.labels for s in samples]).astype(nc.DTYPE)
    return X, Y


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre with zero fill; shape (C, H, W)."""
    C, H, W = img.shape
    th = np.deg2rad(degrees)
    cos, sin = np.cos(th), np.sin(th)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sy = cos * (yy - cy) - sin * (xx - cx) + cy
    sx = sin * (yy - cy) + cos * (xx - cx) + cx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    src = img.astype(np.float64)
    out = np.zeros((C, H, W))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            vals = np.where(ok, src[:, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)], 0.0)
            out += vals * (wy * wx)
    return out.astype(img.dtype)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, :, ::-1])


def augment(sample: SceneSample, rng) -> SceneSample:
    """Flip with p=0.5, then rotate by U(-10, 10) degrees with p=0.5. Labels untouched."""
    img = sample.image
    if rng.random() < 0.5:
        img = hflip(img)
    if rng.random() < 0.5:
        img = rotate_image(img, rng.uniform(-10.0, 10.0))
    return SceneSample(img, sample.labels, sample.task_id, sample.factors, sample.sample_id)


def augment_batch(X: np.ndarray, rng) -> np.ndarray:
    out = np.empty_like(X)
    for i, img in enumerate(X):
        if rng.random() < 0.5:
            img = hflip(img)
        if rng.random() < 0.5:
            img = rotate_image(img, rng.uniform(-10.0, 10.0))
        out[i] = img
    return out


# ---------------------------------------------------------------------------
# Train/test split and client partitioning
# ---------------------------------------------------------------------------

@dataclass
class FederatedSplit:
    """Per-client training shards (by task) and a test set shared by every client."""

    train: list  # train[client][task_id] -> list[SceneSample]
    test: dict   # task_id -> list[SceneSample]
    n_clients: int

    def client_train(self, client: int, tasks=TASKS) -> list[SceneSample]:
        return [s for t in tasks for s in self.train[client][t]]

    def test_set(self, tasks=TASKS) -> list[SceneSample]:
        return [s for t in tasks for s in self.test[t]]

    def all_train(self) -> list[SceneSample]:
        return [s for c in range(self.n_clients) for s in self.client_train(c)]


def partition(data: list[SceneSample], n_clients: int, seed: int, iid: bool = True,
              test_fraction: float = 0.25) -> FederatedSplit:
    """3:1 train/test split per task, then deal training samples to clients.

    i.i.d. mode shuffles and deals round-robin, continuing the dealing position
    from one task to the next so shard totals differ by at most one. Non-i.i.d.
    mode sorts each task by crowd density and hands out contiguous chunks.
    """
    if not 1 <= n_clients <= 10:
        raise ConfigError(f"n_clients must be in [1, 10], got {n_clients}")
    rng = np.random.default_rng(seed)
    train_by_task, test = {}, {}
    for t in TASKS:
        items = [s for s in data if s.task_id == t]
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        n_test = int(round(len(items) * test_fraction))
        test[t] = items[:n_test]
        train_by_task[t] = items[n_test:]
    n_train = sum(len(v) for v in train_by_task.values())
    if n_train < n_clients:
        raise ConfigError(f"{n_train} training samples cannot cover {n_clients} clients")
    shards = [{t: [] for t in TASKS} for _ in range(n_clients)]
    pos = 0
    for t in TASKS:
        items = train_by_task[t]
        if iid:
            for s in items:
                shards[pos % n_clients][t].append(s)
                pos += 1
        else:
            items = sorted(items, key=lambda s: (s.factors.crowd_density if s.factors else 0.0))
            for c, chunk in enumerate(np.array_split(np.arange(len(items)), n_clients)):
                shards[c][t] = [items[i] for i in chunk]
    return FederatedSplit(shards, test, n_clients)


# ---------------------------------------------------------------------------
# CSV ingestion / export and the regeneration manifest
# ---------------------------------------------------------------------------

CSV_HEADER = ["image_file", "task_id"] + [f"label_{i}" for i in range(1, N_ACTIONS + 1)]


def export_csv(samples: list[SceneSample], path) -> None:
    path = Path(path)
    img_dir = path.parent / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i, s in enumerate(samples):
            rel = f"images/img_{i:05d}.fstn"
            nc.save_tensor(path.parent / rel, s.image)
            w.writerow([rel, s.task_id] + [repr(float(v)) for v in s.labels])


def ingest_csv(path) -> list[SceneSample]:
    """Read ``image_file, task_id, label_1..label_8`` rows; errors name the data row (1-based)."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no such file: {path}")
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise IngestionError(f"bad header in {path}: expected {CSV_HEADER}")
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(CSV_HEADER):
                raise IngestionError(f"row {row_no}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                task = int(row[1])
                labels = np.array([float(v) for v in row[2:]], dtype=nc.DTYPE)
            except ValueError as exc:
                raise IngestionError(f"row {row_no}: {exc}") from None
            if task not in TASKS:
                raise IngestionError(f"row {row_no}: task_id {task} not in {TASKS}")
            bad = [i + 1 for i, v in enumerate(labels) if not SCORE_MIN <= v <= SCORE_MAX]
            if bad:
                raise IngestionError(f"row {row_no}: label_{bad[0]}={labels[bad[0] - 1]} outside [1, 5]")
            img_path = path.parent / row[0]
            if not img_path.is_file():
                raise IngestionError(f"row {row_no}: missing image file {row[0]}")
            try:
                img = nc.load_tensor(img_path)
            except ConfigError as exc:
                raise IngestionError(f"row {row_no}: {exc}") from None
            out.append(SceneSample(img, labels, task, None, row_no - 1))
    return out


def write_manifest(path, seed: int, n_scenes: int, H: int, label_model: LabelModel | None = None) -> None:
    lm = label_model or LabelModel()
    doc = {"seed": seed, "n_scenes": n_scenes, "H": H, "weights": lm.weights.tolist(),
           "bias": lm.bias.tolist(), "task2_offset": lm.task2_offset.tolist(), "task_shift": lm.task_shift}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def regenerate_from_manifest(path) -> list[SceneSample]:
    with open(path) as fh:
        doc = json.load(fh)
    lm = LabelModel(np.array(doc["weights"]), np.array(doc["bias"]), np.array(doc["task2_offset"]),
                    float(doc["task_shift"]))
    return generate_dataset(doc["n_scenes"], doc["H"], doc["seed"], lm)


def write_dataset(samples: list[SceneSample], out_dir, seed: int, n_scenes: int, H: int) -> Path:
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    export_csv(samples, out_dir / "scenes.csv")
    write_manifest(out_dir / "manifest.json", seed, n_scenes, H)
    return out_dir / "scenes.csv"
