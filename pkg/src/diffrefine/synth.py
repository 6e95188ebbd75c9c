"""Synthetic gaze scenes and noisy attention-style priors.

Each scene has one person (head position + gaze direction) and a handful of
salient objects. The target is the object on the gaze ray; the others sit
well off the ray. Priors imitate attention maps from a vision-language model:
sometimes sharp and right, sometimes spread over several objects, sometimes
on the wrong object, sometimes pure noise.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidArgument, InvalidData
from .heatmap import GridSize, Point, minmax_scale, render_gaussian

DATASET_MAGIC = b"GCDR"
DATASET_VERSION = 1
PRIOR_CLASSES = ("concentrated", "dispersed", "wrong", "noise")


@dataclass
class SceneParams:
    grid: int = 32
    sigma: float = 2.0  # ground-truth Gaussian, pixels
    head_margin: float = 0.1
    ray_min: float = 0.2
    ray_max: float = 0.7
    direction_jitter_deg: float = 5.0
    min_distractors: int = 1
    max_distractors: int = 4
    distractor_min_angle_deg: float = 12.0
    decoy_prob: float = 0.5  # chance that one distractor sits inside the gaze cone
    decoy_min_angle_deg: float = 12.0
    decoy_max_angle_deg: float = 25.0
    cone_sigma_deg: float = 20.0
    cone_extent: float = 2.0  # direction field is zero beyond this distance from the head
    saliency_range: tuple[float, float] = (0.3, 1.0)
    target_saliency_range: tuple[float, float] = (0.3, 1.0)
    head_radius: float = 0.05
    object_sigma: float = 2.0  # saliency blobs, pixels
    frame_margin: float = 0.03
    max_retries: int = 100

    @property
    def size(self) -> GridSize:
        return GridSize.square(self.grid)


@dataclass
class PriorQualityMix:
    probs: tuple[float, float, float, float] = (0.45, 0.30, 0.15, 0.10)
    jitter: float = 0.03  # concentrated-correct centre jitter, normalized units
    spread: float = 1.5  # prior blob sigma as a multiple of the gt sigma
    dispersed_blobs: tuple[int, int] = (2, 4)
    noise_smoothing: float = 2.0  # pure-noise field smoothing, multiple of the gt sigma
    background: float = 0.15  # amplitude of smooth clutter added to every prior

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if len(p) != 4 or np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
            raise InvalidArgument(f"prior class probabilities must be 4 non-negative values summing to 1, got {self.probs}")
        self.probs = tuple(float(v) for v in p)


@dataclass
class SceneSample:
    id: int
    condition: np.ndarray  # (4, H, W)
    gt_point: Point
    gt_heatmap: np.ndarray
    prior: np.ndarray | None = None
    labeled: bool = False
    objects: np.ndarray | None = None  # (K, 2) salient objects, target first
    prior_class: int = -1


def _angle_diff(a, b):
    return np.abs((np.asarray(a) - b + np.pi) % (2 * np.pi) - np.pi)


def render_condition(head: np.ndarray, direction: float, objects: np.ndarray, saliency: np.ndarray,
                     params: SceneParams) -> np.ndarray:
    """Head mask, gaze-cone direction field (2 channels) and object saliency map."""
    size = params.size
    ys, xs = np.mgrid[0:size.height, 0:size.width]
    px = xs / (size.width - 1) - head[0]
    py = ys / (size.height - 1) - head[1]
    mask = (np.hypot(px, py) <= params.head_radius).astype(np.float32)
    delta = _angle_diff(np.arctan2(py, px), direction)
    falloff = np.exp(-0.5 * (delta / math.radians(params.cone_sigma_deg)) ** 2)
    falloff[delta > math.pi / 2] = 0.0
    falloff[np.hypot(px, py) > params.cone_extent] = 0.0
    falloff[mask > 0] = 1.0
    dx = (falloff * math.cos(direction)).astype(np.float32)
    dy = (falloff * math.sin(direction)).astype(np.float32)
    sal = np.zeros(size.shape, dtype=np.float32)
    for p, a in zip(objects, saliency):
        sal = np.maximum(sal, a * render_gaussian(p, params.object_sigma, size))
    return np.stack([mask, dx, dy, sal])


def generate_scene(rng: np.random.Generator, params: SceneParams = SceneParams(), sample_id: int = 0) -> SceneSample:
    lo, hi = params.frame_margin, 1 - params.frame_margin
    for _ in range(params.max_retries):
        head = rng.uniform(params.head_margin, 1 - params.head_margin, size=2)
        theta = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(params.ray_min, params.ray_max)
        target = head + dist * np.array([math.cos(theta), math.sin(theta)])
        if np.all((target >= lo) & (target <= hi)):
            break
    else:
        target = np.clip(target, lo, hi)
        theta = math.atan2(target[1] - head[1], target[0] - head[0])
    encoded = theta + math.radians(params.direction_jitter_deg) * rng.uniform(-1, 1)

    n_dis = int(rng.integers(params.min_distractors, params.max_distractors + 1))
    distractors = []
    min_angle = math.radians(params.distractor_min_angle_deg)
    want_decoy = rng.random() < params.decoy_prob
    for _ in range(params.max_retries * n_dis):
        if len(distractors) == n_dis:
            break
        if want_decoy and not distractors:
            # decoy: just outside the on-ray band, at a plausible gaze distance
            side = 1 if rng.random() < 0.5 else -1
            ang = theta + side * math.radians(rng.uniform(params.decoy_min_angle_deg,
                                                           params.decoy_max_angle_deg))
            p = head + rng.uniform(params.ray_min, params.ray_max) * np.array([math.cos(ang), math.sin(ang)])
            if not np.all((p >= lo) & (p <= hi)):
                continue
        else:
            p = rng.uniform(lo, hi, size=2)
            off = p - head
            if np.hypot(*off) < params.ray_min * 0.75:
                continue
            if _angle_diff(math.atan2(off[1], off[0]), theta) < min_angle:
                continue
        if any(np.hypot(*(p - q)) < 0.1 for q in [target] + distractors):
            continue
        distractors.append(p)
    objects = np.array([target] + distractors)
    saliency = rng.uniform(*params.saliency_range, size=len(objects))
    saliency[0] = rng.uniform(*params.target_saliency_range)
    size = params.size
    cond = render_condition(head, encoded, objects, saliency, params)
    gt = Point(float(target[0]), float(target[1]))
    return SceneSample(id=sample_id, condition=cond, gt_point=gt,
                       gt_heatmap=render_gaussian(gt, params.sigma, size), objects=objects)


def _smooth_noise(rng, shape, smoothing_px):
    field = gaussian_filter(rng.standard_normal(shape), smoothing_px, mode="wrap")
    return minmax_scale(field)


def generate_prior(rng: np.random.Generator, scene: SceneSample, mix: PriorQualityMix = PriorQualityMix(),
                   params: SceneParams = SceneParams()) -> tuple[np.ndarray, int]:
    """Draw a prior class from ``mix`` and render the corresponding heatmap in [0, 1].

    Returns ``(prior, class_index)`` with the index into ``PRIOR_CLASSES``.
    """
    size = params.size
    sigma = params.sigma * mix.spread
    gt = np.array(scene.gt_point)
    distractors = scene.objects[1:] if scene.objects is not None and len(scene.objects) > 1 else None
    cls = int(rng.choice(4, p=mix.probs))
    h = np.zeros(size.shape, dtype=np.float32)
    if cls == 0:
        c = np.clip(gt + mix.jitter * rng.standard_normal(2), 0, 1)
        h = render_gaussian(c, sigma, size)
    elif cls == 1:
        k = int(rng.integers(mix.dispersed_blobs[0], mix.dispersed_blobs[1] + 1))
        centers = [np.clip(gt + 2 * mix.jitter * rng.standard_normal(2), 0, 1)]
        for _ in range(k - 1):
            if distractors is not None and rng.random() < 0.5:
                centers.append(distractors[rng.integers(len(distractors))])
            else:
                centers.append(rng.uniform(0, 1, size=2))
        for c in centers:
            amp = rng.uniform(0.4, 1.0)
            h = np.maximum(h, amp * render_gaussian(c, sigma * rng.uniform(1.0, 1.6), size))
    elif cls == 2:
        if distractors is not None:
            c = distractors[rng.integers(len(distractors))]
        else:
            c = rng.uniform(0, 1, size=2)
        h = render_gaussian(c, sigma, size)
    else:
        h = _smooth_noise(rng, size.shape, params.sigma * mix.noise_smoothing)
    if mix.background > 0:
        h = h + mix.background * _smooth_noise(rng, size.shape, params.sigma * mix.noise_smoothing)
    return minmax_scale(h), cls


# ------------------------------------------------------------------ datasets

def sample_id(seed: int, index: int) -> int:
    return (int(seed) << 32) | int(index)


@dataclass
class UnlabeledView:
    """What pseudo-labeling is allowed to see: no ground truth."""
    ids: np.ndarray
    conditions: np.ndarray
    priors: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class Dataset:
    ids: np.ndarray
    labeled: np.ndarray
    gt_points: np.ndarray
    conditions: np.ndarray
    gt_heatmaps: np.ndarray
    priors: np.ndarray | None
    seed: int = 0
    labeled_fraction: float = 0.0
    params: dict = field(default_factory=dict)
    prior_classes: np.ndarray | None = None
    objects: list | None = None

    def __len__(self):
        return len(self.ids)

    @property
    def size(self) -> GridSize:
        return GridSize(*self.gt_heatmaps.shape[1:])

    def __getitem__(self, i) -> SceneSample:
        return SceneSample(id=int(self.ids[i]), condition=self.conditions[i],
                           gt_point=Point(*map(float, self.gt_points[i])),
                           gt_heatmap=self.gt_heatmaps[i],
                           prior=None if self.priors is None else self.priors[i],
                           labeled=bool(self.labeled[i]),
                           objects=None if self.objects is None else self.objects[i],
                           prior_class=-1 if self.prior_classes is None else int(self.prior_classes[i]))

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Dataset(self.ids[idx], self.labeled[idx], self.gt_points[idx], self.conditions[idx],
                       self.gt_heatmaps[idx], None if self.priors is None else self.priors[idx],
                       self.seed, self.labeled_fraction, dict(self.params),
                       None if self.prior_classes is None else self.prior_classes[idx],
                       None if self.objects is None else [self.objects[i] for i in idx])

    def labeled_part(self) -> "Dataset":
        return self.subset(self.labeled)

    def unlabeled_view(self) -> UnlabeledView:
        mask = ~self.labeled
        if self.priors is None:
            raise InvalidData("dataset has no priors")
        return UnlabeledView(self.ids[mask], self.conditions[mask], self.priors[mask])

    # -- container file

    def save(self, path: str | Path) -> None:
        path = Path(path)
        n = len(self)
        h, w = self.gt_heatmaps.shape[1:]
        c = self.conditions.shape[1]
        has_prior = self.priors is not None
        header = DATASET_MAGIC + struct.pack("<IIIIII", DATASET_VERSION, n, h, w, c, int(has_prior))
        rec = _record_dtype(h, w, c, has_prior)
        arr = np.zeros(n, dtype=rec)
        arr["id"] = self.ids
        arr["labeled"] = self.labeled
        arr["gt"] = self.gt_points
        arr["condition"] = self.conditions
        arr["gt_heatmap"] = self.gt_heatmaps
        if has_prior:
            arr["prior"] = self.priors
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(arr.tobytes())
        tmp.replace(path)
        manifest = {"format": "GCDR dataset", "version": DATASET_VERSION, "n": n, "grid": [h, w],
                    "channels": c, "has_prior": has_prior, "seed": self.seed,
                    "labeled_fraction": self.labeled_fraction, "n_labeled": int(self.labeled.sum()),
                    "params": self.params}
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        data = path.read_bytes()
        if data[:4] != DATASET_MAGIC:
            raise InvalidData(f"{path}: not a dataset container")
        version, n, h, w, c, has_prior = struct.unpack_from("<IIIIII", data, 4)
        if version != DATASET_VERSION:
            raise InvalidData(f"{path}: unsupported version {version}")
        rec = _record_dtype(h, w, c, bool(has_prior))
        arr = np.frombuffer(data, dtype=rec, count=n, offset=28)
        params, seed, frac = {}, 0, 0.0
        mp = manifest_path(path)
        if mp.exists():
            m = json.loads(mp.read_text())
            params, seed, frac = m.get("params", {}), m.get("seed", 0), m.get("labeled_fraction", 0.0)
        return cls(arr["id"].astype(np.int64), arr["labeled"].astype(bool), arr["gt"].astype(np.float64),
                   arr["condition"].astype(np.float32), arr["gt_heatmap"].astype(np.float32),
                   arr["prior"].astype(np.float32) if has_prior else None, seed, frac, params)


def manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def _record_dtype(h, w, c, has_prior):
    fields = [("id", "<u8"), ("labeled", "u1"), ("gt", "<f4", (2,)),
              ("condition", "<f4", (c, h, w)), ("gt_heatmap", "<f4", (h, w))]
    if has_prior:
        fields.append(("prior", "<f4", (h, w)))
    return np.dtype(fields)


def make_dataset(n: int, labeled_fraction: float, seed: int, params: SceneParams = SceneParams(),
                 mix: PriorQualityMix | None = PriorQualityMix(), keep_objects: bool = False) -> Dataset:
    """Generate ``n`` scenes (with priors unless ``mix`` is None) and a seeded labeled split.

    ``labeled_fraction`` of 0 or 1 is allowed for test sets; the CLI rejects
    anything outside (0, 1) for training data.
    """
    if not 0 <= labeled_fraction <= 1:
        raise InvalidArgument(f"labeled fraction must be in [0, 1], got {labeled_fraction}")
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    size = params.size
    ids = np.array([sample_id(seed, i) for i in range(n)], dtype=np.int64)
    conds = np.empty((n, 4) + size.shape, dtype=np.float32)
    gts = np.empty((n,) + size.shape, dtype=np.float32)
    points = np.empty((n, 2))
    priors = None if mix is None else np.empty((n,) + size.shape, dtype=np.float32)
    classes = None if mix is None else np.empty(n, dtype=np.int8)
    objects = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        scene = generate_scene(rng, params, int(ids[i]))
        conds[i], gts[i], points[i] = scene.condition, scene.gt_heatmap, scene.gt_point
        objects.append(scene.objects)
        if mix is not None:
            priors[i], classes[i] = generate_prior(rng, scene, mix, params)
    n_lab = int(round(n * labeled_fraction))
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    labeled = np.zeros(n, dtype=bool)
    labeled[order[:n_lab]] = True
    meta = {"scene": asdict(params)}
    if mix is not None:
        meta["prior_mix"] = asdict(mix)
    return Dataset(ids, labeled, points, conds, gts, priors, seed, labeled_fraction, meta, classes,
                   objects if keep_objects else None)


def prior_avg_dist(ds: Dataset) -> float:
    from .heatmap import argmax_points
    return float(np.mean(np.linalg.norm(argmax_points(ds.priors) - ds.gt_points, axis=1)))
