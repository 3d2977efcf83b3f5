"""Episode data model, manifest-driven sampling, and a synthetic episode
generator for desk-scale experiments.

A dataset manifest is a JSON document next to its tensor files:

    {
      "format_version": 1,
      "videos": [
        {"id": "vidA", "frame_count": 2, "classes": [1, 2],
         "features": ["vidA/f0.fts", "vidA/f1.fts"],
         "masks": ["vidA/m0.fts", "vidA/m1.fts"]}
      ],
      "folds": {"fold0": {"train": [2], "val": [], "test": [1]}}
    }

Paths are relative to the manifest file.  Mask tensors hold integer class
ids; episodes binarize them against the sampled class (one class versus
background).  Test and train class lists of a fold must be disjoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SamplingError
from .numerics import normalize, normalize_columns
from .tensorio import read_tensor, write_tensor
from .validation import as_float_array

MANIFEST_VERSION = 1


@dataclass
class FeatureSequence:
    """Per-frame feature maps ``[N_v, C, H, W]`` plus normalization state."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = as_float_array(self.values, "features", ndim=4)

    def normalized_copy(self) -> "FeatureSequence":
        if self.normalized:
            return self
        return FeatureSequence(normalize_columns(self.values), normalized=True)


@dataclass
class SupportSet:
    """K labelled (feature map, binary mask) pairs defining one class."""

    features: np.ndarray  # [K, C, H, W]
    masks: np.ndarray  # [K, H, W] in {0, 1}
    normalized: bool = False

    def __post_init__(self):
        self.features = as_float_array(self.features, "support features", ndim=4)
        self.masks = np.asarray(self.masks).astype(np.uint8)
        if self.masks.shape != (self.features.shape[0],) + self.features.shape[2:]:
            raise ValueError("support masks do not align with support features")

    @property
    def shots(self) -> int:
        return self.features.shape[0]

    def normalized_copy(self) -> "SupportSet":
        if self.normalized:
            return self
        return SupportSet(normalize_columns(self.features), self.masks, normalized=True)


@dataclass
class Episode:
    """One support set, one query frame sequence, optional ground truth."""

    support: SupportSet
    query: FeatureSequence
    gt: np.ndarray | None = None  # [N_v, H, W] in {0, 1}
    class_id: int = 0
    seed: int | None = None
    episode_id: str = "episode"

    def __post_init__(self):
        if self.support.features.shape[1] != self.query.values.shape[1]:
            raise ValueError("support and query channel counts differ")
        if self.gt is not None:
            self.gt = np.asarray(self.gt).astype(np.uint8)
            if self.gt.shape != (self.query.values.shape[0],) + self.query.values.shape[2:]:
                raise ValueError("ground truth does not align with query frames")

    @property
    def n_frames(self) -> int:
        return self.query.values.shape[0]

    def normalized(self) -> "Episode":
        if self.support.normalized and self.query.normalized:
            return self
        return Episode(
            support=self.support.normalized_copy(),
            query=self.query.normalized_copy(),
            gt=self.gt,
            class_id=self.class_id,
            seed=self.seed,
            episode_id=self.episode_id,
        )


@dataclass
class VideoRecord:
    id: str
    frame_count: int
    feature_paths: list[str]
    mask_paths: list[str]
    classes: list[int]


@dataclass
class Fold:
    train: list[int]
    val: list[int]
    test: list[int]


@dataclass
class DatasetManifest:
    videos: list[VideoRecord]
    folds: dict[str, Fold]
    root: Path = field(default_factory=Path)

    def video(self, video_id: str) -> VideoRecord:
        for record in self.videos:
            if record.id == video_id:
                return record
        raise KeyError(video_id)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a dataset manifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"manifest {path} is not valid JSON: {exc}") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ValueError(
            f"unsupported manifest version {doc.get('format_version')!r}"
        )
    videos = []
    seen = set()
    for entry in doc.get("videos", []):
        record = VideoRecord(
            id=str(entry["id"]),
            frame_count=int(entry["frame_count"]),
            feature_paths=list(entry["features"]),
            mask_paths=list(entry.get("masks", [])),
            classes=[int(c) for c in entry.get("classes", [])],
        )
        if record.id in seen:
            raise ValueError(f"duplicate video id {record.id!r}")
        seen.add(record.id)
        if len(record.feature_paths) != record.frame_count:
            raise ValueError(
                f"video {record.id!r}: {len(record.feature_paths)} feature files"
                f" for {record.frame_count} frames"
            )
        if record.mask_paths and len(record.mask_paths) != record.frame_count:
            raise ValueError(
                f"video {record.id!r}: mask list must be empty or one per frame"
            )
        videos.append(record)
    folds = {}
    for name, spec in doc.get("folds", {}).items():
        fold = Fold(
            train=[int(c) for c in spec.get("train", [])],
            val=[int(c) for c in spec.get("val", [])],
            test=[int(c) for c in spec.get("test", [])],
        )
        overlap = set(fold.train) & set(fold.test)
        if overlap:
            raise ValueError(f"fold {name!r}: train/test classes overlap: {overlap}")
        folds[name] = fold
    manifest = DatasetManifest(videos=videos, folds=folds, root=path.parent)
    if check_files:
        for record in manifest.videos:
            for rel in record.feature_paths + record.mask_paths:
                if not (manifest.root / rel).exists():
                    raise ValueError(f"missing file referenced by manifest: {rel}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "format_version": MANIFEST_VERSION,
        "videos": [
            {
                "id": v.id,
                "frame_count": v.frame_count,
                "classes": v.classes,
                "features": v.feature_paths,
                "masks": v.mask_paths,
            }
            for v in manifest.videos
        ],
        "folds": {
            name: {"train": f.train, "val": f.val, "test": f.test}
            for name, f in manifest.folds.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def sample_episode(
    manifest: DatasetManifest,
    fold: str,
    class_id: int,
    shots: int,
    frames: int,
    seed: int,
) -> Episode:
    """Draw one episode: query frames from one video, support from others.

    The query is a run of consecutive frames; support images come from
    videos disjoint from the query video and must actually contain the
    class.  Deterministic under ``seed``.
    """
    if fold not in manifest.folds:
        raise SamplingError(f"unknown fold {fold!r}")
    if class_id not in manifest.folds[fold].test:
        raise SamplingError(
            f"class {class_id} is not in the test split of fold {fold!r}"
        )
    rng = np.random.default_rng(seed)
    candidates = [
        v for v in manifest.videos
        if class_id in v.classes and v.frame_count >= frames and v.mask_paths
    ]
    if not candidates:
        raise SamplingError(
            f"no video contains class {class_id} with at least {frames} frames"
        )
    query_video = candidates[int(rng.integers(len(candidates)))]
    start = int(rng.integers(query_video.frame_count - frames + 1))

    support_pool = [
        (v.id, idx)
        for v in manifest.videos
        if v.id != query_video.id and class_id in v.classes and v.mask_paths
        for idx in range(v.frame_count)
    ]
    if not support_pool:
        raise SamplingError(
            f"no video other than the query video {query_video.id!r} contains"
            f" class {class_id} (support and query must be disjoint)"
        )
    order = rng.permutation(len(support_pool))
    support_feats, support_masks = [], []
    for pick in order:
        video_id, idx = support_pool[int(pick)]
        record = manifest.video(video_id)
        mask = read_tensor(manifest.root / record.mask_paths[idx])
        binary = (np.rint(mask) == class_id).astype(np.uint8)
        if binary.sum() == 0:
            continue
        support_feats.append(read_tensor(manifest.root / record.feature_paths[idx]))
        support_masks.append(binary)
        if len(support_feats) == shots:
            break
    if len(support_feats) < shots:
        raise SamplingError(
            f"only {len(support_feats)} support frames with class {class_id}"
            f" outside video {query_video.id!r}; need {shots}"
        )

    query_feats = np.stack([
        read_tensor(manifest.root / query_video.feature_paths[start + i])
        for i in range(frames)
    ])
    gt = None
    if query_video.mask_paths:
        gt = np.stack([
            (np.rint(read_tensor(manifest.root / query_video.mask_paths[start + i]))
             == class_id).astype(np.uint8)
            for i in range(frames)
        ])
    return Episode(
        support=SupportSet(np.stack(support_feats), np.stack(support_masks)),
        query=FeatureSequence(query_feats),
        gt=gt,
        class_id=class_id,
        seed=seed,
        episode_id=f"{fold}-c{class_id}-{query_video.id}-f{start}-s{seed}",
    )


@dataclass
class SyntheticSpec:
    """Controls for generated episodes.

    The two stressors the temporal machinery targets are exposed directly:
    ``drift`` rotates the foreground feature direction a fixed angle per
    frame, and ``area_fractions`` vary the foreground proportion per frame.
    Background columns live in the subspace orthogonal to the drift plane,
    so the foreground stays separable for any total drift below 90 degrees.
    """

    channels: int = 16
    height: int = 16
    width: int = 16
    frames: int = 8
    shots: int = 5
    drift: float = 0.0  # radians per frame
    noise: float = 0.1
    area_fractions: float | list[float] = 0.3
    support_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.channels < 3:
            raise ValueError("need at least 3 channels for an orthogonal background")
        if self.frames < 1 or self.shots < 1:
            raise ValueError("frames and shots must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        fracs = self.fractions()
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ValueError("area fractions must lie in (0, 1)")
        total_drift = (self.frames - 1) * abs(self.drift)
        if total_drift + min(self.noise, 1.0) >= math.pi / 2:
            raise ValueError(
                "drift too large: the foreground direction would become"
                " indistinguishable from the background"
            )

    def fractions(self) -> list[float]:
        if isinstance(self.area_fractions, (int, float)):
            return [float(self.area_fractions)] * self.frames
        if len(self.area_fractions) != self.frames:
            raise ValueError("area_fractions list must have one entry per frame")
        return [float(f) for f in self.area_fractions]

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "channels": self.channels, "height": self.height, "width": self.width,
            "frames": self.frames, "shots": self.shots, "drift": self.drift,
            "noise": self.noise, "area_fractions": self.area_fractions,
            "support_fraction": self.support_fraction, "seed": self.seed,
        }


def _block_mask(height: int, width: int, count: int,
                block_width: int, anchor: tuple[int, int]) -> np.ndarray:
    """Row-major fill of ``count`` pixels in a ``block_width``-wide block."""
    mask = np.zeros((height, width), dtype=np.uint8)
    r0, c0 = anchor
    remaining = count
    row = r0
    while remaining > 0:
        take = min(block_width, remaining)
        mask[row, c0:c0 + take] = 1
        remaining -= take
        row += 1
    return mask


def _random_anchor(rng: np.random.Generator, height: int, width: int,
                   rows_needed: int, block_width: int) -> tuple[int, int]:
    r0 = int(rng.integers(0, height - rows_needed + 1))
    c0 = int(rng.integers(0, width - block_width + 1))
    return r0, c0


def _fill_features(
    rng: np.random.Generator,
    mask: np.ndarray,
    direction: np.ndarray,
    drift_plane: tuple[np.ndarray, np.ndarray],
    channels: int,
    noise: float,
) -> np.ndarray:
    """Unit feature columns: foreground along ``direction``, background in
    the subspace orthogonal to the drift plane, both noise-perturbed."""
    h, w = mask.shape
    d, e = drift_plane
    raw = rng.standard_normal((h * w, channels))
    raw -= np.outer(raw @ d, d) + np.outer(raw @ e, e)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    raw = raw / np.where(norms < 1e-12, 1.0, norms)
    flat_mask = mask.reshape(-1).astype(bool)
    raw[flat_mask] = direction
    raw = raw + noise * rng.standard_normal(raw.shape)
    features = normalize_columns(raw.T.reshape(channels, h, w))
    return features


def generate_synthetic(spec: SyntheticSpec) -> Episode:
    """One episode with known ground truth, deterministic under the seed."""
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.channels, spec.height, spec.width
    d = normalize(rng.standard_normal(c))
    e = rng.standard_normal(c)
    e = normalize(e - np.dot(e, d) * d)
    fracs = spec.fractions()

    max_count = max(int(round(f * h * w)) for f in fracs)
    min_width = max(1, w // 3, int(math.ceil(max_count / h)))
    block_width = int(rng.integers(min_width, w + 1))
    max_rows = int(math.ceil(max_count / block_width))
    anchor = _random_anchor(rng, h, w, max_rows, block_width)

    frames, masks = [], []
    for t in range(spec.frames):
        count = max(1, min(h * w - 1, int(round(fracs[t] * h * w))))
        rows_needed = int(math.ceil(count / block_width))
        step = rng.integers(-1, 2, size=2)
        anchor = (
            int(np.clip(anchor[0] + step[0], 0, h - rows_needed)),
            int(np.clip(anchor[1] + step[1], 0, w - block_width)),
        )
        mask = _block_mask(h, w, count, block_width, anchor)
        angle = t * spec.drift
        direction = d * math.cos(angle) + e * math.sin(angle)
        frames.append(_fill_features(rng, mask, direction, (d, e), c, spec.noise))
        masks.append(mask)

    support_frac = (
        spec.support_fraction
        if spec.support_fraction is not None
        else float(np.mean(fracs))
    )
    support_feats, support_masks = [], []
    for _ in range(spec.shots):
        count = max(1, min(h * w - 1, int(round(support_frac * h * w))))
        bw = int(rng.integers(max(1, w // 3, int(math.ceil(count / h))), w + 1))
        rows_needed = int(math.ceil(count / bw))
        a = _random_anchor(rng, h, w, rows_needed, bw)
        mask = _block_mask(h, w, count, bw, a)
        support_masks.append(mask)
        support_feats.append(_fill_features(rng, mask, d, (d, e), c, spec.noise))

    return Episode(
        support=SupportSet(np.stack(support_feats), np.stack(support_masks)),
        query=FeatureSequence(np.stack(frames)),
        gt=np.stack(masks),
        class_id=1,
        seed=spec.seed,
        episode_id=f"synthetic-s{spec.seed}",
    )


def save_episode(episode: Episode, directory) -> None:
    """Materialize one episode as FTS tensors plus a metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(episode.support.features, directory / "support_features.fts")
    write_tensor(episode.support.masks.astype(np.float64),
                 directory / "support_masks.fts")
    write_tensor(episode.query.values, directory / "query_features.fts")
    if episode.gt is not None:
        write_tensor(episode.gt.astype(np.float64), directory / "gt_masks.fts")
    meta = {
        "episode_id": episode.episode_id,
        "class_id": episode.class_id,
        "seed": episode.seed,
        "shots": episode.support.shots,
        "frames": episode.n_frames,
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_episode(directory) -> Episode:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    gt_path = directory / "gt_masks.fts"
    gt = None
    if gt_path.exists():
        gt = np.rint(read_tensor(gt_path)).astype(np.uint8)
    return Episode(
        support=SupportSet(
            read_tensor(directory / "support_features.fts"),
            np.rint(read_tensor(directory / "support_masks.fts")).astype(np.uint8),
        ),
        query=FeatureSequence(read_tensor(directory / "query_features.fts")),
        gt=gt,
        class_id=int(meta["class_id"]),
        seed=meta.get("seed"),
        episode_id=str(meta["episode_id"]),
    )
