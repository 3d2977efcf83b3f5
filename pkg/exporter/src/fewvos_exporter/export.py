"""Batch export of a frame/mask dataset into feature tensors plus a manifest.

Expected dataset layout::

    data_root/
      <video_id>/
        frames/  one image per frame (sorted by name)
        masks/   one mask image per frame, same stem (optional)

Mask images carry integer class ids.  Exported masks are downsampled to
the feature resolution by nearest neighbour; a video whose exported
frames are not all annotated is exported without masks (losses cannot
score half-annotated sequences).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import FeatureExtractor
from .formats import nearest_resize, write_manifest, write_tensor

logger = logging.getLogger("fewvos_exporter")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    data_root: Path
    out_root: Path
    backbone: str = "resnet50"
    stage: str = "layer3"
    weights: str | None = None
    stride: int = 1
    class_remap: dict[int, int] = field(default_factory=dict)
    folds: dict | None = None
    seed: int = 0

    def __post_init__(self):
        self.data_root = Path(self.data_root)
        self.out_root = Path(self.out_root)
        if self.stride < 1:
            raise ValueError("stride must be at least 1")


def _list_frames(video_dir: Path) -> list[Path]:
    frames_dir = video_dir / "frames"
    if not frames_dir.is_dir():
        return []
    return sorted(
        p for p in frames_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def _mask_path(video_dir: Path, frame: Path) -> Path | None:
    masks_dir = video_dir / "masks"
    if not masks_dir.is_dir():
        return None
    for suffix in IMAGE_SUFFIXES:
        candidate = masks_dir / (frame.stem + suffix)
        if candidate.exists():
            return candidate
    return None


def _load_mask(path: Path, remap: dict[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        data = np.asarray(img.convert("P") if img.mode == "P" else img.convert("L"))
    mask = data.astype(np.int64)
    if remap:
        out = mask.copy()
        for src, dst in remap.items():
            out[mask == src] = dst
        mask = out
    return mask


def export(job: ExportJob) -> Path:
    """Run the export; returns the path of the written manifest."""
    if not job.data_root.is_dir():
        raise ExportError(f"dataset root {job.data_root} does not exist")
    extractor = FeatureExtractor(job.backbone, job.stage, job.weights, job.seed)
    job.out_root.mkdir(parents=True, exist_ok=True)
    videos = []
    channels: int | None = None
    all_classes: set[int] = set()
    for video_dir in sorted(p for p in job.data_root.iterdir() if p.is_dir()):
        frames = _list_frames(video_dir)[:: job.stride]
        if not frames:
            logger.warning("video %s has no frames, skipping", video_dir.name)
            continue
        out_dir = job.out_root / video_dir.name
        out_dir.mkdir(parents=True, exist_ok=True)
        feature_paths: list[str] = []
        mask_paths: list[str] = []
        classes: set[int] = set()
        masks_complete = True
        for frame in frames:
            try:
                with Image.open(frame) as img:
                    rgb = np.asarray(img.convert("RGB"))
                features = extractor.extract(rgb)
            except (OSError, ValueError) as exc:
                logger.warning("skipping unreadable frame %s: %s", frame, exc)
                continue
            if channels is None:
                channels = features.shape[0]
            elif features.shape[0] != channels:
                raise ExportError(
                    f"channel count changed mid-export: {features.shape[0]}"
                    f" vs {channels}"
                )
            feature_rel = f"{video_dir.name}/{frame.stem}_f.fts"
            write_tensor(features, job.out_root / feature_rel)
            feature_paths.append(feature_rel)

            mask_file = _mask_path(video_dir, frame)
            if mask_file is None:
                masks_complete = False
                continue
            mask = _load_mask(mask_file, job.class_remap)
            small = nearest_resize(mask, features.shape[1:])
            classes.update(int(c) for c in np.unique(small) if c != 0)
            mask_rel = f"{video_dir.name}/{frame.stem}_m.fts"
            write_tensor(small.astype(np.float32), job.out_root / mask_rel)
            mask_paths.append(mask_rel)
        if not feature_paths:
            logger.warning("video %s produced no frames, skipping", video_dir.name)
            continue
        if not masks_complete or len(mask_paths) != len(feature_paths):
            if mask_paths:
                logger.warning(
                    "video %s is only partially annotated; dropping its masks",
                    video_dir.name,
                )
            mask_paths = []
            classes = set()
        videos.append({
            "id": video_dir.name,
            "frame_count": len(feature_paths),
            "features": feature_paths,
            "masks": mask_paths,
            "classes": sorted(classes),
        })
        all_classes.update(classes)
    if not videos:
        raise ExportError(f"no exportable videos under {job.data_root}")
    folds = job.folds or {
        "fold0": {"train": [], "val": [], "test": sorted(all_classes)}
    }
    manifest_path = job.out_root / "manifest.json"
    write_manifest(videos, folds, manifest_path, channels=channels)
    logger.info("exported %d videos to %s", len(videos), manifest_path)
    return manifest_path
