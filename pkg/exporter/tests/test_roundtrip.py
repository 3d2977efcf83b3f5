"""Cross-component acceptance: everything this exporter writes must load
cleanly through the consumer library's own readers."""

import numpy as np
import pytest

fewvos = pytest.importorskip("fewvos")

from fewvos import load_manifest, read_tensor, sample_episode  # noqa: E402
from fewvos.optimizer import TTIConfig, run_episode  # noqa: E402

from fewvos_exporter import ExportJob, export  # noqa: E402
from fewvos_exporter.backbones import FeatureExtractor  # noqa: E402
from test_export import build_toy_dataset  # noqa: E402


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    data = tmp_path_factory.mktemp("data")
    build_toy_dataset(data, videos=3, frames=4, classes=(1, 1, 1))
    out = tmp_path_factory.mktemp("out")
    manifest_path = export(ExportJob(data_root=data, out_root=out, backbone="tiny"))
    return manifest_path, data


def test_every_emitted_file_validates_under_primary_loader(exported):
    """PASS/FAIL line for the exporter acceptance criterion."""
    manifest_path, _ = exported
    manifest = load_manifest(manifest_path)  # validates schema and file existence
    total = 0
    for video in manifest.videos:
        for rel in video.feature_paths + video.mask_paths:
            tensor = read_tensor(manifest.root / rel)
            assert np.isfinite(tensor).all()
            total += 1
    passed = total == 3 * 4 * 2
    print(f"{'PASS' if passed else 'FAIL'}  exporter round-trip"
          f" (primary loader accepts all {total} files)", flush=True)
    assert passed


def test_reread_tensors_match_exported_values(exported):
    manifest_path, data_root = exported
    manifest = load_manifest(manifest_path)
    extractor = FeatureExtractor("tiny")
    # re-extract one frame and compare against the file the export wrote
    from PIL import Image

    video = manifest.videos[0]
    frame_path = sorted((data_root / video.id / "frames").iterdir())[0]
    with Image.open(frame_path) as img:
        features = extractor.extract(np.asarray(img.convert("RGB")))
    stored = read_tensor(manifest.root / video.feature_paths[0])
    np.testing.assert_array_equal(stored, features.astype(np.float32))


def test_exported_dataset_supports_episode_sampling(exported):
    manifest_path, _ = exported
    manifest = load_manifest(manifest_path)
    episode = sample_episode(manifest, "fold0", class_id=1, shots=2, frames=3,
                             seed=0)
    assert episode.support.shots == 2
    assert episode.n_frames == 3
    assert episode.gt is not None
    masks, trace = run_episode(
        episode,
        TTIConfig(iterations=10, prior_update_iteration=4, refine_iterations=2),
    )
    assert masks.shape == episode.gt.shape


def test_channel_count_recorded_and_constant(exported):
    import json

    manifest_path, _ = exported
    doc = json.loads(manifest_path.read_text())
    manifest = load_manifest(manifest_path)
    channels = {
        read_tensor(manifest.root / v.feature_paths[0]).shape[0]
        for v in manifest.videos
    }
    assert channels == {doc["channels"]}
