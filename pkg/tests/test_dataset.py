import hashlib
import json

import numpy as np
import pytest
import torch.nn.functional as F
from PIL import Image

from lococontrast.dataset import (DatasetManifest, ImageSample, SynthConfig, ensure_min_size,
                                  generate_synthetic, load_image_dir, open_dataset, pad_batch,
                                  render_scene, write_png)
from lococontrast.errors import ConfigError, ContractViolation, EmptyDataset


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def synth10(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return generate_synthetic(SynthConfig(image_size=256, seed=7), 10, out), out


def test_generate_writes_files_and_manifest(synth10):
    manifest, out = synth10
    assert len(manifest) == 10
    assert sorted(p.name for p in out.glob("*.png")) == [f"synth_{k:06d}.png" for k in range(10)]
    raw = json.loads((out / "manifest.json").read_text())
    assert raw["split"] == "train" and len(raw["items"]) == 10
    assert raw["generator_config"]["image_size"] == 256
    reloaded = DatasetManifest.from_file(out / "manifest.json")
    assert [i.id for i in reloaded.items] == [i.id for i in manifest.items]
    assert reloaded.load(0).source == "synthetic"


def test_regeneration_is_byte_identical(synth10, tmp_path):
    _, out = synth10
    generate_synthetic(SynthConfig(image_size=256, seed=7), 10, tmp_path)
    for name in [f"synth_{k:06d}.png" for k in range(10)] + ["manifest.json"]:
        assert digest(out / name) == digest(tmp_path / name)


def test_different_seed_changes_images(synth10, tmp_path):
    _, out = synth10
    generate_synthetic(SynthConfig(image_size=256, seed=8), 1, tmp_path)
    assert digest(out / "synth_000000.png") != digest(tmp_path / "synth_000000.png")


def test_images_hold_at_least_three_visible_shapes(synth10):
    manifest, _ = synth10
    for k, item in enumerate(manifest.items):
        img = manifest.load(k)
        assert img.width == img.height == 256
        assert 3 <= len(item.shapes) <= 8
        for shape in item.shapes:
            x0, y0, x1, y1 = shape["box"]
            assert 0 <= x0 < x1 <= 256 and 0 <= y0 < y1 <= 256
            # the fill colour appears at the box center for every kind
            cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
            assert np.allclose(img.pixels[cy, cx], shape["color"], atol=1 / 255 + 1e-4)
        boxes = [s["box"] for s in item.shapes]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                assert a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def test_all_pixels_in_unit_range(synth10):
    manifest, _ = synth10
    for k in range(len(manifest)):
        p = manifest.load(k).pixels
        assert p.dtype == np.float32 and p.min() >= 0.0 and p.max() <= 1.0


def test_render_scene_is_deterministic():
    a, sa = render_scene(SynthConfig(), 123)
    b, sb = render_scene(SynthConfig(), 123)
    assert np.array_equal(a, b) and sa == sb


@pytest.mark.parametrize("kwargs", [dict(image_size=64), dict(min_shapes=0), dict(min_shapes=5, max_shapes=4),
                                    dict(kinds=("hexagon",)), dict(max_shape_size=300)])
def test_bad_synth_config(kwargs, tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(**kwargs), 1, tmp_path)


def test_count_must_be_positive(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(), 0, tmp_path)


def test_start_index_gives_disjoint_ids(tmp_path):
    m = generate_synthetic(SynthConfig(), 2, tmp_path, split="eval", start_index=1000)
    assert [i.id for i in m.items] == ["synth_001000", "synth_001001"]
    assert m.split == "eval"


def _write(path, w=8, h=6, value=0):
    Image.fromarray(np.full((h, w, 3), value, np.uint8)).save(path)


def test_load_image_dir_order(tmp_path):
    for name in ["c.png", "a.png", "b.png"]:
        _write(tmp_path / name)
    m = load_image_dir(tmp_path)
    assert [i.id for i in m.items] == ["a", "b", "c"]
    assert m.warnings == []
    assert m.load(1).source == "file"


def test_load_image_dir_skips_undecodable(tmp_path):
    _write(tmp_path / "a.png")
    _write(tmp_path / "b.png")
    (tmp_path / "notes.txt").write_text("not an image")
    m = load_image_dir(tmp_path)
    assert [i.id for i in m.items] == ["a", "b"]
    assert len(m.warnings) == 1 and "notes.txt" in m.warnings[0]


def test_load_image_dir_empty(tmp_path):
    with pytest.raises(EmptyDataset):
        load_image_dir(tmp_path)
    (tmp_path / "junk.bin").write_bytes(b"\x00\x01")
    with pytest.raises(EmptyDataset):
        load_image_dir(tmp_path)


def test_open_dataset_prefers_manifest(synth10, tmp_path):
    _, out = synth10
    assert open_dataset(out).generator_config is not None
    assert open_dataset(out / "manifest.json").generator_config is not None
    _write(tmp_path / "x.png")
    assert open_dataset(tmp_path).generator_config is None
    with pytest.raises(FileNotFoundError):
        open_dataset(tmp_path / "missing")


def test_manifest_rejects_duplicates_and_bad_split():
    from lococontrast.dataset import ManifestItem
    with pytest.raises(ConfigError):
        DatasetManifest(items=[ManifestItem("a", "a.png"), ManifestItem("a", "b.png")])
    with pytest.raises(ConfigError):
        DatasetManifest(items=[], split="test")


def sample(w, h, rng):
    return ImageSample("s", rng.random((h, w, 3)).astype(np.float32))


def test_ensure_min_size_examples(rng):
    out = ensure_min_size(sample(304, 200, rng), 608)
    assert (out.width, out.height) == (608, 400)
    big = sample(700, 700, rng)
    assert ensure_min_size(big, 608) is big
    s = sample(256, 256, rng)
    assert ensure_min_size(s, 256) is s
    with pytest.raises(ConfigError):
        ensure_min_size(s, 0)


def test_ensure_min_size_matches_bilinear_oracle(rng):
    s = sample(30, 20, rng)
    out = ensure_min_size(s, 60)
    ref = F.interpolate(s.to_tensor()[None], scale_factor=2, mode="bilinear", align_corners=False)
    assert np.allclose(out.pixels, ref[0].permute(1, 2, 0).numpy(), atol=1e-6)


@pytest.mark.parametrize("w,h", [(97, 13), (13, 97), (300, 299), (1, 5), (123, 45)])
def test_ensure_min_size_preserves_aspect(rng, w, h):
    out = ensure_min_size(sample(w, h, rng), 608)
    assert max(out.width, out.height) == 608
    scale = 608 / max(w, h)
    assert abs(out.width - w * scale) <= 1 and abs(out.height - h * scale) <= 1


def test_pad_batch_examples(rng):
    b = pad_batch([sample(608, 400, rng), sample(500, 608, rng)])
    assert (b.width, b.height) == (608, 608)
    assert b.original_sizes == [(608, 400), (500, 608)]
    assert np.all(b.images[0][400:] == 0) and np.all(b.images[1][:, 500:] == 0)
    one = sample(31, 17, rng)
    single = pad_batch([one])
    assert np.array_equal(single.images[0], one.pixels)


def test_pad_batch_round_trip(rng):
    imgs = [sample(int(rng.integers(10, 80)), int(rng.integers(10, 80)), rng) for _ in range(4)]
    b = pad_batch(imgs)
    assert b.to_tensor().shape == (4, 3, b.height, b.width)
    for orig, back in zip(imgs, b.unpad()):
        assert np.array_equal(orig.pixels, back)


def test_pad_batch_empty():
    with pytest.raises(ContractViolation):
        pad_batch([])


def test_write_png_round_trip(tmp_path, rng):
    px = (rng.integers(0, 256, (5, 7, 3)) / 255.0).astype(np.float32)
    write_png(px, tmp_path / "x.png")
    back = np.asarray(Image.open(tmp_path / "x.png"), dtype=np.float32) / 255.0
    assert np.allclose(back, px, atol=1e-6)
