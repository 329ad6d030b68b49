import json

import numpy as np
import pytest
from scipy import stats

from roilab.data import (
    DatasetFormatError,
    MissingManifestError,
    SynthConfig,
    generate_context_shapes,
    iterate_batches,
    load_dataset,
    rasterize,
    roi_area,
    save_dataset,
)
from roilab.metrics import DESK_EDGES

SMALL = SynthConfig(image_size=32, samples_per_class=25, noise_std=0.0)


@pytest.fixture(scope="module")
def small_ds():
    return generate_context_shapes(SMALL, seed=5)


def test_roi_area_examples(rng):
    assert roi_area(np.zeros((8, 8))) == 0
    assert roi_area(np.ones((8, 8))) == 64
    m = (rng.random((13, 17)) > 0.6).astype(np.uint8)
    assert roi_area(m) == sum(int(v) for row in m for v in row)
    with pytest.raises(ValueError):
        roi_area(np.full((2, 2), 0.5))


@pytest.mark.parametrize("shape", ["disk", "square", "triangle", "cross", "diamond", "bar"])
@pytest.mark.parametrize("area", [4.0, 60.0, 400.0])
def test_raster_area_tracks_target(shape, area):
    m = rasterize(shape, area, 32.0, 32.0, 64)
    assert m.any()
    if area >= 60:
        assert abs(m.sum() - area) / area < 0.25


def test_config_validation():
    with pytest.raises(ValueError, match="shape_scale_range"):
        SynthConfig(shape_scale_range=(0.1, 0.6))
    with pytest.raises(ValueError, match="num_shapes"):
        SynthConfig(num_shapes=0)
    assert SynthConfig().num_classes == 8


def test_seed_is_required():
    with pytest.raises(ValueError, match="seed"):
        generate_context_shapes(SMALL, None)


def test_regeneration_is_bitwise_identical(small_ds):
    again = generate_context_shapes(SMALL, seed=5)
    assert np.array_equal(small_ds.images, again.images)
    assert np.array_equal(small_ds.masks, again.masks)
    assert np.array_equal(small_ds.labels, again.labels)
    other = generate_context_shapes(SMALL, seed=6)
    assert not np.array_equal(small_ds.images, other.images)


def test_samples_are_well_formed(small_ds):
    assert small_ds.images.dtype == np.float32
    assert small_ds.images.min() >= 0 and small_ds.images.max() <= 1
    assert np.bincount(small_ds.labels, minlength=8).tolist() == [25] * 8
    assert all(small_ds.masks[i].sum() >= 1 for i in range(len(small_ds)))
    assert np.array_equal(small_ds.roi_areas, small_ds.masks.reshape(len(small_ds), -1).sum(axis=1))
    assert small_ds.splits.count("test") == 8 * 5


def test_mask_is_exactly_the_painted_shape(small_ds):
    # foreground colours have every channel >= 0.6; background and halo do not
    painted = small_ds.images.min(axis=1) >= 0.6 - 1e-6
    assert np.array_equal(painted, small_ds.masks.astype(bool))


def test_context_lives_outside_the_roi(small_ds):
    colors = {0: (0.55, 0.11, 0.11), 1: (0.11, 0.11, 0.55)}
    for i in range(len(small_ds)):
        s = small_ds[i]
        outside = s.image[:, s.mask == 0]
        target = np.round(np.array(colors[s.label % 2]) * 255) / 255
        is_ctx = np.all(np.abs(outside - target[:, None]) < 1e-6, axis=0)
        assert is_ctx.mean() > 0.5
        inside = s.image[:, s.mask == 1]
        assert not np.any(np.all(np.abs(inside - target[:, None]) < 1e-6, axis=0))


def test_roi_interior_independent_of_context():
    ds = generate_context_shapes(SynthConfig(image_size=32, samples_per_class=150, noise_std=0.0), seed=11)
    means = [ds.images[i][:, ds.masks[i] == 1].mean(axis=1) for i in range(len(ds))]
    means = np.array(means)
    ctx = ds.labels % 2
    for ch in range(3):
        p = stats.ttest_ind(means[ctx == 0, ch], means[ctx == 1, ch]).pvalue
        assert p > 1e-3


def test_default_generation_populates_reachable_buckets():
    ds = generate_context_shapes(SynthConfig(), seed=0)
    assert len(ds) == 8000
    counts = np.histogram(ds.roi_areas, bins=DESK_EDGES)[0]
    # areas top out at 0.3 * 64 * 64 = 1229 pixels, so the last bucket stays empty
    assert all(c >= 100 for c in counts[:6]), counts
    assert counts[6] == 0


def test_iterate_batches(small_ds):
    ten = small_ds.subset(range(10))
    assert [len(b[2]) for b in iterate_batches(ten, 3)] == [3, 3, 3, 1]
    labels = np.concatenate([b[2] for b in iterate_batches(ten, 4, shuffle=False)])
    assert np.array_equal(labels, ten.labels)
    imgs, masks, _ = next(iterate_batches(ten, 4))
    assert masks.shape == (4, 1, 32, 32) and masks.dtype == np.float32


def test_shuffle_is_a_per_epoch_permutation(small_ds):
    def order(epoch):
        return np.concatenate([b[2] for b in iterate_batches(small_ds, 7, True, seed=3, epoch=epoch)])

    e0, e1 = order(0), order(1)
    assert np.array_equal(np.sort(e0), np.sort(small_ds.labels))
    assert np.array_equal(e0, order(0)) and np.array_equal(e1, order(1))
    assert not np.array_equal(e0, e1)


def test_round_trip_is_exact(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.ids == small_ds.ids and loaded.splits == small_ds.splits
    assert np.array_equal(loaded.labels, small_ds.labels)
    assert np.array_equal(loaded.roi_areas, small_ds.roi_areas)
    assert np.array_equal(loaded.masks, small_ds.masks)
    assert np.max(np.abs(loaded.images - small_ds.images)) <= 1 / 255
    assert np.array_equal(loaded.images, small_ds.images)
    assert loaded.config == small_ds.config and loaded.seed == 5
    first = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert set(first) == {"id", "label", "roi_area", "split", "image", "mask"}
    assert (tmp_path / "images" / f"{first['id']}.ppm").read_bytes()[:2] == b"P6"
    assert (tmp_path / "masks" / f"{first['id']}.pgm").read_bytes()[:2] == b"P5"


def test_empty_directory_has_distinct_error(tmp_path):
    with pytest.raises(MissingManifestError):
        load_dataset(tmp_path)


def test_count_mismatch_rejected(small_ds, tmp_path):
    save_dataset(small_ds.subset(range(6)), tmp_path)
    (tmp_path / "images" / "000003.ppm").unlink()
    with pytest.raises(DatasetFormatError, match="manifest lists 6"):
        load_dataset(tmp_path)


def test_corrupt_image_names_sample(small_ds, tmp_path):
    save_dataset(small_ds.subset(range(6)), tmp_path)
    sid = small_ds.ids[2]
    (tmp_path / "images" / f"{sid}.ppm").write_bytes(b"P6\n32 32\n255\n" + b"\0" * 10)
    with pytest.raises(DatasetFormatError, match=sid):
        load_dataset(tmp_path)


def test_roi_area_mismatch_rejected(small_ds, tmp_path):
    save_dataset(small_ds.subset(range(3)), tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    entry = json.loads(lines[1])
    entry["roi_area"] += 1
    lines[1] = json.dumps(entry)
    (tmp_path / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=entry["id"]):
        load_dataset(tmp_path)
