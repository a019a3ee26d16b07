"""Metrics, k-fold splitting, dataset I/O and the synthetic generator."""
import numpy as np
import pytest

from lesionpipe.data import (
    load_dataset,
    load_mask,
    nearest_resize_array,
    resize_pair,
    sample_from_arrays,
    save_mask,
    synth_generate,
    write_dataset,
    _single_4connected,
)
from lesionpipe.errors import DatasetError, ShapeError
from lesionpipe.geometry import Box
from lesionpipe.metrics import aggregate_metrics, compute_metrics, kfold_split


# ---------------------------------------------------------------------------
# compute_metrics

def test_metrics_perfect_prediction():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[2:4, 2:5] = 1
    r = compute_metrics(m, m)
    assert (r.accuracy, r.dice, r.jaccard, r.sensitivity, r.specificity) == (1, 1, 1, 1, 1)
    assert r.vacuous == ()


def test_metrics_hand_confusion_matrix():
    gt = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    pred = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    r = compute_metrics(pred, gt)
    assert (r.tp, r.fp, r.tn, r.fn) == (1, 1, 2, 0)
    assert r.accuracy == pytest.approx(0.75)
    assert r.sensitivity == 1.0
    assert r.specificity == pytest.approx(2 / 3)
    assert r.jaccard == pytest.approx(0.5)
    assert r.dice == pytest.approx(2 / 3)


def test_metrics_match_bruteforce_confusion(rng):
    for _ in range(200):
        shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        gt = (rng.random(shape) > 0.5).astype(np.uint8)
        pred = (rng.random(shape) > 0.5).astype(np.uint8)
        r = compute_metrics(pred, gt)
        tp = fp = tn = fn = 0
        for i in range(shape[0]):
            for j in range(shape[1]):
                if pred[i, j] and gt[i, j]:
                    tp += 1
                elif pred[i, j] and not gt[i, j]:
                    fp += 1
                elif not pred[i, j] and gt[i, j]:
                    fn += 1
                else:
                    tn += 1
        assert (r.tp, r.fp, r.tn, r.fn) == (tp, fp, tn, fn)
        assert r.tp + r.fp + r.tn + r.fn == gt.size
        assert r.accuracy * gt.size == pytest.approx(tp + tn)


def test_metrics_dice_jaccard_identity(rng):
    for _ in range(100):
        gt = (rng.random((8, 8)) > 0.4).astype(np.uint8)
        pred = (rng.random((8, 8)) > 0.6).astype(np.uint8)
        r = compute_metrics(pred, gt)
        assert r.dice == pytest.approx(2 * r.jaccard / (1 + r.jaccard), abs=1e-12)
        for v in (r.accuracy, r.dice, r.jaccard, r.sensitivity, r.specificity):
            assert 0.0 <= v <= 1.0


def test_metrics_vacuous_ratios():
    empty = np.zeros((4, 4), dtype=np.uint8)
    r = compute_metrics(empty, empty)
    assert r.sensitivity == 1.0 and "SE" in r.vacuous
    assert r.dice == 1.0 and "DC" in r.vacuous
    full = np.ones((4, 4), dtype=np.uint8)
    r2 = compute_metrics(full, full)
    assert r2.specificity == 1.0 and "SP" in r2.vacuous


def test_metrics_shape_mismatch():
    with pytest.raises(ShapeError):
        compute_metrics(np.zeros((3, 3)), np.zeros((4, 4)))


def test_aggregate_metrics(rng):
    reports = [compute_metrics((rng.random((5, 5)) > 0.5).astype(np.uint8),
                               (rng.random((5, 5)) > 0.5).astype(np.uint8))
               for _ in range(10)]
    agg = aggregate_metrics(reports)
    assert agg["n"] == 10
    assert agg["mean"]["DC"] == pytest.approx(np.mean([r.dice for r in reports]))
    assert agg["std"]["AC"] == pytest.approx(np.std([r.accuracy for r in reports]))


# ---------------------------------------------------------------------------
# kfold

def test_kfold_partition_property():
    for n in range(2, 101, 7):
        for k in range(2, min(n, 8) + 1):
            folds = kfold_split(n, k, seed=n * 31 + k)
            flat = sorted(i for fold in folds for i in fold)
            assert flat == list(range(n))
            sizes = [len(f) for f in folds]
            assert max(sizes) - min(sizes) <= 1


def test_kfold_five_folds_of_two():
    folds = kfold_split(10, 5, seed=0)
    assert [len(f) for f in folds] == [2, 2, 2, 2, 2]


def test_kfold_seed_determinism():
    assert kfold_split(20, 4, seed=9) == kfold_split(20, 4, seed=9)
    assert kfold_split(20, 4, seed=9) != kfold_split(20, 4, seed=10)


def test_kfold_degenerate_args():
    with pytest.raises(ValueError):
        kfold_split(10, 1, seed=0)
    with pytest.raises(ValueError):
        kfold_split(3, 5, seed=0)


# ---------------------------------------------------------------------------
# synthetic data

def test_synth_deterministic():
    a = synth_generate(5, seed=11, size=64)
    b = synth_generate(5, seed=11, size=64)
    for sa, sb in zip(a, b):
        assert sa.id == sb.id
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.mask, sb.mask)
    c = synth_generate(5, seed=12, size=64)
    assert not all(np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_synth_masks_connected_and_sized():
    for s in synth_generate(25, seed=3, size=64):
        frac = s.mask.mean()
        assert 0.02 <= frac <= 0.30, s.id
        assert _single_4connected(s.mask), s.id
        assert s.mask.any()


def test_synth_box_matches_mask():
    for s in synth_generate(5, seed=4, size=48):
        ys, xs = np.nonzero(s.mask)
        assert s.gt_box == Box(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_synth_image_range_and_size():
    for s in synth_generate(3, seed=5, size=32):
        assert s.image.shape == (32, 32, 3)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_synth_lesion_darker_than_background():
    for s in synth_generate(10, seed=6, size=64):
        inside = s.image[s.mask != 0].mean()
        outside = s.image[s.mask == 0].mean()
        assert inside < outside - 0.15


def test_synth_size_validation():
    with pytest.raises(ValueError):
        synth_generate(1, seed=0, size=16)


# ---------------------------------------------------------------------------
# dataset io

def test_write_load_round_trip(tmp_path):
    samples = synth_generate(4, seed=8, size=32)
    manifest = write_dataset(samples, tmp_path / "data")
    loaded = load_dataset(manifest)
    assert len(loaded) == 4
    for orig, back in zip(samples, loaded):
        assert back.id == orig.id
        assert np.array_equal(back.image, orig.image)
        assert np.array_equal(back.mask, orig.mask)
        assert back.gt_box == orig.gt_box
    # second round trip is also identical
    manifest2 = write_dataset(loaded, tmp_path / "data2")
    again = load_dataset(manifest2)
    for back, re_back in zip(loaded, again):
        assert np.array_equal(back.image, re_back.image)


def test_manifest_format(tmp_path):
    samples = synth_generate(2, seed=1, size=32)
    manifest = write_dataset(samples, tmp_path)
    lines = manifest.read_text().strip().splitlines()
    assert len(lines) == 2
    for line in lines:
        assert len(line.split("\t")) == 3


def test_load_dataset_skips_empty_mask(tmp_path, caplog):
    samples = synth_generate(1, seed=2, size=32)
    write_dataset(samples, tmp_path)
    save_mask(tmp_path / f"{samples[0].id}_mask.png", np.zeros((32, 32), dtype=np.uint8))
    import logging

    with caplog.at_level(logging.WARNING):
        loaded = load_dataset(tmp_path / "manifest.tsv")
    assert loaded == []


def test_load_dataset_bad_mask_values(tmp_path):
    from PIL import Image

    samples = synth_generate(1, seed=2, size=32)
    write_dataset(samples, tmp_path)
    Image.fromarray(np.full((32, 32), 128, dtype=np.uint8), mode="L").save(
        tmp_path / f"{samples[0].id}_mask.png")
    with pytest.raises(DatasetError) as err:
        load_dataset(tmp_path / "manifest.tsv")
    assert samples[0].id in str(err.value)


def test_load_dataset_size_mismatch(tmp_path):
    from lesionpipe.data import save_image

    samples = synth_generate(1, seed=2, size=32)
    write_dataset(samples, tmp_path)
    save_image(tmp_path / f"{samples[0].id}.png", np.zeros((16, 16, 3)))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "manifest.tsv")


def test_mask_png_encoding(tmp_path):
    mask = (np.random.default_rng(0).random((10, 10)) > 0.5).astype(np.uint8)
    save_mask(tmp_path / "m.png", mask)
    from PIL import Image

    with Image.open(tmp_path / "m.png") as im:
        raw = np.asarray(im)
    assert set(np.unique(raw)) <= {0, 255}
    assert np.array_equal(load_mask(tmp_path / "m.png"), mask)


# ---------------------------------------------------------------------------
# resizing

def test_resize_pair_identity():
    s = synth_generate(1, seed=3, size=32)[0]
    assert resize_pair(s, 32) is s


def test_resize_pair_binary_mask_and_box():
    s = synth_generate(1, seed=3, size=64)[0]
    r = resize_pair(s, 32)
    assert r.image.shape == (32, 32, 3)
    assert set(np.unique(r.mask)) <= {0, 1}
    ys, xs = np.nonzero(r.mask)
    assert r.gt_box == Box(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_resize_mask_area_scales():
    # 100x60 mask with a 20x10 lesion resized to 512x512: area scales by
    # about (512/100) * (512/60) within nearest-neighbor quantization
    mask = np.zeros((100, 60), dtype=np.uint8)
    mask[40:50, 20:40] = 1
    image = np.zeros((100, 60, 3))
    s = sample_from_arrays("t", image, mask)
    r = resize_pair(s, 512)
    want = 200 * (512 / 100) * (512 / 60)
    got = int(r.mask.sum())
    assert abs(got - want) / want < 0.05


def test_nearest_resize_preserves_values():
    m = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    big = nearest_resize_array(m, 8, 8)
    assert set(np.unique(big)) <= {0, 1}
    assert big[0, 0] == 0 and big[-1, -1] == 0
    assert big[0, -1] == 1 and big[-1, 0] == 1
