import numpy as np
import pytest
import torch
from PIL import Image

from src.data_loader import (
    LabelMask,
    PlaqueSegmentationDataset,
    SupervisionPack,
    augment_flip,
    build_supervision,
    canny_boundary,
    create_split,
    describe_dataset,
    extract_boundary,
    flip_decision,
    import_flat_dataset,
    list_sample_ids,
    load_dataset,
    read_label_mask,
    separate_channels,
    severity_level,
    write_label_mask,
)
from src.errors import DatasetError


def random_mask(rng, size=16):
    return rng.integers(0, 2, size=(size, size)).astype(np.uint8)


def test_separate_channels_definition():
    teeth, plaque = separate_channels(LabelMask(np.array([[1, 2], [0, 1]])))
    np.testing.assert_array_equal(teeth, [[1, 0], [0, 1]])
    np.testing.assert_array_equal(plaque, [[0, 1], [0, 0]])


def test_separate_channels_partitions_pixels():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(16, 16))
    teeth, plaque = separate_channels(LabelMask(labels))
    assert teeth.sum() + plaque.sum() + np.count_nonzero(labels == 0) == 256
    assert not np.any(teeth & plaque)


def test_label_mask_rejects_values_outside_categories():
    with pytest.raises(DatasetError):
        LabelMask(np.array([[0, 3]]))


def test_extract_boundary_simple_cases():
    assert not extract_boundary(np.zeros((5, 5))).any()

    single = np.zeros((5, 5), dtype=np.uint8)
    single[2, 2] = 1
    np.testing.assert_array_equal(extract_boundary(single), single)

    square = np.zeros((5, 5), dtype=np.uint8)
    square[1:4, 1:4] = 1
    boundary = extract_boundary(square)
    assert boundary.sum() == 8
    assert boundary[2, 2] == 0


def test_extract_boundary_touches_border():
    full = np.ones((4, 4), dtype=np.uint8)
    boundary = extract_boundary(full)
    expected = np.ones((4, 4), dtype=np.uint8)
    expected[1:3, 1:3] = 0
    np.testing.assert_array_equal(boundary, expected)


def test_extract_boundary_properties_on_random_masks():
    rng = np.random.default_rng(1)
    for _ in range(100):
        mask = random_mask(rng)
        boundary = extract_boundary(mask).astype(bool)
        assert not np.any(boundary & ~mask.astype(bool))

        padded = np.pad(mask.astype(bool), 1)
        for y, x in zip(*np.nonzero(boundary)):
            neighbours = [padded[y, x + 1], padded[y + 2, x + 1], padded[y + 1, x], padded[y + 1, x + 2]]
            assert not all(neighbours)

        for axis in (0, 1):
            np.testing.assert_array_equal(
                extract_boundary(np.flip(mask, axis)), np.flip(extract_boundary(mask), axis)
            )


def test_canny_boundary_stays_inside_mask():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:24, 8:24] = 1
    boundary = canny_boundary(mask)
    assert boundary.any()
    assert not np.any(boundary & ~mask.astype(bool))


def test_augment_flip_identity_and_involution(tiny_records):
    record = tiny_records[0]
    assert augment_flip(record, False, False) is record

    twice = augment_flip(augment_flip(record, True, False), True, False)
    assert torch.equal(twice.image, record.image)
    np.testing.assert_array_equal(twice.supervision.plaque_mask, record.supervision.plaque_mask)


def test_augment_flip_keeps_image_and_maps_aligned(tiny_records):
    record = tiny_records[0]
    flipped = augment_flip(record, True, True)
    assert torch.equal(flipped.image, torch.flip(record.image, dims=[1, 2]))
    np.testing.assert_array_equal(flipped.supervision.teeth_mask, record.supervision.teeth_mask[::-1, ::-1])
    flipped.supervision.validate()


def test_flip_decision_is_stable():
    assert flip_decision(7, 3, "a") == flip_decision(7, 3, "a")
    decisions = {flip_decision(7, epoch, "a") for epoch in range(50)}
    assert len(decisions) > 1


def test_label_mask_png_round_trip(tmp_path):
    labels = np.random.default_rng(2).integers(0, 3, size=(9, 7)).astype(np.uint8)
    path = write_label_mask(tmp_path / "mask.png", labels)
    np.testing.assert_array_equal(read_label_mask(path).labels, labels)


def test_read_label_mask_rejects_rgb(tmp_path):
    path = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(path)
    with pytest.raises(DatasetError):
        read_label_mask(path)


def test_load_dataset_orders_ids_and_validates(synthetic_root):
    records = load_dataset(synthetic_root, "train", input_size=32)
    assert [r.id for r in records] == sorted(r.id for r in records)
    assert len(records) == 4
    for record in records:
        assert record.image.shape == (3, 32, 32)
        assert record.image.dtype == torch.float32
        record.supervision.validate()


def test_load_dataset_empty_split(tmp_path):
    (tmp_path / "val").mkdir()
    assert load_dataset(tmp_path, "val") == []


def test_load_dataset_missing_split(tmp_path):
    with pytest.raises(DatasetError):
        list_sample_ids(tmp_path, "test")


def test_load_dataset_rejects_invalid_mask(synthetic_root):
    bad = synthetic_root / "train" / "masks" / "train_0001.png"
    Image.fromarray(np.full((32, 32), 3, dtype=np.uint8)).save(bad)
    with pytest.raises(DatasetError, match="train_0001"):
        load_dataset(synthetic_root, "train", input_size=32)


def test_load_dataset_reports_missing_mask(synthetic_root):
    (synthetic_root / "train" / "masks" / "train_0002.png").unlink()
    with pytest.raises(DatasetError, match="train_0002"):
        load_dataset(synthetic_root, "train", input_size=32)


def test_load_dataset_resizes_to_input_size(synthetic_root):
    records = load_dataset(synthetic_root, "test", input_size=16)
    assert records[0].image.shape == (3, 16, 16)
    assert records[0].supervision.teeth_mask.shape == (16, 16)


def test_load_dataset_threaded_matches_serial(synthetic_root):
    serial = load_dataset(synthetic_root, "train", input_size=32)
    threaded = load_dataset(synthetic_root, "train", input_size=32, num_workers=3)
    for a, b in zip(serial, threaded):
        assert a.id == b.id
        assert torch.equal(a.image, b.image)


def test_supervision_validate_rejects_overlap():
    ones = np.ones((2, 2), dtype=np.uint8)
    pack = SupervisionPack(ones, ones, ones, ones)
    with pytest.raises(DatasetError):
        pack.validate()


def test_build_supervision_recombines():
    labels = np.random.default_rng(3).integers(0, 3, size=(8, 8))
    pack = build_supervision(LabelMask(labels))
    np.testing.assert_array_equal(pack.label_mask().labels, labels)


def test_dataset_items_follow_flip_decisions(tiny_records):
    dataset = PlaqueSegmentationDataset(tiny_records, augment=True, seed=5)
    dataset.set_epoch(2)
    item = dataset[1]
    horizontal, vertical = flip_decision(5, 2, tiny_records[1].id)
    expected = augment_flip(tiny_records[1], horizontal, vertical)
    assert torch.equal(item["image"], expected.image)
    assert item["labels"].dtype == torch.int64
    assert item["teeth_boundary"].dtype == torch.float32


def test_create_split_is_disjoint_and_covering():
    ids = [f"img{i:03d}" for i in range(50)]
    split = create_split(ids, seed=1)
    assert (len(split.train), len(split.val), len(split.test)) == (40, 5, 5)
    assert sorted(split.train + split.val + split.test) == ids
    assert create_split(ids, seed=1) == split


def test_import_flat_dataset(tmp_path):
    source = tmp_path / "flat"
    (source / "images").mkdir(parents=True)
    (source / "masks").mkdir()
    for i in range(10):
        Image.fromarray(np.full((8, 8, 3), i * 10, dtype=np.uint8)).save(source / "images" / f"s{i}.jpg")
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:5, 2:5] = 255
        Image.fromarray(mask).save(source / "masks" / f"s{i}.png")

    split = import_flat_dataset(source, tmp_path / "root", seed=0)
    records = load_dataset(tmp_path / "root", "train", input_size=8)
    assert len(records) == len(split.train) == 8
    assert records[0].supervision.plaque_mask.sum() == 9
    assert records[0].supervision.teeth_mask.sum() == 0


def test_severity_levels():
    assert severity_level(0.0) == 0
    assert severity_level(0.05) == 1
    assert severity_level(0.1) == 1
    assert severity_level(0.11) == 2
    assert severity_level(1.0) == 10


def test_describe_dataset(tiny_records):
    summary = describe_dataset(tiny_records)
    assert summary["samples"] == 4
    assert sum(summary["severity_levels"]) == 4
    assert summary["plaque_free_fraction"] == 0.0
