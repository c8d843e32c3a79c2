import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedscape import numcore as nc
from fedscape.dataset import (CSV_HEADER, LABEL_BIAS, LabelModel, LatentFactors, SceneSample, augment,
                              export_csv, generate_dataset, ingest_csv, partition, regenerate_from_manifest,
                              rotate_image, task_marker, write_dataset)
from fedscape.errors import ConfigError, IngestionError


class NoOpRng:
    """Forces both augmentation coins onto the no-op branch."""

    def random(self):
        return 0.99


@pytest.fixture(scope="module")
def data():
    return generate_dataset(40, 16, seed=7)


def test_empty_room_labels_closed_form():
    f = LatentFactors(0.0, 1.0, (False,) * 4)
    expected = 1.0 + 4.0 / (1.0 + np.exp(-LABEL_BIAS))
    np.testing.assert_allclose(LabelModel().labels(f, 1), expected, rtol=1e-6)


def test_labels_in_range(data):
    Y = np.stack([s.labels for s in data])
    assert Y.shape == (40, 8) and Y.min() >= 1.0 and Y.max() <= 5.0


def test_same_seed_bitwise_identical():
    a, b = generate_dataset(12, 8, seed=3), generate_dataset(12, 8, seed=3)
    assert all(x.image.tobytes() == y.image.tobytes() and x.labels.tobytes() == y.labels.tobytes()
               for x, y in zip(a, b))


def test_tasks_balanced(data):
    assert sum(s.task_id == 1 for s in data) == 20


def test_task_shift_changes_task2_labels():
    f = LatentFactors(0.5, 0.3, (True, False, True, False))
    assert not np.allclose(LabelModel().labels(f, 1), LabelModel().labels(f, 2))
    np.testing.assert_array_equal(LabelModel(task_shift=0.0).labels(f, 1), LabelModel(task_shift=0.0).labels(f, 2))


@pytest.mark.parametrize("H", [8, 16, 32])
def test_markers_differ_in_shape_not_mass(H):
    ring, arrow = task_marker(1, H), task_marker(2, H)
    assert ring.sum() == pytest.approx(arrow.sum())
    assert not np.array_equal(ring > 0, arrow > 0)


def test_marker_channel_separates_tasks(data):
    for s in data:
        assert np.allclose(s.image[2], task_marker(s.task_id, 16), atol=0.15)


def test_generate_rejects_tiny():
    with pytest.raises(ConfigError):
        generate_dataset(4)


def test_augment_noop_branch(data):
    s = data[0]
    out = augment(s, NoOpRng())
    assert out.image.tobytes() == s.image.tobytes()


def test_augment_never_touches_labels(data):
    rng = np.random.default_rng(0)
    for s in data[:10]:
        assert augment(s, rng).labels is s.labels


def test_rotate_zero_is_identity(data):
    img = data[3].image
    assert rotate_image(img, 0.0).tobytes() == img.tobytes()


def test_partition_even_shards():
    data = generate_dataset(1000, 8, seed=0)
    for n, size in ((2, 375), (10, 75)):
        split = partition(data, n, seed=0)
        assert [len(split.client_train(c)) for c in range(n)] == [size] * n


@settings(max_examples=15, deadline=None)
@given(n_clients=st.integers(2, 10), seed=st.integers(0, 10_000), iid=st.booleans())
def test_partition_invariants(n_clients, seed, iid):
    data = generate_dataset(60, 8, seed=seed % 7)
    split = partition(data, n_clients, seed, iid=iid)
    train_ids = [s.sample_id for c in range(n_clients) for s in split.client_train(c)]
    test_ids = [s.sample_id for s in split.test_set()]
    assert len(train_ids) == len(set(train_ids))
    assert not set(train_ids) & set(test_ids)
    assert sorted(train_ids + test_ids) == list(range(60))
    for t in (1, 2):
        n_t = sum(s.task_id == t for s in data)
        assert len(split.test[t]) == round(n_t * 0.25)
    if iid:
        sizes = [len(split.client_train(c)) for c in range(n_clients)]
        assert max(sizes) - min(sizes) <= 1


def test_partition_rejects_too_many_clients():
    with pytest.raises(ConfigError):
        partition(generate_dataset(8, 8), 11, seed=0)


# -- ingestion ----------------------------------------------------------------

def _write_rows(tmp_path, rows, image=True):
    if image:
        (tmp_path / "images").mkdir(exist_ok=True)
        nc.save_tensor(tmp_path / "images" / "a.fstn", np.zeros((3, 8, 8), np.float32))
    path = tmp_path / "scenes.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(rows)
    return path


def test_ingest_single_row(tmp_path):
    path = _write_rows(tmp_path, [["images/a.fstn", 1] + [3.0] * 8])
    out = ingest_csv(path)
    assert len(out) == 1 and out[0].image.shape == (3, 8, 8)


def test_ingest_label_out_of_range_names_row(tmp_path):
    labels = [3.0] * 8
    labels[2] = 7.0
    path = _write_rows(tmp_path, [["images/a.fstn", 1] + labels])
    with pytest.raises(IngestionError, match="row 1.*label_3"):
        ingest_csv(path)


def test_ingest_malformed_row(tmp_path):
    path = _write_rows(tmp_path, [["images/a.fstn", 1] + [3.0] * 8, ["images/a.fstn", 1, 2.0]])
    with pytest.raises(IngestionError, match="row 2"):
        ingest_csv(path)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        ingest_csv(tmp_path / "absent.csv")


def test_ingest_missing_image(tmp_path):
    path = _write_rows(tmp_path, [["images/b.fstn", 2] + [3.0] * 8])
    with pytest.raises(IngestionError, match="row 1"):
        ingest_csv(path)


def test_export_ingest_round_trip(tmp_path, data):
    export_csv(data, tmp_path / "scenes.csv")
    back = ingest_csv(tmp_path / "scenes.csv")
    assert len(back) == len(data)
    for a, b in zip(data, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.task_id == b.task_id


def test_manifest_regenerates_dataset(tmp_path):
    data = generate_dataset(16, 8, seed=9)
    write_dataset(data, tmp_path, seed=9, n_scenes=16, H=8)
    again = regenerate_from_manifest(tmp_path / "manifest.json")
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(data, again))


def test_scene_sample_rejects_bad_task():
    with pytest.raises(ConfigError):
        SceneSample(np.zeros((3, 8, 8)), np.ones(8), 3)
