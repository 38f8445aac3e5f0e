import os

import numpy as np
import pytest

from murax.dataset import (
    DatasetError,
    DatasetIndex,
    DatasetWarning,
    Study,
    batch_iter,
    check_disjoint,
    cross_check,
    epoch_permutation,
    load_csv_index,
    scan_tree,
)
from murax.imaging import write_png


def make_tree(root, studies):
    """studies: list of (split, part, patient, study_dir, n_views)."""
    for split, part, patient, study, n in studies:
        for j in range(n):
            img = np.full((8, 8), 40 + j, dtype=np.uint8)
            write_png(os.path.join(root, split, f"XR_{part}", patient, study, f"image{j + 1}.png"), img)


@pytest.fixture
def fixture_tree(tmp_path):
    root = tmp_path / "MURA-mini"
    make_tree(root, [
        ("train", "WRIST", "patient00001", "study1_positive", 3),
        ("train", "WRIST", "patient00002", "study1_negative", 3),
    ])
    return root


def test_scan_fixture(fixture_tree):
    ix = scan_tree(fixture_tree, "train")
    assert len(ix.studies) == 2 and ix.n_views == 6
    assert ix.label_counts == {0: 1, 1: 1}
    assert ix.counts == {"WRIST": {0: 1, 1: 1}}
    for s in ix.studies:
        assert list(s.view_paths) == sorted(s.view_paths)


def test_malformed_suffix_named(tmp_path):
    make_tree(tmp_path, [("train", "WRIST", "patient00001", "study1_positiv", 1)])
    with pytest.raises(DatasetError, match="study1_positiv"):
        scan_tree(tmp_path, "train")


def test_empty_study_rejected(tmp_path):
    os.makedirs(tmp_path / "train" / "XR_HAND" / "patient00001" / "study1_negative")
    with pytest.raises(DatasetError, match="no images"):
        scan_tree(tmp_path, "train")


def test_unreadable_png_named(tmp_path):
    d = tmp_path / "train" / "XR_HAND" / "patient00001" / "study1_negative"
    os.makedirs(d)
    (d / "image1.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="image1.png"):
        scan_tree(tmp_path, "train")


def test_unknown_body_part_warns_and_skips(fixture_tree):
    make_tree(fixture_tree, [("train", "KNEE", "patient00009", "study1_negative", 1)])
    with pytest.warns(DatasetWarning, match="XR_KNEE"):
        ix = scan_tree(fixture_tree, "train")
    assert len(ix.studies) == 2


def write_csvs(root, rows, labels, tag="train"):
    with open(os.path.join(root, f"{tag}_image_paths.csv"), "w") as fh:
        fh.writelines(r + "\n" for r in rows)
    with open(os.path.join(root, f"{tag}_labeled_studies.csv"), "w") as fh:
        fh.writelines(f"{d},{l}\n" for d, l in labels)


def fixture_csv_rows(root):
    name = os.path.basename(root)
    rows = []
    for p, s in (("patient00001", "study1_positive"), ("patient00002", "study1_negative")):
        rows += [f"{name}/train/XR_WRIST/{p}/{s}/image{j}.png" for j in (1, 2, 3)]
    labels = [(f"{name}/train/XR_WRIST/patient00001/study1_positive/", 1),
              (f"{name}/train/XR_WRIST/patient00002/study1_negative/", 0)]
    return rows, labels


def test_csv_index_equals_tree(fixture_tree):
    rows, labels = fixture_csv_rows(fixture_tree)
    write_csvs(fixture_tree, rows, labels)
    a = load_csv_index(fixture_tree / "train_image_paths.csv", fixture_tree / "train_labeled_studies.csv")
    b = scan_tree(fixture_tree, "train")
    assert cross_check(a.normalized(), b.normalized()) == []
    assert a.normalized().studies == b.normalized().studies


def test_csv_duplicate_row_warns(fixture_tree):
    rows, labels = fixture_csv_rows(fixture_tree)
    write_csvs(fixture_tree, rows + rows[:1], labels)
    with pytest.warns(DatasetWarning, match="duplicate"):
        ix = load_csv_index(fixture_tree / "train_image_paths.csv", fixture_tree / "train_labeled_studies.csv")
    assert ix.n_views == 6


def test_csv_empty_is_empty_index(tmp_path):
    write_csvs(tmp_path, [], [])
    ix = load_csv_index(tmp_path / "train_image_paths.csv", tmp_path / "train_labeled_studies.csv")
    assert ix.studies == []


def test_csv_missing_file(fixture_tree):
    rows, labels = fixture_csv_rows(fixture_tree)
    write_csvs(fixture_tree, rows + [rows[0].replace("image1", "image9")], labels)
    with pytest.raises(DatasetError, match="image9"):
        load_csv_index(fixture_tree / "train_image_paths.csv", fixture_tree / "train_labeled_studies.csv")


def test_csv_bad_label(fixture_tree):
    rows, labels = fixture_csv_rows(fixture_tree)
    write_csvs(fixture_tree, rows, [(labels[0][0], 2), labels[1]])
    with pytest.raises(DatasetError, match="0 or 1"):
        load_csv_index(fixture_tree / "train_image_paths.csv", fixture_tree / "train_labeled_studies.csv")


def test_csv_label_contradicting_suffix(fixture_tree):
    rows, labels = fixture_csv_rows(fixture_tree)
    write_csvs(fixture_tree, rows, [(labels[0][0], 0), labels[1]])
    with pytest.raises(DatasetError, match="mismatch"):
        load_csv_index(fixture_tree / "train_image_paths.csv", fixture_tree / "train_labeled_studies.csv")


def test_patient_overlap_detected(fixture_tree):
    ix = scan_tree(fixture_tree, "train")
    with pytest.raises(DatasetError, match="both splits"):
        check_disjoint(ix, DatasetIndex("valid", ix.studies[:1]))


def _index(n_views_each):
    studies = [
        Study(f"patient{i:05d}", "HAND", "study1", tuple(f"/x/{i}/{j}.png" for j in range(n)), i % 2)
        for i, n in enumerate(n_views_each)
    ]
    return DatasetIndex("train", studies)


def test_batch_sizes_and_coverage():
    ix = _index([1] * 10)
    batches = list(batch_iter(ix, 8, seed=0, epoch=0))
    assert [len(b[1]) for b in batches] == [8, 2]
    seen = [ref[0] for b in batches for ref in b[2]]
    assert sorted(seen) == sorted(p for p, _, _ in ix.views())


def test_batch_labels_follow_study():
    ix = _index([3, 2])
    for _, labels, refs in batch_iter(ix, 4, seed=1, epoch=0):
        for lab, (_, study) in zip(labels[:, 0], refs):
            assert lab == study.label


def test_batch_order_deterministic_and_epoch_dependent():
    ix = _index([1] * 10)
    order = lambda e: [r[0] for b in batch_iter(ix, 3, seed=4, epoch=e) for r in b[2]]
    assert order(0) == order(0)
    assert order(0) != order(1)
    assert not np.array_equal(epoch_permutation(10, 4, 0), epoch_permutation(10, 4, 1))


def test_batch_iter_worker_count_does_not_change_output(small_synth):
    from murax.augment import AugmentConfig
    from murax.pipeline import ImagePipeline
    from murax.preprocess import PreprocessConfig

    root, _ = small_synth
    ix = scan_tree(root, "train")
    pipe = ImagePipeline(PreprocessConfig(), AugmentConfig(), seed=2)
    serial = [b[0] for b in batch_iter(ix, 4, 2, 1, pipe, workers=1)]
    pooled = [b[0] for b in batch_iter(ix, 4, 2, 1, ImagePipeline(PreprocessConfig(), AugmentConfig(), 2), workers=3)]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(serial, pooled))
