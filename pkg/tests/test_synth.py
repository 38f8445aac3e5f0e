import filecmp
import os
import warnings

import pytest

from murax.dataset import check_disjoint, load_csv_index, scan_tree, cross_check
from murax.synth import SynthSpec, generate, largest_remainder


def tree_files(root):
    out = []
    for d, _, files in os.walk(root):
        out += [os.path.relpath(os.path.join(d, f), root) for f in files]
    return sorted(out)


def test_generation_is_byte_identical(tmp_path):
    spec = SynthSpec(n_studies=4, positive_fraction=0.5, seed=7)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    fa, fb = tree_files(tmp_path / "a"), tree_files(tmp_path / "b")
    assert fa == fb
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [f for f in fa if not f.endswith(".csv")], shallow=False)
    assert mismatch == [] and errors == []


def test_zero_positive_fraction(tmp_path):
    generate(SynthSpec(n_studies=10, positive_fraction=0.0), tmp_path / "d")
    assert not any("_positive" in f for f in tree_files(tmp_path / "d"))


def test_exact_positive_count(tmp_path):
    m = generate(SynthSpec(n_studies=200, positive_fraction=0.5, views_per_study=(1, 1), image_side=32), tmp_path / "d")
    pos = sum(s["label"] for s in m["studies"])
    assert pos == 100
    assert largest_remainder(7, [0.5, 0.5]) == [4, 3]


def test_refuses_non_empty_root(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "keep.txt").write_text("x")
    with pytest.raises(FileExistsError):
        generate(SynthSpec(n_studies=2), tmp_path / "d")
    generate(SynthSpec(n_studies=2), tmp_path / "d", overwrite=True)
    assert not (tmp_path / "d" / "keep.txt").exists()


def test_scan_matches_manifest_without_warnings(small_synth):
    root, manifest = small_synth
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for split in ("train", "valid"):
            ix = scan_tree(root, split)
            c = manifest["counts"][split]
            assert len(ix.studies) == c["studies"]
            assert ix.label_counts[1] == c["positive"]
            assert ix.n_views == c["views"]


def test_csv_and_tree_agree(small_synth):
    root, _ = small_synth
    for split in ("train", "valid"):
        a = load_csv_index(root / f"{split}_image_paths.csv", root / f"{split}_labeled_studies.csv")
        assert cross_check(a, scan_tree(root, split)) == []


def test_splits_disjoint_by_patient(small_synth):
    root, _ = small_synth
    check_disjoint(scan_tree(root, "train"), scan_tree(root, "valid"))


def test_profile_depth_separates_classes(small_synth):
    _, manifest = small_synth
    for s in manifest["studies"]:
        for v in s["views"]:
            if s["label"]:
                assert v["profile_depth"] >= 40 and v["abnormality"] is not None
            else:
                assert v["profile_depth"] < 40 and v["abnormality"] is None


def test_views_share_latent_gap(small_synth):
    _, manifest = small_synth
    for s in manifest["studies"]:
        if s["label"]:
            assert s["bone"]["gap_pos"] is not None
            assert 2 <= s["bone"]["gap_width"] <= 6


@pytest.mark.parametrize("bad", [dict(positive_fraction=1.2), dict(image_side=16), dict(views_per_study=(2, 1))])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        SynthSpec(**bad)
