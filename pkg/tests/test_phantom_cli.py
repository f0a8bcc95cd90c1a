"""Synthetic case generator invariants and the command-line workflow."""

import os
import shutil

import numpy as np
import pytest

from liverseg.cli import main
from liverseg.phantom import (
    PhantomConfig,
    discover_cases,
    generate_dataset,
    generate_phantom,
    load_case,
)
from liverseg.volio import LabelVolume, Volume, read_metaimage

CFG = PhantomConfig(count=6, size=(64, 64, 16), spacing=(1.0, 1.0, 2.0), seed=7)


@pytest.fixture(scope="module")
def cases():
    return [generate_phantom(CFG, i) for i in range(CFG.count)]


def test_phantom_labels_and_geometry(cases):
    for vol, labels in cases:
        assert isinstance(vol, Volume) and isinstance(labels, LabelVolume)
        assert vol.data.shape == labels.data.shape == (16, 64, 64)
        assert vol.spacing == labels.spacing == (1.0, 1.0, 2.0)
        assert set(np.unique(labels.data)) <= {0, 1, 2}

        organ = labels.data >= 1
        lesion = labels.data == 2
        assert organ.sum() > 500  # the organ is a substantial blob
        assert not (lesion & ~organ).any()  # lesions strictly inside
        if lesion.any():
            # an organ shell must remain around every lesion region
            assert (labels.data == 1).sum() > lesion.sum()


def test_phantom_intensity_contract(cases):
    lo, hi = CFG.liver_hu
    for vol, labels in cases:
        organ_only = labels.data == 1
        mean_organ = float(vol.data[organ_only].mean())
        # noise is zero-mean, so the organ mean sits inside the drawn band
        assert lo - 5 <= mean_organ <= hi + 5
        lesion = labels.data == 2
        if lesion.any():
            assert float(vol.data[lesion].mean()) < mean_organ - 15


def test_phantom_every_fifth_case_is_lesion_free(cases):
    assert not (cases[4][1].data == 2).any()
    with_lesions = [i for i, (_, lab) in enumerate(cases) if (lab.data == 2).any()]
    assert len(with_lesions) >= 3  # most other cases carry lesions


def test_phantom_determinism():
    a_vol, a_lab = generate_phantom(CFG, 1)
    b_vol, b_lab = generate_phantom(CFG, 1)
    assert np.array_equal(a_vol.data, b_vol.data)
    assert np.array_equal(a_lab.data, b_lab.data)
    c_vol, _ = generate_phantom(CFG, 2)
    assert not np.array_equal(a_vol.data, c_vol.data)
    d_vol, _ = generate_phantom(PhantomConfig(**{**CFG.__dict__, "seed": 8}), 1)
    assert not np.array_equal(a_vol.data, d_vol.data)


def test_phantom_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(size=(4, 64, 64))
    with pytest.raises(ValueError):
        PhantomConfig(count=-1)
    with pytest.raises(ValueError):
        PhantomConfig(spacing=(1.0, 0.0, 1.0))


def test_generate_dataset_roundtrip(tmp_path):
    cfg = PhantomConfig(count=2, size=(32, 32, 8), spacing=(2.0, 2.0, 3.0), seed=1)
    ids = generate_dataset(cfg, tmp_path)
    assert ids == ["case_000", "case_001"]
    assert discover_cases(tmp_path) == ids

    vol, labels = load_case(tmp_path, "case_000")
    direct_vol, direct_lab = generate_phantom(cfg, 0)
    # MET_SHORT stores rounded HU; the generator already rounds
    assert np.array_equal(vol.data, direct_vol.data)
    assert np.array_equal(labels.data, direct_lab.data)
    assert vol.spacing == (2.0, 2.0, 3.0)


def test_generate_dataset_is_byte_deterministic(tmp_path):
    cfg = PhantomConfig(count=2, size=(32, 32, 8), seed=5)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    generate_dataset(cfg, d1)
    generate_dataset(cfg, d2)
    for name in sorted(os.listdir(d1)):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_discover_cases_missing_labels(tmp_path):
    generate_dataset(PhantomConfig(count=2, size=(32, 32, 8)), tmp_path)
    os.remove(tmp_path / "case_001_labels.mhd")
    with pytest.raises(FileNotFoundError, match="case_001"):
        discover_cases(tmp_path)


def test_load_case_type_checks(tmp_path):
    generate_dataset(PhantomConfig(count=1, size=(32, 32, 8)), tmp_path)
    with pytest.raises(FileNotFoundError):
        load_case(tmp_path, "case_999")
    # swap the files: a label image where intensities belong
    with pytest.raises(ValueError):
        load_case_swapped(tmp_path)


def load_case_swapped(d):
    from liverseg.phantom import load_case as lc

    os.rename(os.path.join(d, "case_000_volume.mhd"), os.path.join(d, "k.mhd"))
    os.rename(os.path.join(d, "case_000_labels.mhd"),
              os.path.join(d, "case_000_volume.mhd"))
    os.rename(os.path.join(d, "k.mhd"), os.path.join(d, "case_000_labels.mhd"))
    return lc(d, "case_000")


# -- command line -------------------------------------------------------------------


def test_cli_phantom_command(tmp_path, capsys):
    out = tmp_path / "data"
    rc = main(["phantom", "--count", "2", "--seed", "3", "--out", str(out),
               "--size", "32", "32", "8"])
    assert rc == 0
    assert "wrote 2 cases" in capsys.readouterr().out
    assert sorted(os.listdir(out)) == [
        "case_000_labels.mhd", "case_000_labels.raw",
        "case_000_volume.mhd", "case_000_volume.raw",
        "case_001_labels.mhd", "case_001_labels.raw",
        "case_001_volume.mhd", "case_001_volume.raw",
    ]


def test_cli_full_workflow(tmp_path, capsys):
    data = tmp_path / "data"
    # 16 slices of 2 mm leave room for lesions; flatter volumes cannot fit
    # the 3 mm minimum radius and would leave stage 3 without training data
    rc = main(["phantom", "--count", "3", "--seed", "1", "--out", str(data),
               "--size", "48", "48", "16"])
    assert rc == 0

    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "model_levels = 4x3x1,8x3x1\n"
        "folds = 0  # single member\n"
        "batch_size = 4\n"
    )
    for stage in (1, 2, 3):
        rc = main(["train", "--stage", str(stage), "--data", str(data),
                   "--config", str(cfg), "--epochs", "0",
                   "--out", str(tmp_path / f"s{stage}")])
        assert rc == 0
        assert "trained 1 members" in capsys.readouterr().out
        assert (tmp_path / f"s{stage}" / "ensemble.txt").exists()

    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    rc = main(["predict",
               "--stage1", str(tmp_path / "s1"),
               "--stage2", str(tmp_path / "s2"),
               "--stage3", str(tmp_path / "s3"),
               "--input", str(data / "case_000_volume.mhd"),
               "--output", str(pred_dir / "case_000_labels.mhd")])
    assert rc == 0
    assert "labels ->" in capsys.readouterr().out

    written = read_metaimage(pred_dir / "case_000_labels.mhd")
    assert isinstance(written, LabelVolume)
    assert set(np.unique(written.data)) <= {0, 1, 2}

    summary = (pred_dir / "case_000_labels_summary.txt").read_text()
    for key in ("input:", "status:", "liver voxels:", "tumor voxels:",
                "tumor burden:", "stage1 seconds:"):
        assert key in summary

    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    for ext in (".mhd", ".raw"):
        shutil.copy(data / f"case_000_labels{ext}", gt_dir / f"case_000_labels{ext}")

    report = tmp_path / "report.txt"
    rc = main(["evaluate", "--pred", str(pred_dir), "--gt", str(gt_dir),
               "--report", str(report)])
    assert rc == 0
    assert "liver dice" in capsys.readouterr().out
    assert report.exists() and (tmp_path / "report.csv").exists()


def test_cli_error_paths(tmp_path, capsys):
    rc = main(["predict", "--stage1", "x", "--stage2", "y", "--stage3", "z",
               "--input", str(tmp_path / "none.mhd"),
               "--output", str(tmp_path / "o.mhd")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")

    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 1\n")
    rc = main(["train", "--stage", "1", "--data", str(tmp_path),
               "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "unknown config key" in capsys.readouterr().err

    both = tmp_path / "both.cfg"
    both.write_text("model_preset = cdnn-i\nmodel_levels = 4x3x1\n")
    rc = main(["train", "--stage", "1", "--data", str(tmp_path),
               "--config", str(both), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "pick one" in capsys.readouterr().err

    noeq = tmp_path / "noeq.cfg"
    noeq.write_text("epochs 3\n")
    rc = main(["train", "--stage", "1", "--data", str(tmp_path),
               "--config", str(noeq), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert ":1:" in capsys.readouterr().err

    rc = main(["phantom", "--count", "1", "--out", str(tmp_path / "p"),
               "--size", "4", "4", "4"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


def test_cli_evaluate_reports_unmatched_files(tmp_path, capsys):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    generate_dataset(PhantomConfig(count=1, size=(32, 32, 8)), gt)
    rc = main(["evaluate", "--pred", str(pred), "--gt", str(gt),
               "--report", str(tmp_path / "r.txt")])
    assert rc == 1
    assert "missing predictions for:" in capsys.readouterr().err
