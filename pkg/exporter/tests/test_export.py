import numpy as np
import pytest
from PIL import Image

from mmtexport.backbones import BackboneError, build_backbone, expected_patch_rows
from mmtexport.export import ExportJob, export, list_images
from mmtexport.cli import main

# The consumer package validates the wire format; its reader is the
# ground truth the exporter must satisfy.
from mmtprobe.features import read_features


def make_images(directory, n=2, size=48, seed=0):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
        path = directory / f"img_{i:03d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# regime arithmetic
# ---------------------------------------------------------------------------

def test_declared_regimes_match_formula():
    assert expected_patch_rows("vit_base", 384, 16) == (577, True)
    assert expected_patch_rows("vit_base", 224, 16) == (197, True)
    assert expected_patch_rows("vit_base", 384, 32) == (145, True)
    assert expected_patch_rows("vit_base", 224, 32) == (50, True)
    assert expected_patch_rows("swin_tiny", 224, 4) == (49, False)
    assert expected_patch_rows("detr", 224, 16) == (49, False)


def test_vit_base_384_16_emits_577_rows(tmp_path):
    make_images(tmp_path / "imgs", n=2)
    job = ExportJob(images=tmp_path / "imgs", backbone="vit_base", resolution=384,
                    patch=16, out=tmp_path / "f.mmtf", weights="random", seed=0)
    summary = export(job)
    assert summary.written == 2 and summary.rows_per_record == 577
    records = read_features(tmp_path / "f.mmtf")
    assert [r.image_id for r in records] == ["img_000", "img_001"]
    for rec in records:
        assert rec.p == 577 and rec.d_img == 768 and rec.has_cls
        assert np.all(np.isfinite(rec.patches))


def test_vit_base_224_32_emits_50_rows(tmp_path):
    make_images(tmp_path / "imgs", n=1)
    job = ExportJob(images=tmp_path / "imgs", backbone="vit_base", resolution=224,
                    patch=32, out=tmp_path / "f.mmtf", weights="random", seed=0)
    summary = export(job)
    assert summary.rows_per_record == 50
    (rec,) = read_features(tmp_path / "f.mmtf")
    assert rec.p == 50 and rec.has_cls


def test_vit_tiny_dimension(tmp_path):
    make_images(tmp_path / "imgs", n=1)
    job = ExportJob(images=tmp_path / "imgs", backbone="vit_tiny", resolution=224,
                    patch=16, out=tmp_path / "f.mmtf", weights="random")
    export(job)
    (rec,) = read_features(tmp_path / "f.mmtf")
    assert rec.p == 197 and rec.d_img == 192


def test_swin_fixed_length_no_cls(tmp_path):
    make_images(tmp_path / "imgs", n=1)
    job = ExportJob(images=tmp_path / "imgs", backbone="swin_tiny", resolution=224,
                    patch=4, out=tmp_path / "f.mmtf", weights="random")
    export(job)
    (rec,) = read_features(tmp_path / "f.mmtf")
    assert rec.p == 49 and not rec.has_cls and rec.d_img == 768


def test_detr_encoder_sequence(tmp_path):
    make_images(tmp_path / "imgs", n=1)
    job = ExportJob(images=tmp_path / "imgs", backbone="detr", resolution=224,
                    patch=16, out=tmp_path / "f.mmtf", weights="random")
    export(job)
    (rec,) = read_features(tmp_path / "f.mmtf")
    assert rec.p == 49 and rec.d_img == 256 and not rec.has_cls


# ---------------------------------------------------------------------------
# determinism and robustness
# ---------------------------------------------------------------------------

def test_same_image_twice_identical_bytes(tmp_path):
    make_images(tmp_path / "imgs", n=2, seed=5)
    for tag in ("a", "b"):
        job = ExportJob(images=tmp_path / "imgs", backbone="vit_tiny", resolution=224,
                        patch=32, out=tmp_path / f"{tag}.mmtf", weights="random", seed=3)
        export(job)
    assert (tmp_path / "a.mmtf").read_bytes() == (tmp_path / "b.mmtf").read_bytes()


def test_unreadable_image_skipped_with_summary(tmp_path):
    make_images(tmp_path / "imgs", n=2)
    (tmp_path / "imgs" / "broken.png").write_bytes(b"not an image")
    job = ExportJob(images=tmp_path / "imgs", backbone="vit_tiny", resolution=224,
                    patch=32, out=tmp_path / "f.mmtf", weights="random")
    summary = export(job)
    assert summary.written == 2
    assert summary.skipped == ["broken.png"]
    assert len(read_features(tmp_path / "f.mmtf")) == 2


def test_records_sorted_by_stem(tmp_path):
    directory = tmp_path / "imgs"
    directory.mkdir()
    rng = np.random.default_rng(0)
    for name in ("zebra.png", "alpha.png", "middle.png"):
        arr = rng.integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
        Image.fromarray(arr).save(directory / name)
    job = ExportJob(images=directory, backbone="vit_tiny", resolution=224,
                    patch=32, out=tmp_path / "f.mmtf", weights="random")
    export(job)
    records = read_features(tmp_path / "f.mmtf")
    assert [r.image_id for r in records] == ["alpha", "middle", "zebra"]


def test_unknown_backbone_is_usage_error(tmp_path, capsys):
    make_images(tmp_path / "imgs", n=1)
    with pytest.raises(SystemExit) as err:
        main(["export", "--images", str(tmp_path / "imgs"), "--backbone", "resnet99",
              "--resolution", "224", "--out", str(tmp_path / "f.mmtf")])
    assert err.value.code == 2


def test_queryinst_unobtainable_is_domain_error(tmp_path, capsys):
    make_images(tmp_path / "imgs", n=1)
    code = main(["export", "--images", str(tmp_path / "imgs"), "--backbone", "queryinst",
                 "--resolution", "224", "--out", str(tmp_path / "f.mmtf"),
                 "--weights", "random"])
    assert code == 1
    assert "queryinst" in capsys.readouterr().err


def test_cli_export_end_to_end(tmp_path, capsys):
    make_images(tmp_path / "imgs", n=2)
    code = main(["export", "--images", str(tmp_path / "imgs"), "--backbone", "vit_tiny",
                 "--resolution", "224", "--patch", "32",
                 "--out", str(tmp_path / "f.mmtf"), "--weights", "random"])
    assert code == 0
    out = capsys.readouterr().out
    assert "wrote 2 records" in out
    assert read_features(tmp_path / "f.mmtf")[0].p == 50


def test_empty_directory_rejected(tmp_path):
    (tmp_path / "imgs").mkdir()
    job = ExportJob(images=tmp_path / "imgs", backbone="vit_tiny", resolution=224,
                    patch=32, out=tmp_path / "f.mmtf", weights="random")
    with pytest.raises(BackboneError, match="no readable images"):
        export(job)


def test_bad_geometry_rejected(tmp_path):
    with pytest.raises(BackboneError):
        ExportJob(images=tmp_path, backbone="vit_base", resolution=256, patch=16,
                  out=tmp_path / "f.mmtf")
    with pytest.raises(BackboneError):
        build_backbone("swin_tiny", 224, 16, weights="random")
