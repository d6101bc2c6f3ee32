"""Export behavior on a small backbone so the suite stays fast."""

import json
import math
import struct

import numpy as np
import pytest
from PIL import Image

from extractor_bridge import ExportJob, ImageError, ImageSpec, JobError, export


def read_header(path):
    raw = path.read_bytes()
    assert raw[:8] == b"RMAPTNSR"
    return struct.unpack("<5I", raw[8:28])


def small_job(image_path, out_dir, **kw):
    kw.setdefault("backbone", "resnet18")
    kw.setdefault("sizes", ((128, 96),))
    kw.setdefault("layers", ("last",))
    return ExportJob(images=(ImageSpec(image_id="a", path=str(image_path)),),
                     out_dir=str(out_dir), **kw)


def test_ceil_stride_invariant_on_awkward_sizes(make_png, tmp_path):
    img = make_png("a.png", 200, 150)
    job = small_job(img, tmp_path / "out", sizes=((130, 70), (97, 65)),
                    layers=("last", "second_last", "third_last"))
    export(job)
    for s, (w, h) in enumerate(job.sizes):
        for layer, stride in ((1, 32), (2, 16), (3, 8)):
            header = read_header(
                tmp_path / "out" / "tensors" / f"a_s{s}_l{layer}.tnsr")
            assert header[2] == math.ceil(w / stride)
            assert header[3] == math.ceil(h / stride)


def test_repeat_export_is_byte_identical(make_png, tmp_path):
    img = make_png("a.png", 180, 140, seed=3)
    job1 = small_job(img, tmp_path / "one", layers=("last", "third_last"))
    job2 = small_job(img, tmp_path / "two", layers=("last", "third_last"))
    export(job1)
    export(job2)
    names = ["tensors/a_s0_l1.tnsr", "tensors/a_s0_l3.tnsr",
             "manifest.jsonl", "preprocess.lock.json"]
    for name in names:
        assert (tmp_path / "one" / name).read_bytes() \
            == (tmp_path / "two" / name).read_bytes()


def test_seed_changes_random_init_features(make_png, tmp_path):
    img = make_png("a.png", 128, 96)
    export(small_job(img, tmp_path / "one", seed=0))
    export(small_job(img, tmp_path / "two", seed=1))
    a = (tmp_path / "one/tensors/a_s0_l1.tnsr").read_bytes()
    b = (tmp_path / "two/tensors/a_s0_l1.tnsr").read_bytes()
    assert a[:28] == b[:28]
    assert a != b


def test_crop_changes_features_and_is_bounds_checked(make_png, tmp_path):
    img = make_png("a.png", 200, 150)
    full = ExportJob(images=(ImageSpec(image_id="a", path=str(img)),),
                     out_dir=str(tmp_path / "full"),
                     backbone="resnet18", sizes=((128, 96),))
    cropped = ExportJob(
        images=(ImageSpec(image_id="a", path=str(img), crop=(10, 5, 150, 120)),),
        out_dir=str(tmp_path / "crop"),
        backbone="resnet18", sizes=((128, 96),))
    export(full)
    export(cropped)
    assert (tmp_path / "full/tensors/a_s0_l1.tnsr").read_bytes() \
        != (tmp_path / "crop/tensors/a_s0_l1.tnsr").read_bytes()

    bad = ExportJob(
        images=(ImageSpec(image_id="a", path=str(img), crop=(10, 5, 201, 120)),),
        out_dir=str(tmp_path / "bad"), backbone="resnet18", sizes=((128, 96),))
    with pytest.raises(ImageError, match="'a'"):
        export(bad)


def test_full_frame_crop_is_allowed(make_png, tmp_path):
    img = make_png("a.png", 200, 150)
    job = ExportJob(
        images=(ImageSpec(image_id="a", path=str(img), crop=(0, 0, 200, 150)),),
        out_dir=str(tmp_path / "out"), backbone="resnet18", sizes=((128, 96),))
    export(job)


def test_all_zero_image_gives_finite_activations(tmp_path):
    img_path = tmp_path / "black.png"
    Image.fromarray(np.zeros((96, 128, 3), dtype=np.uint8)).save(img_path)
    job = small_job(img_path, tmp_path / "out")
    export(job)
    raw = (tmp_path / "out/tensors/a_s0_l1.tnsr").read_bytes()
    payload = np.frombuffer(raw[28:], dtype="<f4")
    assert np.isfinite(payload).all()


def test_manifest_fragment_contents(make_png, tmp_path):
    q = make_png("q.png", 128, 96, seed=1)
    d = make_png("d.png", 128, 96, seed=2)
    job = ExportJob(
        images=(
            ImageSpec(image_id="q", path=str(q), class_id=4, is_query=True,
                      relevant_ids=("d",)),
            ImageSpec(image_id="d", path=str(d)),
        ),
        out_dir=str(tmp_path / "out"), backbone="resnet18",
        layers=("last", "second_last"), sizes=((128, 96), (96, 64)))
    manifest = export(job)

    lines = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert [e["image_id"] for e in lines] == ["q", "d"]

    entry = lines[0]
    assert entry["class_id"] == 4
    assert entry["is_query"] is True
    assert entry["relevant_ids"] == ["d"]
    assert len(entry["feature_paths"]) == 2
    assert sorted(entry["feature_paths"][0]) == ["1", "2"]
    for variant in entry["feature_paths"]:
        for rel in variant.values():
            assert (manifest.parent / rel).is_file()

    # unlabeled entries carry no optional keys at all
    assert set(lines[1]) == {"image_id", "feature_paths"}


def test_unreadable_image(make_png, tmp_path):
    job = small_job(tmp_path / "absent.png", tmp_path / "out")
    with pytest.raises(ImageError, match="absent.png"):
        export(job)

    not_an_image = tmp_path / "fake.png"
    not_an_image.write_text("this is not a png")
    with pytest.raises(ImageError, match="fake.png"):
        export(small_job(not_an_image, tmp_path / "out2"))


def test_unknown_backbone(make_png, tmp_path):
    img = make_png("a.png", 128, 96)
    job = small_job(img, tmp_path / "out", backbone="alexnet")
    with pytest.raises(JobError, match="alexnet"):
        export(job)


def test_lockfile_records_the_run(make_png, tmp_path):
    img = make_png("a.png", 128, 96)
    export(small_job(img, tmp_path / "out", seed=11))
    lock = json.loads((tmp_path / "out/preprocess.lock.json").read_text())
    assert lock["backbone"] == "resnet18"
    assert lock["weights"] == "random-init(seed=11)"
    assert lock["preprocess"]["resize"] == "pil-bilinear"
    assert lock["preprocess"]["mean"] == [0.485, 0.456, 0.406]
